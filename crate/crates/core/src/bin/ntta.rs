fn main() {
    std::process::exit(ntta::harness::cli::run(std::env::args_os()));
}
