//! Binary checkpoint format for trained denoisers.
//!
//! Layout (all multi-byte values little-endian):
//!
//! ```text
//! magic            12 bytes  "NTTA-CKPT-v1"
//! data_dim          u32
//! embed_dim         u32
//! hidden_width      u32
//! hidden_layers     u32
//! num_classes       u32
//! total_steps       u64
//! beta_start        f64
//! beta_end          f64
//! train_steps       u64
//! train_seed        u64
//! final_loss        f64
//! per layer         u32 rows, u32 cols, rows*cols f64 weights (row-major),
//!                   rows f64 bias
//! condition table   num_classes * embed_dim f64
//! null embedding    embed_dim f64
//! ```
//!
//! Loading rejects a wrong magic, truncated payloads, and trailing bytes;
//! round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::math::Mat;
use crate::model::{Denoiser, DenoiserModel, Layer, ModelConfig};

pub const MAGIC: &[u8; 12] = b"NTTA-CKPT-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainMeta {
    pub steps: u64,
    pub seed: u64,
    pub final_loss: f64,
}

/// A loaded checkpoint: the model, its schedule, and training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub beta_start: f64,
    pub beta_end: f64,
    pub meta: TrainMeta,
}

pub fn save_checkpoint(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    beta_start: f64,
    beta_end: f64,
    meta: &TrainMeta,
    path: &Path,
) -> Result<()> {
    if sched.total_steps() != model.config.total_steps {
        return Err(Error::Config(format!(
            "schedule T={} does not match model T={}",
            sched.total_steps(),
            model.config.total_steps
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io_err)?;
    let c = &model.config;
    w.write_u32::<LittleEndian>(c.data_dim as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(c.embed_dim as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(c.hidden_width as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(c.hidden_layers as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(c.num_classes as u32).map_err(io_err)?;
    w.write_u64::<LittleEndian>(c.total_steps as u64).map_err(io_err)?;
    w.write_f64::<LittleEndian>(beta_start).map_err(io_err)?;
    w.write_f64::<LittleEndian>(beta_end).map_err(io_err)?;
    w.write_u64::<LittleEndian>(meta.steps).map_err(io_err)?;
    w.write_u64::<LittleEndian>(meta.seed).map_err(io_err)?;
    w.write_f64::<LittleEndian>(meta.final_loss).map_err(io_err)?;

    for layer in model.layers() {
        w.write_u32::<LittleEndian>(layer.w.rows as u32).map_err(io_err)?;
        w.write_u32::<LittleEndian>(layer.w.cols as u32).map_err(io_err)?;
        for v in &layer.w.data {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
        for v in &layer.b {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
    }
    for row in model.cond_table() {
        for v in row {
            w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
    }
    for v in model.null_embedding() {
        w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 12];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}: not a checkpoint or unsupported version",
            String::from_utf8_lossy(&magic)
        )));
    }

    let trunc = |_: std::io::Error| Error::Checkpoint("truncated payload".into());
    let data_dim = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let embed_dim = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let hidden_width = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let hidden_layers = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let num_classes = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    let total_steps = r.read_u64::<LittleEndian>().map_err(trunc)? as usize;
    let beta_start = r.read_f64::<LittleEndian>().map_err(trunc)?;
    let beta_end = r.read_f64::<LittleEndian>().map_err(trunc)?;
    let steps = r.read_u64::<LittleEndian>().map_err(trunc)?;
    let seed = r.read_u64::<LittleEndian>().map_err(trunc)?;
    let final_loss = r.read_f64::<LittleEndian>().map_err(trunc)?;

    let mut layers = Vec::with_capacity(hidden_layers + 1);
    for _ in 0..hidden_layers + 1 {
        let rows = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut data = vec![0.0; rows * cols];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(trunc)?;
        }
        let mut b = vec![0.0; rows];
        for v in b.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(trunc)?;
        }
        layers.push(Layer {
            w: Mat { rows, cols, data },
            b,
        });
    }
    let mut cond_table = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut row = vec![0.0; embed_dim];
        for v in row.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(trunc)?;
        }
        cond_table.push(row);
    }
    let mut null = vec![0.0; embed_dim];
    for v in null.iter_mut() {
        *v = r.read_f64::<LittleEndian>().map_err(trunc)?;
    }

    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => {}
        Ok(_) => return Err(Error::Checkpoint("trailing bytes after payload".into())),
        Err(e) => return Err(Error::io(path, e)),
    }

    let config = ModelConfig {
        data_dim,
        embed_dim,
        hidden_width,
        hidden_layers,
        num_classes,
        total_steps,
        seed,
    };
    let model = DenoiserModel::from_parts(config, layers, cond_table, null)?;
    let schedule = build_schedule(total_steps, beta_start, beta_end)?;
    Ok(Checkpoint {
        model,
        schedule,
        beta_start,
        beta_end,
        meta: TrainMeta {
            steps,
            seed,
            final_loss,
        },
    })
}
