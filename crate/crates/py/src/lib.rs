//! Python bindings exposing the main types and operations: schedules, the
//! denoiser model (train/save/load), reward specs, alignment runs, and the
//! baseline samplers.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ntta::align::{self, AlignmentConfig};
use ntta::baselines;
use ntta::checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
use ntta::data::{generate_dataset, DatasetSpec, GeneratorKind};
use ntta::diffusion::{self, NoiseSchedule};
use ntta::grad::GradientMode;
use ntta::model::{self, Denoiser, DenoiserModel, ModelConfig, TrainConfig};
use ntta::rewards::RewardSpec;

fn to_py_err(e: ntta::Error) -> PyErr {
    match &e {
        ntta::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// β/α/ᾱ schedule for a linear-β diffusion process.
#[pyclass(name = "Schedule", skip_from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: NoiseSchedule,
    beta_start: f64,
    beta_end: f64,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (total_steps, beta_start=1e-4, beta_end=0.02))]
    fn new(total_steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let inner =
            diffusion::build_schedule(total_steps, beta_start, beta_end).map_err(to_py_err)?;
        Ok(PySchedule {
            inner,
            beta_start,
            beta_end,
        })
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.inner.total_steps()
    }

    fn beta(&self, t: usize) -> f64 {
        self.inner.beta(t)
    }

    fn alpha(&self, t: usize) -> f64 {
        self.inner.alpha(t)
    }

    fn alpha_bar(&self, t: usize) -> f64 {
        self.inner.alpha_bar(t)
    }

    fn __repr__(&self) -> String {
        format!(
            "Schedule(total_steps={}, beta_start={}, beta_end={})",
            self.inner.total_steps(),
            self.beta_start,
            self.beta_end
        )
    }
}

/// A reward function over data-space points.
#[pyclass(name = "Reward", skip_from_py_object)]
#[derive(Clone)]
struct PyReward {
    spec: RewardSpec,
}

#[pymethods]
impl PyReward {
    /// R(x) = −‖x − mu_star‖².
    #[staticmethod]
    fn target_mode(mu_star: Vec<f64>) -> PyResult<Self> {
        let spec = RewardSpec::TargetMode { mu_star };
        spec.validate().map_err(to_py_err)?;
        Ok(PyReward { spec })
    }

    /// R(x) = a·x.
    #[staticmethod]
    fn linear_score(a: Vec<f64>) -> PyResult<Self> {
        let spec = RewardSpec::LinearScore { a };
        spec.validate().map_err(to_py_err)?;
        Ok(PyReward { spec })
    }

    /// R(x) = −((‖x‖ − r0)/width)².
    #[staticmethod]
    fn radial_band(r0: f64, width: f64) -> PyResult<Self> {
        let spec = RewardSpec::RadialBand { r0, width };
        spec.validate().map_err(to_py_err)?;
        Ok(PyReward { spec })
    }

    /// Non-differentiable code-length reward at the given cell size.
    #[staticmethod]
    fn quantized_code_length(cell: f64) -> PyResult<Self> {
        let spec = RewardSpec::QuantizedCodeLength { cell };
        spec.validate().map_err(to_py_err)?;
        Ok(PyReward { spec })
    }

    /// w·A + (1−w)·B.
    #[staticmethod]
    fn weighted_combo(w: f64, a: &PyReward, b: &PyReward) -> PyResult<Self> {
        let spec = RewardSpec::WeightedCombo {
            w,
            a: Box::new(a.spec.clone()),
            b: Box::new(b.spec.clone()),
        };
        spec.validate().map_err(to_py_err)?;
        Ok(PyReward { spec })
    }

    fn evaluate(&self, x: Vec<f64>) -> f64 {
        self.spec.evaluate(&x)
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.spec.gradient(&x).map_err(to_py_err)
    }

    #[getter]
    fn differentiable(&self) -> bool {
        self.spec.is_differentiable()
    }

    fn __repr__(&self) -> String {
        format!("Reward({})", self.spec.name())
    }
}

/// Alignment hyperparameters; constructed with keyword overrides of the
/// defaults.
#[pyclass(name = "AlignConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyAlignConfig {
    inner: AlignmentConfig,
}

#[pymethods]
impl PyAlignConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = AlignmentConfig::default();
        if let Some(kw) = kwargs {
            for (key, value) in kw.iter() {
                let key: String = key.extract()?;
                match key.as_str() {
                    "lambda1" => cfg.lambda1 = value.extract()?,
                    "lambda2" => cfg.lambda2 = value.extract()?,
                    "sigma_phi_sq" => cfg.sigma_phi_sq = value.extract()?,
                    "gamma" => cfg.gamma = value.extract()?,
                    "n_min" => cfg.n_min = value.extract()?,
                    "n_max" => cfg.n_max = value.extract()?,
                    "particles" => cfg.particles = value.extract()?,
                    "guidance_scale" => cfg.guidance_scale = value.extract()?,
                    "learning_rate" => cfg.learning_rate = value.extract()?,
                    "seed" => cfg.seed = value.extract()?,
                    "reinit_per_timestep" => cfg.reinit_per_timestep = value.extract()?,
                    "zo_mu" | "zo_samples" => {}
                    other => {
                        return Err(PyValueError::new_err(format!(
                            "unknown alignment option '{other}'"
                        )))
                    }
                }
            }
            // zeroth-order mode is selected by passing either zo option
            let mu: Option<f64> = kw
                .get_item("zo_mu")?
                .map(|v| v.extract())
                .transpose()?;
            let samples: Option<usize> = kw
                .get_item("zo_samples")?
                .map(|v| v.extract())
                .transpose()?;
            if mu.is_some() || samples.is_some() {
                cfg.grad_mode = GradientMode::ZerothOrder {
                    mu: mu.unwrap_or(0.02),
                    num_samples: samples.unwrap_or(4),
                    seed: cfg.seed,
                };
            }
        }
        cfg.validate().map_err(to_py_err)?;
        Ok(PyAlignConfig { inner: cfg })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// The conditional denoiser plus its schedule.
#[pyclass(name = "Model")]
struct PyModel {
    model: DenoiserModel,
    schedule: NoiseSchedule,
    beta_start: f64,
    beta_end: f64,
    meta: TrainMeta,
}

#[pymethods]
impl PyModel {
    /// Trains a denoiser on a ring mixture (the default task).
    #[staticmethod]
    #[pyo3(signature = (modes=8, radius=1.5, std=0.15, samples_per_class=250,
                        total_steps=100, hidden_width=128, embed_dim=8,
                        steps=3000, batch_size=128, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train_ring(
        modes: usize,
        radius: f64,
        std: f64,
        samples_per_class: usize,
        total_steps: usize,
        hidden_width: usize,
        embed_dim: usize,
        steps: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = DatasetSpec {
            kind: GeneratorKind::Ring { modes, radius, std },
            samples_per_class,
            seed,
        };
        let dataset = generate_dataset(&spec).map_err(to_py_err)?;
        let (beta_start, beta_end) = (1e-4, 0.02);
        let schedule =
            diffusion::build_schedule(total_steps, beta_start, beta_end).map_err(to_py_err)?;
        let mut model = DenoiserModel::new(ModelConfig {
            data_dim: dataset.data_dim,
            embed_dim,
            hidden_width,
            hidden_layers: 3,
            num_classes: dataset.num_classes,
            total_steps,
            seed,
        })
        .map_err(to_py_err)?;
        let history = model::train(
            &mut model,
            &dataset,
            &schedule,
            &TrainConfig {
                steps,
                batch_size,
                seed,
                ..TrainConfig::default()
            },
        )
        .map_err(to_py_err)?;
        let final_loss = history.last().copied().unwrap_or(f64::NAN);
        Ok(PyModel {
            model,
            schedule,
            beta_start,
            beta_end,
            meta: TrainMeta {
                steps: steps as u64,
                seed,
                final_loss,
            },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(to_py_err)?;
        Ok(PyModel {
            model: ck.model,
            schedule: ck.schedule,
            beta_start: ck.beta_start,
            beta_end: ck.beta_end,
            meta: ck.meta,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(
            &self.model,
            &self.schedule,
            self.beta_start,
            self.beta_end,
            &self.meta,
            &path,
        )
        .map_err(to_py_err)
    }

    #[getter]
    fn data_dim(&self) -> usize {
        self.model.config.data_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.model.total_steps()
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.meta.final_loss
    }

    fn schedule(&self) -> PySchedule {
        PySchedule {
            inner: self.schedule.clone(),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    /// Noise prediction ε̂(x_t, t, embedding).
    fn predict_noise(&self, x: Vec<f64>, t: usize, embedding: Vec<f64>) -> PyResult<Vec<f64>> {
        self.model.predict_noise(&x, t, &embedding).map_err(to_py_err)
    }

    fn class_embedding(&self, label: usize) -> PyResult<Vec<f64>> {
        self.model.class_embedding(label).map_err(to_py_err)
    }

    fn null_embedding(&self) -> Vec<f64> {
        self.model.null_embedding().to_vec()
    }

    /// Runs the full alignment loop; returns (sample, summary dict).
    #[pyo3(signature = (class_label, reward, config=None, seed=None))]
    fn align_sample(
        &self,
        py: Python<'_>,
        class_label: usize,
        reward: &PyReward,
        config: Option<&PyAlignConfig>,
        seed: Option<u64>,
    ) -> PyResult<(Vec<f64>, Py<PyDict>)> {
        let mut cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let (x0, record) =
            align::align_sample(&self.model, &self.schedule, class_label, &cfg, &reward.spec)
                .map_err(to_py_err)?;
        let summary = PyDict::new(py);
        summary.set_item("target_reward", reward.spec.evaluate(&x0))?;
        summary.set_item("final_phi_drift", record.final_phi_drift)?;
        summary.set_item("denoiser_evals", record.denoiser_evals)?;
        summary.set_item("reward_evals", record.reward_evals)?;
        summary.set_item(
            "selected_rewards",
            record
                .steps
                .iter()
                .map(|s| s.particle.selected_reward)
                .collect::<Vec<f64>>(),
        )?;
        summary.set_item("net_improvement_fraction", record.net_improvement_fraction())?;
        Ok((x0, summary.into()))
    }

    /// Plain CFG sampling.
    #[pyo3(signature = (class_label, guidance_scale=2.0, seed=0))]
    fn sample(&self, class_label: usize, guidance_scale: f64, seed: u64) -> PyResult<Vec<f64>> {
        baselines::sample_unaligned(&self.model, &self.schedule, class_label, guidance_scale, seed)
            .map(|(x0, _)| x0)
            .map_err(to_py_err)
    }

    /// Best-of-N over plain samples.
    #[pyo3(signature = (class_label, n, reward, guidance_scale=2.0, seed=0))]
    fn best_of_n(
        &self,
        class_label: usize,
        n: usize,
        reward: &PyReward,
        guidance_scale: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        baselines::best_of_n(
            &self.model,
            &self.schedule,
            class_label,
            n,
            &reward.spec,
            guidance_scale,
            seed,
        )
        .map(|(x0, _)| x0)
        .map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(data_dim={}, classes={}, T={}, final_loss={:.4})",
            self.model.config.data_dim,
            self.model.config.num_classes,
            self.model.total_steps(),
            self.meta.final_loss
        )
    }
}

/// Forward diffusion q(x_t | x_0) with explicit noise.
#[pyfunction]
fn forward_diffuse(x0: Vec<f64>, t: usize, eps: Vec<f64>, sched: &PySchedule) -> PyResult<Vec<f64>> {
    diffusion::forward_diffuse(&x0, t, &eps, &sched.inner)
        .map(|s| s.x)
        .map_err(to_py_err)
}

/// Classifier-free guidance combination.
#[pyfunction]
fn cfg_combine(eps_uncond: Vec<f64>, eps_cond: Vec<f64>, scale: f64) -> PyResult<Vec<f64>> {
    diffusion::cfg_combine(&eps_uncond, &eps_cond, scale).map_err(to_py_err)
}

/// Posterior-mean estimate of the clean sample.
#[pyfunction]
fn tweedie_x0(x: Vec<f64>, t: usize, eps_tilde: Vec<f64>, sched: &PySchedule) -> PyResult<Vec<f64>> {
    let state = diffusion::LatentState::new(x, t);
    diffusion::tweedie_x0(&state, &eps_tilde, &sched.inner).map_err(to_py_err)
}

#[pymodule]
fn ntta_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyReward>()?;
    m.add_class::<PyAlignConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(forward_diffuse, m)?)?;
    m.add_function(wrap_pyfunction!(cfg_combine, m)?)?;
    m.add_function(wrap_pyfunction!(tweedie_x0, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
