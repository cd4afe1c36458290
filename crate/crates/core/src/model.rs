//! The desk-scale conditional denoiser: a small fully connected network
//! mapping (x_t, sinusoidal timestep features, condition embedding) to a
//! noise prediction, with a per-class condition-embedding table and a
//! learnable null embedding that anchors unconditional generation.
//!
//! Training follows the standard noise-prediction recipe with condition
//! dropout: with probability `dropout_prob` the class embedding is replaced
//! by the model's own null embedding, so the null embedding is a trained
//! parameter rather than a fixed zero vector.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::math::{self, Mat};
use crate::optim::Adam;

/// Number of sinusoidal frequencies in the timestep encoding (each
/// contributes a sin and a cos feature).
pub const TIME_FREQS: usize = 4;

/// Anything that predicts the noise component of a latent at a timestep.
/// Implemented by [`DenoiserModel`] and by closed-form test fixtures.
pub trait Denoiser {
    fn data_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn predict(&self, x: &[f64], t: usize, embedding: &[f64]) -> Result<Vec<f64>>;
    fn class_embedding(&self, label: usize) -> Result<Vec<f64>>;
    fn null_embedding(&self) -> &[f64];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub embed_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub num_classes: usize,
    /// Total diffusion steps; used to normalise the timestep features.
    pub total_steps: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            data_dim: 2,
            embed_dim: 8,
            hidden_width: 128,
            hidden_layers: 3,
            num_classes: 8,
            total_steps: 100,
            seed: 0,
        }
    }
}

/// Fully connected conditional noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    layers: Vec<Layer>,
    cond_table: Vec<Vec<f64>>,
    null: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.data_dim == 0 || config.embed_dim == 0 || config.hidden_width == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if config.num_classes == 0 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        if config.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let input_dim = config.data_dim + 2 * TIME_FREQS + config.embed_dim;
        let mut sizes = vec![input_dim];
        sizes.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
        sizes.push(config.data_dim);

        let mut layers = Vec::new();
        for win in sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Mat::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
            layers.push(Layer {
                w,
                b: vec![0.0; fan_out],
            });
        }
        let cond_table = (0..config.num_classes)
            .map(|_| {
                (0..config.embed_dim)
                    .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let null = (0..config.embed_dim)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(DenoiserModel {
            config,
            layers,
            cond_table,
            null,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn cond_table(&self) -> &[Vec<f64>] {
        &self.cond_table
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps
    }

    /// Sinusoidal features of the (normalised) timestep.
    pub fn time_features(&self, t: usize) -> Vec<f64> {
        let tau = t as f64 / self.config.total_steps as f64;
        let mut f = Vec::with_capacity(2 * TIME_FREQS);
        for k in 0..TIME_FREQS {
            let omega = std::f64::consts::PI * (1 << k) as f64;
            f.push((omega * tau).sin());
            f.push((omega * tau).cos());
        }
        f
    }

    fn check_inputs(&self, x: &[f64], embedding: &[f64]) -> Result<()> {
        if x.len() != self.config.data_dim {
            return Err(Error::Shape(format!(
                "x has dim {}, model expects {}",
                x.len(),
                self.config.data_dim
            )));
        }
        if embedding.len() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "embedding has dim {}, model expects {}",
                embedding.len(),
                self.config.embed_dim
            )));
        }
        Ok(())
    }

    /// Plain forward pass returning the noise prediction.
    pub fn predict_noise(&self, x: &[f64], t: usize, embedding: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, embedding)?;
        let mut h: Vec<f64> = x
            .iter()
            .chain(self.time_features(t).iter())
            .chain(embedding.iter())
            .copied()
            .collect();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.w.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(&layer.b) {
                *zi += bi;
            }
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        Ok(h)
    }

    /// Records the forward pass on a tape so callers can differentiate with
    /// respect to `x`, the embedding, or both. Weights are constants.
    pub fn predict_noise_tape<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        x: Var,
        t: usize,
        embedding: Var,
    ) -> Var {
        let tf = tape.constant(self.time_features(t));
        let mut h = tape.concat(vec![x, tf, embedding]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tape.affine(&layer.w, &layer.b, h);
            if i < last {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Forward pass keeping all activations, for backprop during training.
    fn forward_cached(&self, input: Vec<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut acts = vec![input];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.w.matvec(acts.last().unwrap());
            for (zi, bi) in z.iter_mut().zip(&layer.b) {
                *zi += bi;
            }
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        let out = acts.pop().unwrap();
        (acts, out)
    }

    /// Backprop `d_out` through the network, accumulating into `grads` and
    /// returning the gradient at the concatenated input.
    fn backprop(&self, acts: &[Vec<f64>], d_out: &[f64], grads: &mut ModelGrads) -> Vec<f64> {
        let mut delta = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let (gw, gb) = &mut grads.layers[i];
            gw.outer_acc(&delta, &acts[i]);
            for (b, d) in gb.iter_mut().zip(&delta) {
                *b += d;
            }
            let mut d_in = vec![0.0; self.layers[i].w.cols];
            self.layers[i].w.matvec_transpose_acc(&delta, &mut d_in);
            // every layer input except the raw input is a tanh output
            if i > 0 {
                for (d, a) in d_in.iter_mut().zip(&acts[i]) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = d_in;
        }
        delta
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for l in &self.layers {
            n += l.w.data.len() + l.b.len();
        }
        n += self.config.num_classes * self.config.embed_dim;
        n += self.config.embed_dim;
        n
    }

    /// Parameters flattened in the documented order: per layer the row-major
    /// weights then the bias, then the condition table rows, then the null
    /// embedding.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.w.data);
            v.extend_from_slice(&l.b);
        }
        for row in &self.cond_table {
            v.extend_from_slice(row);
        }
        v.extend_from_slice(&self.null);
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, model expects {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.w.data.len();
            l.w.data.copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = l.b.len();
            l.b.copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        for row in &mut self.cond_table {
            let rn = row.len();
            row.copy_from_slice(&flat[off..off + rn]);
            off += rn;
        }
        self.null.copy_from_slice(&flat[off..]);
        Ok(())
    }

    /// Reconstructs a model from its architecture and raw tensors (used when
    /// loading checkpoints).
    pub fn from_parts(
        config: ModelConfig,
        layers: Vec<Layer>,
        cond_table: Vec<Vec<f64>>,
        null: Vec<f64>,
    ) -> Result<Self> {
        let model = DenoiserModel {
            config,
            layers,
            cond_table,
            null,
        };
        if model.null.len() != config.embed_dim
            || model.cond_table.len() != config.num_classes
            || model.cond_table.iter().any(|r| r.len() != config.embed_dim)
        {
            return Err(Error::Checkpoint("embedding tensors do not match header".into()));
        }
        Ok(model)
    }

    pub fn all_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }
}

impl Denoiser for DenoiserModel {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn predict(&self, x: &[f64], t: usize, embedding: &[f64]) -> Result<Vec<f64>> {
        self.predict_noise(x, t, embedding)
    }

    fn class_embedding(&self, label: usize) -> Result<Vec<f64>> {
        self.cond_table
            .get(label)
            .cloned()
            .ok_or_else(|| Error::Config(format!("class label {label} out of range")))
    }

    fn null_embedding(&self) -> &[f64] {
        &self.null
    }
}

/// Gradient accumulator mirroring the model's parameter tensors.
pub struct ModelGrads {
    layers: Vec<(Mat, Vec<f64>)>,
    cond: Vec<Vec<f64>>,
    null: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &DenoiserModel) -> Self {
        ModelGrads {
            layers: model
                .layers
                .iter()
                .map(|l| (Mat::zeros(l.w.rows, l.w.cols), vec![0.0; l.b.len()]))
                .collect(),
            cond: model
                .cond_table
                .iter()
                .map(|r| vec![0.0; r.len()])
                .collect(),
            null: vec![0.0; model.null.len()],
        }
    }

    pub fn null_grad(&self) -> &[f64] {
        &self.null
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in &self.layers {
            v.extend_from_slice(&w.data);
            v.extend_from_slice(b);
        }
        for row in &self.cond {
            v.extend_from_slice(row);
        }
        v.extend_from_slice(&self.null);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 128,
            learning_rate: 1e-3,
            dropout_prob: 0.1,
            seed: 0,
        }
    }
}

/// Draws (t, ε, dropout) for one example and returns the noisy input and the
/// embedding to condition on.
fn sample_example(
    rng: &mut ChaCha12Rng,
    x0: &[f64],
    label: usize,
    den: &impl Denoiser,
    sched: &NoiseSchedule,
    dropout_prob: f64,
) -> Result<(Vec<f64>, usize, Vec<f64>, Vec<f64>, bool)> {
    let t = rng.random_range(1..=sched.total_steps());
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let dropped = rng.random::<f64>() < dropout_prob;
    let emb = if dropped {
        den.null_embedding().to_vec()
    } else {
        den.class_embedding(label)?
    };
    let x_t = forward_diffuse(x0, t, &eps, sched)?.x;
    Ok((x_t, t, eps, emb, dropped))
}

/// Mean noise-prediction loss ‖ε − ε̂(x_t, t, emb)‖² over one sampled batch,
/// with condition dropout to the null embedding.
pub fn training_loss<D: Denoiser>(
    den: &D,
    points: &[Vec<f64>],
    labels: &[usize],
    sched: &NoiseSchedule,
    dropout_prob: f64,
    seed: u64,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Config("training_loss needs a nonempty batch".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (x0, label) in points.iter().zip(labels) {
        let (x_t, t, eps, emb, _) = sample_example(&mut rng, x0, *label, den, sched, dropout_prob)?;
        let pred = den.predict(&x_t, t, &emb)?;
        total += math::sum_sq(&math::sub(&eps, &pred));
    }
    Ok(total / points.len() as f64)
}

/// One batch of loss + parameter gradients for the training loop. Exposed at
/// crate level so the dropout-gradient behaviour is testable.
pub(crate) fn batch_loss_and_grads(
    model: &DenoiserModel,
    points: &[Vec<f64>],
    labels: &[usize],
    sched: &NoiseSchedule,
    dropout_prob: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, ModelGrads)> {
    let mut grads = ModelGrads::zeros_like(model);
    let mut total = 0.0;
    let inv_batch = 1.0 / points.len() as f64;
    let d_x = model.config.data_dim;
    let n_tf = 2 * TIME_FREQS;
    for (x0, label) in points.iter().zip(labels) {
        let (x_t, t, eps, emb, dropped) =
            sample_example(rng, x0, *label, model, sched, dropout_prob)?;
        let input: Vec<f64> = x_t
            .iter()
            .chain(model.time_features(t).iter())
            .chain(emb.iter())
            .copied()
            .collect();
        let (acts, out) = model.forward_cached(input);
        total += math::sum_sq(&math::sub(&eps, &out));
        let d_out: Vec<f64> = out
            .iter()
            .zip(&eps)
            .map(|(o, e)| 2.0 * (o - e) * inv_batch)
            .collect();
        let d_input = model.backprop(&acts, &d_out, &mut grads);
        let d_emb = &d_input[d_x + n_tf..];
        let target = if dropped {
            &mut grads.null
        } else {
            &mut grads.cond[*label]
        };
        for (g, d) in target.iter_mut().zip(d_emb) {
            *g += d;
        }
    }
    Ok((total * inv_batch, grads))
}

/// Trains the model in place with Adam; returns the per-step batch loss.
pub fn train(
    model: &mut DenoiserModel,
    dataset: &crate::data::Dataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if dataset.data_dim != model.config.data_dim {
        return Err(Error::Shape(format!(
            "dataset dim {} vs model dim {}",
            dataset.data_dim, model.config.data_dim
        )));
    }
    if sched.total_steps() != model.config.total_steps {
        return Err(Error::Config(format!(
            "schedule T={} vs model T={}",
            sched.total_steps(),
            model.config.total_steps
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, model.param_count());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut points = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        points.clear();
        labels.clear();
        for _ in 0..cfg.batch_size {
            let i = rng.random_range(0..dataset.len());
            points.push(dataset.points[i].clone());
            labels.push(dataset.labels[i]);
        }
        let (loss, grads) =
            batch_loss_and_grads(model, &points, &labels, sched, cfg.dropout_prob, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                msg: format!("loss became {loss}"),
            });
        }
        let mut params = model.flat_params();
        let delta = adam.update_delta(&grads.flat());
        for (p, d) in params.iter_mut().zip(&delta) {
            *p -= d;
        }
        model.set_flat_params(&params)?;
        history.push(loss);
    }
    if !model.all_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            msg: "non-finite parameter after training".into(),
        });
    }
    Ok(history)
}
