//! Synthetic labelled datasets: Gaussian mixtures given explicitly, as a ring
//! of modes, or as a grid.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mixture layout. Every class is an isotropic Gaussian around its mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Explicit per-class means and isotropic standard deviations.
    GaussianMixture { means: Vec<Vec<f64>>, stds: Vec<f64> },
    /// `modes` classes equally spaced on a circle of `radius`.
    Ring { modes: usize, radius: f64, std: f64 },
    /// `side`×`side` classes on a 2D lattice centred at the origin.
    Grid { side: usize, spacing: f64, std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let means = self.class_means();
        if means.is_empty() {
            return Err(Error::Config("dataset needs at least one class".into()));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Config("dataset dimension must be >= 1".into()));
        }
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("dataset class means differ in dimension".into()));
        }
        for s in self.class_stds() {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("covariance scale must be >= 0, got {s}")));
            }
        }
        if let GeneratorKind::GaussianMixture { means, stds } = &self.kind {
            if means.len() != stds.len() {
                return Err(Error::Config(format!(
                    "gaussian_mixture needs one std per class: {} means vs {} stds",
                    means.len(),
                    stds.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match &self.kind {
            GeneratorKind::GaussianMixture { means, .. } => means.len(),
            GeneratorKind::Ring { modes, .. } => *modes,
            GeneratorKind::Grid { side, .. } => side * side,
        }
    }

    pub fn data_dim(&self) -> usize {
        match &self.kind {
            GeneratorKind::GaussianMixture { means, .. } => {
                means.first().map(|m| m.len()).unwrap_or(0)
            }
            GeneratorKind::Ring { .. } | GeneratorKind::Grid { .. } => 2,
        }
    }

    /// Mode centre of every class, in class order.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        match &self.kind {
            GeneratorKind::GaussianMixture { means, .. } => means.clone(),
            GeneratorKind::Ring { modes, radius, .. } => (0..*modes)
                .map(|k| {
                    let theta = 2.0 * std::f64::consts::PI * k as f64 / *modes as f64;
                    vec![radius * theta.cos(), radius * theta.sin()]
                })
                .collect(),
            GeneratorKind::Grid { side, spacing, .. } => {
                let offset = (*side as f64 - 1.0) / 2.0;
                let mut v = Vec::with_capacity(side * side);
                for r in 0..*side {
                    for c in 0..*side {
                        v.push(vec![
                            spacing * (c as f64 - offset),
                            spacing * (r as f64 - offset),
                        ]);
                    }
                }
                v
            }
        }
    }

    pub fn class_stds(&self) -> Vec<f64> {
        match &self.kind {
            GeneratorKind::GaussianMixture { stds, .. } => stds.clone(),
            GeneratorKind::Ring { modes, std, .. } => vec![*std; *modes],
            GeneratorKind::Grid { side, std, .. } => vec![*std; side * side],
        }
    }
}

/// Labelled point set; `points[i]` belongs to class `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub data_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Samples `samples_per_class` points per class, deterministically for a
/// given spec.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.class_means();
    let stds = spec.class_stds();
    let dim = spec.data_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(means.len() * spec.samples_per_class);
    let mut labels = Vec::with_capacity(points.capacity());
    for (label, (mean, std)) in means.iter().zip(&stds).enumerate() {
        for _ in 0..spec.samples_per_class {
            let p: Vec<f64> = mean
                .iter()
                .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            points.push(p);
            labels.push(label);
        }
    }
    Ok(Dataset {
        points,
        labels,
        num_classes: means.len(),
        data_dim: dim,
    })
}

/// Index of the nearest class mode and the distance to it.
pub fn nearest_mode(x: &[f64], means: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (k, m) in means.iter().enumerate() {
        let d = crate::math::norm(&crate::math::sub(x, m));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}
