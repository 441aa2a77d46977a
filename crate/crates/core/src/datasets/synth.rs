use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;

/// Isotropic unit-variance Gaussian blobs, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    /// Distance between every pair of class means.
    pub separation: f64,
    pub seed: u64,
    /// Fraction of rows whose label is replaced by a uniformly random class.
    #[serde(default)]
    pub label_noise: f64,
}

/// Class means sit at `separation/√2 · e_c` (a regular simplex in the first
/// `classes` coordinates), so every pair is exactly `separation` apart.
/// Rows are emitted class by class.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dims == 0 || spec.per_class == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs classes ≥ 2, dims ≥ 1, per_class ≥ 1 (got {}, {}, {})",
            spec.classes, spec.dims, spec.per_class
        )));
    }
    if spec.dims < spec.classes {
        return Err(Error::Config(format!(
            "equidistant means for {} classes need at least {} dims, got {}",
            spec.classes, spec.classes, spec.dims
        )));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(Error::Config(format!("separation must be finite and ≥ 0, got {}", spec.separation)));
    }
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(Error::Config(format!("label_noise must be in [0, 1], got {}", spec.label_noise)));
    }
    let offset = spec.separation / std::f64::consts::SQRT_2;
    let mut noise = rng::stream(spec.seed, "synth-noise");
    let mut flips = rng::stream(spec.seed, "synth-labels");
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.per_class {
            for j in 0..spec.dims {
                let z: f64 = StandardNormal.sample(&mut noise);
                data.push(if j == c { offset + z } else { z });
            }
            let y = if spec.label_noise > 0.0 && rand::Rng::random::<f64>(&mut flips) < spec.label_noise {
                rand::Rng::random_range(&mut flips, 0..spec.classes)
            } else {
                c
            };
            labels.push(y);
        }
    }
    Dataset::new(Tensor::matrix(n, spec.dims, data)?, labels, spec.classes)
}
