//! Multilayer perceptrons: initialisation, inference, training, checkpoints.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointKind, Checkpoint};
pub use train::{accuracy, cross_entropy, dataset_loss, train, TrainConfig, TrainHistory};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{kernels, Tape, Tensor, Var};
use crate::rng;

/// Fully connected ReLU network ending in a softmax over `classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        let arch = MlpArchitecture {
            input_dim,
            hidden,
            classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `[input, 32, C]`, the tabular default.
    pub fn tabular(input_dim: usize, classes: usize) -> Self {
        MlpArchitecture {
            input_dim,
            hidden: vec![32],
            classes,
        }
    }

    /// `[input, 128, 64, C]`, the image-vector default.
    pub fn image(input_dim: usize, classes: usize) -> Self {
        MlpArchitecture {
            input_dim,
            hidden: vec![128, 64],
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("every layer width must be ≥ 1: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// Weights and biases of one MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: MlpArchitecture,
    layers: Vec<Layer>,
}

/// A class-probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior(pub Vec<f64>);

impl Posterior {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Glorot-uniform weights (`U(−a, a)`, `a = √(6/(fan_in+fan_out))`), zero biases.
pub fn init_model(arch: &MlpArchitecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = rng::stream(seed, "model-init");
    let widths = arch.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            Layer {
                weight: Tensor::matrix(fan_in, fan_out, data).expect("layer shape"),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    Ok(ModelParams {
        arch: arch.clone(),
        layers,
    })
}

impl ModelParams {
    pub fn from_layers(arch: MlpArchitecture, layers: Vec<Layer>) -> Result<Self> {
        arch.validate()?;
        let widths = arch.widths();
        if layers.len() != widths.len() - 1 {
            return Err(Error::Checkpoint(format!(
                "architecture has {} layers, got {}",
                widths.len() - 1,
                layers.len()
            )));
        }
        for (l, w) in layers.iter().zip(widths.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] || l.bias.shape() != [w[1]] {
                return Err(Error::Checkpoint(format!(
                    "layer shapes {:?}/{:?} do not match widths {w:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::Checkpoint("non-finite parameter".into()));
            }
        }
        Ok(ModelParams { arch, layers })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Flat list of parameter tensors: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    /// Inverse of [`ModelParams::tensors`].
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != 2 * self.layers.len() {
            return Err(Error::InvalidShape {
                op: "with_tensors",
                msg: format!("expected {} tensors, got {}", 2 * self.layers.len(), tensors.len()),
            });
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(self.layers.len());
        for old in &self.layers {
            let (weight, bias) = (it.next().expect("weight"), it.next().expect("bias"));
            old.weight.same_shape(&weight, "with_tensors")?;
            old.bias.same_shape(&bias, "with_tensors")?;
            layers.push(Layer { weight, bias });
        }
        Ok(ModelParams {
            arch: self.arch.clone(),
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: batch.shape().to_vec(),
                right: vec![self.arch.input_dim],
            });
        }
        Ok(())
    }

    /// Class probabilities `[n, C]` without recording a tape.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut h = batch.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = kernels::add_row(&kernels::matmul(&h, &l.weight)?, &l.bias)?;
            if i + 1 < self.layers.len() {
                h = kernels::relu(&h);
            }
        }
        kernels::softmax_rows(&h)
    }

    /// One posterior per row of `batch`.
    pub fn forward(&self, batch: &Tensor) -> Result<Vec<Posterior>> {
        let p = self.predict_proba(batch)?;
        Ok((0..p.rows()).map(|i| Posterior(p.row(i).to_vec())).collect())
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        let p = self.predict_proba(data.features())?;
        Ok((0..p.rows()).map(|i| argmax(p.row(i))).collect())
    }

    /// Places the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, true)
    }

    /// Places the parameters on `tape` as constants (frozen model).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let vars = self
            .layers
            .iter()
            .map(|l| (leaf(&l.weight), leaf(&l.bias)))
            .collect();
        BoundModel {
            input_dim: self.arch.input_dim,
            vars,
        }
    }
}

/// Model parameters living on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    input_dim: usize,
    vars: Vec<(Var, Var)>,
}

impl BoundModel {
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: shape,
                right: vec![self.input_dim],
            });
        }
        let mut h = x;
        for (i, &(w, b)) in self.vars.iter().enumerate() {
            let xw = tape.matmul(h, w)?;
            h = tape.add_row(xw, b)?;
            if i + 1 < self.vars.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn probs(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = self.logits(tape, x)?;
        tape.softmax(z)
    }

    /// Parameter vars in `w0, b0, w1, b1, ...` order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
