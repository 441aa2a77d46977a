use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{Sgd, Tape, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean mini-batch cross-entropy seen during each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Mean cross-entropy of probabilities `[n, C]` against one-hot targets.
pub fn cross_entropy(tape: &mut Tape, probs: Var, one_hot: Var) -> Result<Var> {
    let n = tape.value(probs)?.rows();
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, one_hot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

/// Mini-batch SGD on cross-entropy; the shuffle order comes from `cfg.seed`.
pub fn train(model: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if data.dims() != model.architecture().input_dim || data.classes() != model.architecture().classes {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: vec![data.dims(), data.classes()],
            right: vec![model.architecture().input_dim, model.architecture().classes],
        });
    }
    let mut params = model.tensors();
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model.clone(), history));
    }
    let mut opt = Sgd::new(cfg.lr)?.with_momentum(cfg.momentum)?;
    let mut order_rng = rng::stream(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let one_hot = data.one_hot();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features().select_rows(chunk);
            let y = one_hot.select_rows(chunk);
            let current = model.with_tensors(params.clone())?;
            let mut tape = Tape::new();
            let bound = current.bind(&mut tape);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let probs = bound.probs(&mut tape, xv)?;
            let loss = cross_entropy(&mut tape, probs, yv)?;
            let lv = tape.value(loss)?.item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut params, grads.all())?;
            sum += lv;
            batches += 1;
        }
        history.epoch_loss.push(sum / batches as f64);
    }
    let trained = model.with_tensors(params)?;
    if !trained.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    Ok((trained, history))
}

/// Fraction of rows whose argmax posterior (lowest index on ties) matches the label.
pub fn accuracy(model: &ModelParams, data: &Dataset) -> Result<f64> {
    let pred = model.predict(data)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Full-dataset mean cross-entropy, tape-free.
pub fn dataset_loss(model: &ModelParams, data: &Dataset) -> Result<f64> {
    let p = model.predict_proba(data.features())?;
    let loss: f64 = data
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| -p.row(i)[y].max(crate::numcore::kernels::LOG_FLOOR).ln())
        .sum();
    Ok(loss / data.len() as f64)
}
