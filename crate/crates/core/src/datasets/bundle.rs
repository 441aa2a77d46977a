use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Nearest integer, halves rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RequestMode {
    /// Forget `round(rate·N)` uniformly chosen training rows.
    SampleLevel { rate: f64 },
    /// Forget every training row of one class.
    ClassLevel { class_id: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    #[serde(flatten)]
    pub mode: RequestMode,
    pub seed: u64,
}

impl UnlearnRequest {
    pub fn sample_level(rate: f64, seed: u64) -> Self {
        UnlearnRequest {
            mode: RequestMode::SampleLevel { rate },
            seed,
        }
    }

    pub fn class_level(class_id: usize, seed: u64) -> Self {
        UnlearnRequest {
            mode: RequestMode::ClassLevel { class_id },
            seed,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.mode {
            RequestMode::SampleLevel { rate } if !(rate > 0.0 && rate < 1.0) => Err(Error::Config(format!(
                "unlearning rate must be in (0, 1), got {rate}"
            ))),
            RequestMode::ClassLevel { class_id } if class_id >= classes => Err(Error::Config(format!(
                "class {class_id} out of range for {classes} classes"
            ))),
            _ => Ok(()),
        }
    }

    /// Short human-readable form, e.g. `sample:0.05` or `class:3`.
    pub fn descriptor(&self) -> String {
        match self.mode {
            RequestMode::SampleLevel { rate } => format!("sample:{rate}"),
            RequestMode::ClassLevel { class_id } => format!("class:{class_id}"),
        }
    }
}

/// Every data role of one unlearning request.
///
/// Index vectors point into the `train` / `test` datasets the bundle was
/// built from and are kept sorted ascending.
#[derive(Clone, Debug)]
pub struct SplitBundle {
    pub d_train: Dataset,
    pub d_test: Dataset,
    /// Forget set.
    pub d_f: Dataset,
    /// Retain set, `d_train \ d_f`.
    pub d_r: Dataset,
    /// Alternative-model subset of `d_r`.
    pub d_r_alt: Dataset,
    /// Third-party set drawn from the test data.
    pub d_third: Dataset,
    /// Test rows not in `d_third`; used for reported accuracy.
    pub d_eval: Option<Dataset>,
    pub request: UnlearnRequest,
    pub forget_idx: Vec<usize>,
    pub retain_idx: Vec<usize>,
    pub alt_idx: Vec<usize>,
    pub third_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
}

impl SplitBundle {
    /// Evaluation split, falling back to the whole test set when the third
    /// party consumed all of it.
    pub fn eval_set(&self) -> &Dataset {
        self.d_eval.as_ref().unwrap_or(&self.d_test)
    }
}

fn sorted_sample(rng: &mut rng::StreamRng, n: usize, k: usize) -> Vec<usize> {
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

pub fn make_bundle(
    train: &Dataset,
    test: &Dataset,
    req: UnlearnRequest,
    alt_fraction: f64,
    third_fraction: f64,
) -> Result<SplitBundle> {
    req.validate(train.classes())?;
    if train.dims() != test.dims() || train.classes() != test.classes() {
        return Err(Error::Data(format!(
            "train ({} dims, {} classes) and test ({} dims, {} classes) disagree",
            train.dims(),
            train.classes(),
            test.dims(),
            test.classes()
        )));
    }
    if !(alt_fraction > 0.0 && alt_fraction <= 1.0) {
        return Err(Error::Config(format!("alt_fraction must be in (0, 1], got {alt_fraction}")));
    }
    if !(third_fraction > 0.0 && third_fraction <= 1.0) {
        return Err(Error::Config(format!("third_fraction must be in (0, 1], got {third_fraction}")));
    }
    let n = train.len();
    let forget_idx = match req.mode {
        RequestMode::SampleLevel { rate } => {
            let k = round_half_up(rate * n as f64);
            if k == 0 {
                return Err(Error::Data(format!("rate {rate} selects no samples out of {n}")));
            }
            if k >= n {
                return Err(Error::Data(format!("rate {rate} forgets all {n} samples")));
            }
            sorted_sample(&mut rng::stream(req.seed, "forget"), n, k)
        }
        RequestMode::ClassLevel { class_id } => {
            let idx = train.indices_of_class(class_id);
            if idx.is_empty() {
                return Err(Error::Data(format!("class {class_id} has no training samples")));
            }
            if idx.len() == n {
                return Err(Error::Data(format!("class {class_id} is the whole training set")));
            }
            idx
        }
    };
    let mut is_forgotten = vec![false; n];
    for &i in &forget_idx {
        is_forgotten[i] = true;
    }
    let retain_idx: Vec<usize> = (0..n).filter(|&i| !is_forgotten[i]).collect();

    let n_alt = round_half_up(alt_fraction * retain_idx.len() as f64).max(1);
    let alt_idx: Vec<usize> = sorted_sample(&mut rng::stream(req.seed, "alt"), retain_idx.len(), n_alt)
        .into_iter()
        .map(|i| retain_idx[i])
        .collect();

    let n_test = test.len();
    let n_third = round_half_up(third_fraction * n_test as f64).clamp(1, n_test);
    let third_idx = sorted_sample(&mut rng::stream(req.seed, "third"), n_test, n_third);
    let mut in_third = vec![false; n_test];
    for &i in &third_idx {
        in_third[i] = true;
    }
    let eval_idx: Vec<usize> = (0..n_test).filter(|&i| !in_third[i]).collect();

    Ok(SplitBundle {
        d_train: train.clone(),
        d_test: test.clone(),
        d_f: train.subset(&forget_idx)?,
        d_r: train.subset(&retain_idx)?,
        d_r_alt: train.subset(&alt_idx)?,
        d_third: test.subset(&third_idx)?,
        d_eval: if eval_idx.is_empty() {
            None
        } else {
            Some(test.subset(&eval_idx)?)
        },
        request: req,
        forget_idx,
        retain_idx,
        alt_idx,
        third_idx,
        eval_idx,
    })
}
