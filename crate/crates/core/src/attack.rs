//! Membership inference against unlearning.
//!
//! The unlearning attacker `M_A` sees the posterior of the original model and
//! of the unlearned model for the same sample, concatenated, and predicts
//! whether the sample was in the original training set but removed. It is
//! trained on shadow pairs; see [`build_shadow_pairs`]. A second, classical
//! attacker ([`classic_mia_prob`]) looks at one model only and is used to
//! audit removal.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{round_half_up, Dataset};
use crate::error::{Error, Result};
use crate::models::{accuracy, init_model, train, BoundModel, MlpArchitecture, ModelParams, TrainConfig};
use crate::numcore::{kernels, Tape, Tensor, Var};
use crate::rng;

/// `concat(M_o(x), M_u(x))`, length `2C`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackFeature(pub Vec<f64>);

impl AttackFeature {
    pub fn original(&self) -> &[f64] {
        &self.0[..self.0.len() / 2]
    }

    pub fn unlearned(&self) -> &[f64] {
        &self.0[self.0.len() / 2..]
    }
}

/// Binary classifier over [`AttackFeature`]s; class 1 means "was a member,
/// then unlearned".
#[derive(Clone, Debug, PartialEq)]
pub struct AttackModel {
    params: ModelParams,
}

impl AttackModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        if params.architecture().classes != 2 || !params.architecture().input_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attack model must map 2C features to 2 classes, got {:?}",
                params.architecture()
            )));
        }
        Ok(AttackModel { params })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Class count of the target models this attacker expects.
    pub fn target_classes(&self) -> usize {
        self.params.architecture().input_dim / 2
    }

    /// Positive-class probability for each feature row `[n, 2C]`.
    pub fn member_probs(&self, features: &Tensor) -> Result<Vec<f64>> {
        let p = self.params.predict_proba(features)?;
        Ok((0..p.rows()).map(|i| p.row(i)[1]).collect())
    }

    /// Places the frozen attacker on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundAttack {
        BoundAttack(self.params.bind_frozen(tape))
    }
}

/// Frozen attacker on a tape.
#[derive(Clone, Debug)]
pub struct BoundAttack(BoundModel);

impl BoundAttack {
    /// Positive-class probability per feature row.
    pub fn member_probs(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let p = self.0.probs(tape, features)?;
        tape.column(p, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowConfig {
    pub shadow_count: usize,
    /// Fraction of each shadow training set that the shadow "unlearns".
    pub shadow_unlearn_rate: f64,
    /// Fraction of the pool used as each shadow's training set; the rest
    /// supplies never-member negatives.
    #[serde(default = "default_in_fraction")]
    pub shadow_train_fraction: f64,
    /// Fraction of pairs held out to measure attack accuracy.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    pub seed: u64,
}

fn default_in_fraction() -> f64 {
    0.5
}

fn default_validation_fraction() -> f64 {
    0.25
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig {
            shadow_count: 8,
            shadow_unlearn_rate: 0.2,
            shadow_train_fraction: default_in_fraction(),
            validation_fraction: default_validation_fraction(),
            seed: 0,
        }
    }
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shadow_count == 0 {
            return Err(Error::Config("shadow_count must be ≥ 1".into()));
        }
        for (name, v) in [
            ("shadow_unlearn_rate", self.shadow_unlearn_rate),
            ("shadow_train_fraction", self.shadow_train_fraction),
            ("validation_fraction", self.validation_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// How shadow models and attack classifiers are fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOptions {
    /// Training recipe for shadow models; should mirror the target's.
    pub shadow_train: TrainConfig,
    pub attack_hidden: Vec<usize>,
    pub attack_train: TrainConfig,
}

impl Default for AttackOptions {
    fn default() -> Self {
        AttackOptions {
            shadow_train: TrainConfig::default(),
            attack_hidden: vec![32],
            attack_train: TrainConfig {
                epochs: 200,
                batch_size: 32,
                lr: 0.1,
                momentum: 0.9,
                seed: 0,
            },
        }
    }
}

/// Labelled attack features.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

}

#[derive(Clone, Debug)]
pub struct TrainedAttack {
    pub model: AttackModel,
    pub validation_accuracy: f64,
}

fn check_compatible(a: &ModelParams, b: &ModelParams, samples: &Dataset) -> Result<()> {
    let (aa, ba) = (a.architecture(), b.architecture());
    if aa.input_dim != ba.input_dim || aa.classes != ba.classes || aa.input_dim != samples.dims() || aa.classes != samples.classes()
    {
        return Err(Error::ShapeMismatch {
            op: "build_features",
            left: vec![aa.input_dim, aa.classes, ba.input_dim, ba.classes],
            right: vec![samples.dims(), samples.classes()],
        });
    }
    Ok(())
}

/// Feature matrix `[n, 2C]`, rows in sample order.
pub fn feature_matrix(m_o: &ModelParams, m_u: &ModelParams, samples: &Dataset) -> Result<Tensor> {
    check_compatible(m_o, m_u, samples)?;
    let po = m_o.predict_proba(samples.features())?;
    let pu = m_u.predict_proba(samples.features())?;
    kernels::concat_cols(&po, &pu)
}

pub fn build_features(m_o: &ModelParams, m_u: &ModelParams, samples: &Dataset) -> Result<Vec<AttackFeature>> {
    let f = feature_matrix(m_o, m_u, samples)?;
    Ok((0..f.rows()).map(|i| AttackFeature(f.row(i).to_vec())).collect())
}

/// Mean positive-class probability of `m_a` over `d_f`.
pub fn attack_prob(m_a: &AttackModel, m_o: &ModelParams, m_u: &ModelParams, d_f: &Dataset) -> Result<f64> {
    let probs = m_a.member_probs(&feature_matrix(m_o, m_u, d_f)?)?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

/// Differentiable [`attack_prob`]: `original_probs` is a constant `[n, C]`
/// block, `unlearned_probs` is a tape value depending on `ω_u`.
pub fn attack_prob_on_tape(tape: &mut Tape, m_a: &BoundAttack, original_probs: Var, unlearned_probs: Var) -> Result<Var> {
    let features = tape.concat_cols(original_probs, unlearned_probs)?;
    let member = m_a.member_probs(tape, features)?;
    tape.mean(member)
}

/// Shadow pairs for training `M_A`.
///
/// For shadow `k`: the pool is shuffled and split into an "in" part (shadow
/// training set) and an "out" part; a shadow original is trained on "in", a
/// random `shadow_unlearn_rate` of "in" is forgotten by retraining on the
/// rest. Positives are the forgotten samples, negatives an equal number of
/// "out" samples, both featurised with the (shadow original, shadow
/// unlearned) pair. Pairs are concatenated in shadow-index order.
pub fn build_shadow_pairs(
    arch: &MlpArchitecture,
    shadow: &ShadowConfig,
    pool: &Dataset,
    opts: &AttackOptions,
) -> Result<PairSet> {
    shadow.validate()?;
    let n_in = round_half_up(shadow.shadow_train_fraction * pool.len() as f64);
    let n_forget = round_half_up(shadow.shadow_unlearn_rate * n_in as f64);
    if n_in < 2 || n_forget == 0 || n_forget >= n_in || n_in >= pool.len() {
        return Err(Error::Data(format!(
            "pool of {} rows is too small for shadow splits (in {n_in}, forget {n_forget})",
            pool.len()
        )));
    }
    let per_shadow: Vec<Result<(Tensor, Vec<usize>)>> = (0..shadow.shadow_count)
        .into_par_iter()
        .map(|k| {
            let seed = rng::derive_indexed(shadow.seed, "shadow", k as u64);
            let mut r = rng::seeded(seed);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut r);
            let (in_idx, out_idx) = order.split_at(n_in);
            let mut forget_pos = index::sample(&mut r, n_in, n_forget).into_vec();
            forget_pos.sort_unstable();
            let mut forgotten = vec![false; n_in];
            for &p in &forget_pos {
                forgotten[p] = true;
            }
            let forget_idx: Vec<usize> = forget_pos.iter().map(|&p| in_idx[p]).collect();
            let retain_idx: Vec<usize> = (0..n_in).filter(|&p| !forgotten[p]).map(|p| in_idx[p]).collect();
            let n_neg = n_forget.min(out_idx.len());
            let neg_idx: Vec<usize> = out_idx[..n_neg].to_vec();

            let cfg = TrainConfig {
                seed,
                ..opts.shadow_train.clone()
            };
            let init = init_model(arch, seed)?;
            let (shadow_o, _) = train(&init, &pool.subset(in_idx)?, &cfg)?;
            let (shadow_u, _) = train(&init, &pool.subset(&retain_idx)?, &cfg)?;

            let pos = feature_matrix(&shadow_o, &shadow_u, &pool.subset(&forget_idx)?)?;
            let neg = feature_matrix(&shadow_o, &shadow_u, &pool.subset(&neg_idx)?)?;
            let mut data = pos.into_data();
            data.extend(neg.into_data());
            let labels: Vec<usize> = std::iter::repeat_n(1, n_forget).chain(std::iter::repeat_n(0, n_neg)).collect();
            Ok((Tensor::matrix(labels.len(), 2 * arch.classes, data)?, labels))
        })
        .collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for r in per_shadow {
        let (f, l) = r?;
        data.extend(f.into_data());
        labels.extend(l);
    }
    Ok(PairSet {
        features: Tensor::matrix(labels.len(), 2 * arch.classes, data)?,
        labels,
    })
}

/// Fits an attack classifier on `pairs`, holding out `validation_fraction`
/// of them (chosen by `seed`) to report accuracy.
pub fn fit_attack(pairs: &PairSet, validation_fraction: f64, opts: &AttackOptions, seed: u64) -> Result<TrainedAttack> {
    let n = pairs.len();
    let n_val = round_half_up(validation_fraction * n as f64);
    if n_val == 0 || n_val >= n {
        return Err(Error::Data(format!("{n} attack pairs cannot be split for validation")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "attack-split"));
    let (val_idx, train_idx) = order.split_at(n_val);
    let all = Dataset::new(pairs.features.clone(), pairs.labels.clone(), 2)?;
    let (train_set, val_set) = (all.subset(train_idx)?, all.subset(val_idx)?);

    let arch = MlpArchitecture::new(pairs.features.cols(), opts.attack_hidden.clone(), 2)?;
    let init = init_model(&arch, rng::derive_seed(seed, "attack-init"))?;
    let cfg = TrainConfig {
        seed: rng::derive_seed(seed, "attack-shuffle"),
        ..opts.attack_train.clone()
    };
    let (params, _) = train(&init, &train_set, &cfg)?;
    Ok(TrainedAttack {
        validation_accuracy: accuracy(&params, &val_set)?,
        model: AttackModel::new(params)?,
    })
}

/// Trains `M_A` from shadow models that mirror `m_o`'s architecture.
pub fn train_attack(m_o: &ModelParams, shadow: &ShadowConfig, pool: &Dataset, opts: &AttackOptions) -> Result<TrainedAttack> {
    let pairs = build_shadow_pairs(m_o.architecture(), shadow, pool, opts)?;
    fit_attack(&pairs, shadow.validation_fraction, opts, shadow.seed)
}

/// Per-row audit features: posterior, one-hot label and `ln(−ln p_y)`
/// (log of the sample's own cross-entropy, which spreads out the tiny losses
/// of memorised points).
fn classic_features(target: &ModelParams, data: &Dataset) -> Result<Tensor> {
    let p = target.predict_proba(data.features())?;
    let c = p.cols();
    let mut out = Vec::with_capacity(data.len() * (2 * c + 1));
    for (i, &y) in data.labels().iter().enumerate() {
        let row = p.row(i);
        out.extend_from_slice(row);
        out.extend((0..c).map(|j| if j == y { 1.0 } else { 0.0 }));
        let loss = -row[y].max(kernels::LOG_FLOOR).ln();
        out.push(loss.max(kernels::LOG_FLOOR).ln());
    }
    Tensor::matrix(data.len(), 2 * c + 1, out)
}

/// Column means and standard deviations (1 where a column is constant).
fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    let std = (0..d)
        .map(|j| {
            let var = (0..n).map(|i| (x.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let j = k % d;
        *v = (*v - mean[j]) / std[j];
    }
    out
}

/// Single-model membership inference: a binary classifier on the target's
/// posteriors separating `members` from `nonmembers`; returns its mean
/// membership probability over `d_f`. The larger side is subsampled to
/// balance the two classes, and features are z-scored with the training
/// statistics.
pub fn classic_mia_prob(
    target: &ModelParams,
    members: &Dataset,
    nonmembers: &Dataset,
    d_f: &Dataset,
    opts: &AttackOptions,
    seed: u64,
) -> Result<f64> {
    let k = members.len().min(nonmembers.len());
    let mut r = rng::stream(seed, "classic-mia");
    let pick = |d: &Dataset, r: &mut rng::StreamRng| -> Result<Dataset> {
        let mut idx = index::sample(r, d.len(), k).into_vec();
        idx.sort_unstable();
        d.subset(&idx)
    };
    let mem = pick(members, &mut r)?;
    let non = pick(nonmembers, &mut r)?;
    let mut data = classic_features(target, &mem)?.into_data();
    data.extend(classic_features(target, &non)?.into_data());
    let width = 2 * target.architecture().classes + 1;
    let raw = Tensor::matrix(2 * k, width, data)?;
    let (mean, std) = column_stats(&raw);
    let labels: Vec<usize> = std::iter::repeat_n(1, k).chain(std::iter::repeat_n(0, k)).collect();
    let set = Dataset::new(standardize(&raw, &mean, &std), labels, 2)?;

    let arch = MlpArchitecture::new(width, opts.attack_hidden.clone(), 2)?;
    let init = init_model(&arch, rng::derive_seed(seed, "classic-init"))?;
    let cfg = TrainConfig {
        seed: rng::derive_seed(seed, "classic-shuffle"),
        ..opts.attack_train.clone()
    };
    let (clf, _) = train(&init, &set, &cfg)?;
    let query = standardize(&classic_features(target, d_f)?, &mean, &std);
    let p = clf.predict_proba(&query)?;
    Ok((0..p.rows()).map(|i| p.row(i)[1]).sum::<f64>() / p.rows() as f64)
}
