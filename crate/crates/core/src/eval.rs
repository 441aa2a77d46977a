//! End-to-end evaluation: trains every model the protocol needs, plays the
//! game and scores the outcome.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_prob, classic_mia_prob, train_attack, AttackModel, AttackOptions, ShadowConfig};
use crate::datasets::{Dataset, SplitBundle};
use crate::error::{Error, Result, StageExt};
use crate::game::{EquilibriumResult, Game, GameConfig};
use crate::models::{accuracy, init_model, train, MlpArchitecture, ModelParams, TrainConfig};
use crate::rng;

/// Privacy attack advantage: distance of an attack probability from a coin
/// flip.
pub fn priaa(attack_prob: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&attack_prob) {
        return Err(Error::Data(format!("attack probability {attack_prob} outside [0, 1]")));
    }
    Ok((attack_prob - 0.5).abs())
}

/// Accuracy on rows labelled `class_id` and on all other rows.
pub fn per_class_accuracy(model: &ModelParams, test: &Dataset, class_id: usize) -> Result<(f64, f64)> {
    let pred = model.predict(test)?;
    let (mut hit_in, mut n_in, mut hit_out, mut n_out) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(test.labels()) {
        if y == class_id {
            n_in += 1;
            hit_in += usize::from(p == y);
        } else {
            n_out += 1;
            hit_out += usize::from(p == y);
        }
    }
    if n_in == 0 {
        return Err(Error::Data(format!("class {class_id} does not occur in the test set")));
    }
    let rest = if n_out == 0 { 0.0 } else { hit_out as f64 / n_out as f64 };
    Ok((hit_in as f64 / n_in as f64, rest))
}

/// Everything `evaluate_pipeline` needs besides the bundle. Seeds inside the
/// nested configs are ignored; each stage draws its own substream of `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Hidden widths of the target classifier.
    pub hidden: Vec<usize>,
    /// Used for `M_o`, `M_r` and `M_r′`.
    pub train: TrainConfig,
    pub shadow: ShadowConfig,
    pub attack: AttackOptions,
    pub game: GameConfig,
    pub with_retrain: bool,
    pub classic_mia: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hidden: vec![32],
            train: TrainConfig::default(),
            shadow: ShadowConfig::default(),
            attack: AttackOptions::default(),
            game: GameConfig::default(),
            with_retrain: true,
            classic_mia: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.shadow.validate()?;
        self.attack.shadow_train.validate()?;
        self.attack.attack_train.validate()?;
        self.game.validate()
    }

    pub fn architecture(&self, data: &Dataset) -> Result<MlpArchitecture> {
        MlpArchitecture::new(data.dims(), self.hidden.clone(), data.classes())
    }

    fn train_cfg(&self, stream: &str) -> TrainConfig {
        TrainConfig {
            seed: rng::derive_seed(self.seed, stream),
            ..self.train.clone()
        }
    }

    fn init_seed(&self) -> u64 {
        rng::derive_seed(self.seed, "model-init")
    }

    pub fn shadow_config(&self) -> ShadowConfig {
        ShadowConfig {
            seed: rng::derive_seed(self.seed, "shadow"),
            ..self.shadow.clone()
        }
    }

    pub fn game_config(&self) -> GameConfig {
        GameConfig {
            seed: rng::derive_seed(self.seed, "game"),
            ..self.game.clone()
        }
    }
}

/// The JSON report. Fields that need the retrain baseline or the classic
/// attack are `null` when those stages were skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_test: f64,
    pub acc_df: f64,
    pub acc_dr: f64,
    pub priaa_ours: f64,
    pub priaa_retrain: Option<f64>,
    pub mia_original: Option<f64>,
    pub mia_retrain: Option<f64>,
    pub mia_ours: Option<f64>,
    pub time_retrain_s: Option<f64>,
    pub time_ours_s: f64,
    pub speedup: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub request: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// The report plus the artefacts behind it.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub report: EvalReport,
    pub original: ModelParams,
    pub retrained: Option<ModelParams>,
    pub alternative: ModelParams,
    pub attack: AttackModel,
    pub attack_validation_accuracy: f64,
    pub equilibrium: EquilibriumResult,
    /// `M_A`'s mean output on `D_f` for the unlearned model.
    pub attack_prob_ours: f64,
    pub attack_prob_retrain: Option<f64>,
    pub acc_test_original: f64,
    pub acc_test_retrain: Option<f64>,
}

impl PipelineOutcome {
    pub fn unlearned(&self) -> &ModelParams {
        &self.equilibrium.model
    }
}

/// Trains a fresh classifier on `data` with the pipeline's init and the
/// training substream `stream`.
pub fn train_classifier(data: &Dataset, cfg: &PipelineConfig, stream: &str) -> Result<ModelParams> {
    let init = init_model(&cfg.architecture(data)?, cfg.init_seed())?;
    Ok(train(&init, data, &cfg.train_cfg(stream))?.0)
}

pub fn train_original(bundle: &SplitBundle, cfg: &PipelineConfig) -> Result<ModelParams> {
    train_classifier(&bundle.d_train, cfg, "shuffle").stage("train original")
}

pub fn train_alternative(bundle: &SplitBundle, cfg: &PipelineConfig) -> Result<ModelParams> {
    train_classifier(&bundle.d_r_alt, cfg, "alt-shuffle").stage("train alternative")
}

/// Retrains from scratch on `D_r`, returning the model and elapsed seconds.
pub fn retrain(bundle: &SplitBundle, cfg: &PipelineConfig) -> Result<(ModelParams, f64)> {
    let t = Instant::now();
    let m = train_classifier(&bundle.d_r, cfg, "retrain-shuffle").stage("retrain")?;
    Ok((m, t.elapsed().as_secs_f64()))
}

/// The attacker's shadow data: the held-out test split, which is disjoint
/// from everything the target was trained on.
pub fn shadow_pool(bundle: &SplitBundle) -> &Dataset {
    &bundle.d_test
}

pub fn train_attack_model(bundle: &SplitBundle, m_o: &ModelParams, cfg: &PipelineConfig) -> Result<(AttackModel, f64)> {
    let t = train_attack(m_o, &cfg.shadow_config(), shadow_pool(bundle), &cfg.attack).stage("train attack")?;
    Ok((t.model, t.validation_accuracy))
}

/// Plays the game from `m_o`, returning the equilibrium and the time spent.
pub fn run_game(
    bundle: &SplitBundle,
    m_o: &ModelParams,
    m_r_alt: &ModelParams,
    m_a: &AttackModel,
    game: &GameConfig,
) -> Result<(EquilibriumResult, f64)> {
    let t = Instant::now();
    let eq = Game::from_bundle(m_o, m_r_alt, m_a, bundle, game.clone())
        .and_then(|g| g.play(m_o))
        .stage("game")?;
    Ok((eq, t.elapsed().as_secs_f64()))
}

/// Trained models going into the scoring step.
pub struct Scored<'a> {
    pub original: &'a ModelParams,
    pub unlearned: &'a ModelParams,
    pub retrained: Option<&'a ModelParams>,
    pub attack: &'a AttackModel,
    pub time_ours_s: f64,
    pub time_retrain_s: Option<f64>,
}

/// Scalars derived from a set of trained models; shared by the pipeline and
/// the CLI's `evaluate`.
#[derive(Clone, Debug)]
pub struct Scores {
    pub report: EvalReport,
    pub attack_prob_ours: f64,
    pub attack_prob_retrain: Option<f64>,
    pub acc_test_original: f64,
    pub acc_test_retrain: Option<f64>,
}

pub fn score(bundle: &SplitBundle, models: &Scored<'_>, cfg: &PipelineConfig) -> Result<Scores> {
    let eval = bundle.eval_set();
    let run = || -> Result<Scores> {
        let p_ours = attack_prob(models.attack, models.original, models.unlearned, &bundle.d_f)?;
        let p_retrain = models
            .retrained
            .map(|m| attack_prob(models.attack, models.original, m, &bundle.d_f))
            .transpose()?;
        let mia = |m: &ModelParams, tag: &str| {
            classic_mia_prob(m, &bundle.d_r, eval, &bundle.d_f, &cfg.attack, rng::derive_seed(cfg.seed, tag))
        };
        let (mia_original, mia_ours, mia_retrain) = if cfg.classic_mia {
            (
                Some(mia(models.original, "mia-original")?),
                Some(mia(models.unlearned, "mia-ours")?),
                models.retrained.map(|m| mia(m, "mia-retrain")).transpose()?,
            )
        } else {
            (None, None, None)
        };
        let speedup = models.time_retrain_s.map(|r| r / models.time_ours_s);
        Ok(Scores {
            report: EvalReport {
                acc_test: accuracy(models.unlearned, eval)?,
                acc_df: accuracy(models.unlearned, &bundle.d_f)?,
                acc_dr: accuracy(models.unlearned, &bundle.d_r)?,
                priaa_ours: priaa(p_ours)?,
                priaa_retrain: p_retrain.map(priaa).transpose()?,
                mia_original,
                mia_retrain,
                mia_ours,
                time_retrain_s: models.time_retrain_s,
                time_ours_s: models.time_ours_s,
                speedup,
                lambda: cfg.game.lambda,
                seed: cfg.seed,
                request: bundle.request.descriptor(),
            },
            attack_prob_ours: p_ours,
            attack_prob_retrain: p_retrain,
            acc_test_original: accuracy(models.original, eval)?,
            acc_test_retrain: models.retrained.map(|m| accuracy(m, eval)).transpose()?,
        })
    };
    run().stage("score")
}

/// Runs the full protocol on `bundle`.
pub fn evaluate_pipeline(bundle: &SplitBundle, cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate().stage("config")?;
    let original = train_original(bundle, cfg)?;
    let retrained = if cfg.with_retrain { Some(retrain(bundle, cfg)?) } else { None };
    let alternative = train_alternative(bundle, cfg)?;
    let (attack, attack_validation_accuracy) = train_attack_model(bundle, &original, cfg)?;
    let (equilibrium, time_ours_s) = run_game(bundle, &original, &alternative, &attack, &cfg.game_config())?;
    let scores = score(
        bundle,
        &Scored {
            original: &original,
            unlearned: &equilibrium.model,
            retrained: retrained.as_ref().map(|r| &r.0),
            attack: &attack,
            time_ours_s,
            time_retrain_s: retrained.as_ref().map(|r| r.1),
        },
        cfg,
    )?;
    Ok(PipelineOutcome {
        report: scores.report,
        original,
        retrained: retrained.map(|r| r.0),
        alternative,
        attack,
        attack_validation_accuracy,
        equilibrium,
        attack_prob_ours: scores.attack_prob_ours,
        attack_prob_retrain: scores.attack_prob_retrain,
        acc_test_original: scores.acc_test_original,
        acc_test_retrain: scores.acc_test_retrain,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSweepResult {
    /// `(λ, priaa)` with λ strictly increasing.
    pub points: Vec<(f64, f64)>,
}

impl LambdaSweepResult {
    pub const CSV_HEADER: &'static str = "lambda,priaa";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (l, p) in &self.points {
            s.push_str(&format!("{l},{p}\n"));
        }
        s
    }
}

/// Sorted copy of `lambdas`, rejecting empty lists, duplicates and values
/// outside (0, 1).
pub fn sweep_grid(lambdas: &[f64]) -> Result<Vec<f64>> {
    if lambdas.is_empty() {
        return Err(Error::Config("lambda list is empty".into()));
    }
    let mut out = lambdas.to_vec();
    if let Some(bad) = out.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::Config(format!("lambda {bad} outside (0, 1)")));
    }
    out.sort_by(f64::total_cmp);
    if let Some(w) = out.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate lambda {}", w[0])));
    }
    Ok(out)
}

/// Plays one game per λ against shared `M_o`, `M_r′` and `M_A`, using at
/// most `jobs` threads (0 means the rayon default).
pub fn lambda_sweep(bundle: &SplitBundle, cfg: &PipelineConfig, lambdas: &[f64], jobs: usize) -> Result<LambdaSweepResult> {
    cfg.validate().stage("config")?;
    let grid = sweep_grid(lambdas)?;
    let original = train_original(bundle, cfg)?;
    let alternative = train_alternative(bundle, cfg)?;
    let (attack, _) = train_attack_model(bundle, &original, cfg)?;
    let game = cfg.game_config();
    let point = |&lambda: &f64| -> Result<(f64, f64)> {
        let g = GameConfig { lambda, ..game.clone() };
        let (eq, _) = run_game(bundle, &original, &alternative, &attack, &g)?;
        let p = attack_prob(&attack, &original, &eq.model, &bundle.d_f).stage("score")?;
        Ok((lambda, priaa(p)?))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let points = pool.install(|| grid.par_iter().map(point).collect::<Result<Vec<_>>>())?;
    Ok(LambdaSweepResult { points })
}
