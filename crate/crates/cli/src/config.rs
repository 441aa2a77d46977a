//! Experiment configuration: one flat TOML file of documented keys, with
//! `--set key=value` overrides applied on top before anything is validated.

use std::path::{Path, PathBuf};

use gameunlearn::attack::{AttackOptions, ShadowConfig};
use gameunlearn::datasets::{load_csv, make_bundle, synth_generate, Dataset, SplitBundle, SynthSpec, UnlearnRequest};
use gameunlearn::error::{Error, Result};
use gameunlearn::eval::{sweep_grid, PipelineConfig};
use gameunlearn::game::GameConfig;
use gameunlearn::models::TrainConfig;
use gameunlearn::rng;
use serde::{Deserialize, Serialize};

/// Environment variable naming the output directory when neither the config
/// nor `--out` does.
pub const OUT_DIR_ENV: &str = "GAMEUNLEARN_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synth,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Sample,
    Class,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,

    pub dataset: Source,
    pub csv_path: Option<PathBuf>,
    pub csv_label_column: Option<String>,
    pub csv_classes: Option<usize>,
    /// Min-max scale CSV features to [0, 1] using the whole file.
    pub csv_scale: bool,
    pub synth_classes: usize,
    pub synth_dims: usize,
    pub synth_per_class: usize,
    pub synth_separation: f64,
    pub synth_label_noise: f64,

    pub test_fraction: f64,
    pub third_fraction: f64,
    pub alt_fraction: f64,

    pub hidden: Vec<usize>,
    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_lr: f64,
    pub train_momentum: f64,

    pub request: RequestKind,
    pub unlearn_rate: f64,
    pub unlearn_class: usize,

    pub lambda: f64,
    pub lr_leader: f64,
    pub lr_follower: f64,
    pub epochs_leader: usize,
    pub epochs_follower: usize,
    pub rounds: usize,
    pub tol: f64,
    pub window: usize,
    pub smooth_eps: f64,
    /// 0 means full batch.
    pub game_batch_size: usize,

    pub shadow_count: usize,
    pub shadow_unlearn_rate: f64,
    pub shadow_train_fraction: f64,
    pub attack_validation_fraction: f64,
    pub attack_hidden: Vec<usize>,
    pub attack_epochs: usize,
    pub attack_batch_size: usize,
    pub attack_lr: f64,
    pub attack_momentum: f64,

    pub classic_mia: bool,
    pub lambdas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let game = GameConfig::default();
        let shadow = ShadowConfig::default();
        let attack = AttackOptions::default();
        ExperimentConfig {
            seed: 0,
            output_dir: None,
            dataset: Source::Synth,
            csv_path: None,
            csv_label_column: None,
            csv_classes: None,
            csv_scale: true,
            synth_classes: 2,
            synth_dims: 20,
            synth_per_class: 500,
            synth_separation: 3.0,
            synth_label_noise: 0.0,
            test_fraction: 0.5,
            third_fraction: 0.5,
            alt_fraction: 0.2,
            hidden: vec![32],
            train_epochs: train.epochs,
            train_batch_size: train.batch_size,
            train_lr: train.lr,
            train_momentum: train.momentum,
            request: RequestKind::Sample,
            unlearn_rate: 0.05,
            unlearn_class: 0,
            lambda: game.lambda,
            lr_leader: game.lr_leader,
            lr_follower: game.lr_follower,
            epochs_leader: game.epochs_leader,
            epochs_follower: game.epochs_follower,
            rounds: game.rounds,
            tol: game.tol,
            window: game.window,
            smooth_eps: game.smooth_eps,
            game_batch_size: 0,
            shadow_count: shadow.shadow_count,
            shadow_unlearn_rate: shadow.shadow_unlearn_rate,
            shadow_train_fraction: shadow.shadow_train_fraction,
            attack_validation_fraction: shadow.validation_fraction,
            attack_hidden: attack.attack_hidden,
            attack_epochs: attack.attack_train.epochs,
            attack_batch_size: attack.attack_train.batch_size,
            attack_lr: attack.attack_train.lr,
            attack_momentum: attack.attack_train.momentum,
            classic_mia: true,
            lambdas: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

/// Parses `key=value`; the value is read as a TOML literal and falls back to
/// a bare string, so `--set csv_path=data/x.csv` works unquoted.
fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{raw}` has an empty key")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            table.insert(k, v);
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64, closed_hi: bool| {
            let ok = v > 0.0 && (v < 1.0 || (closed_hi && v == 1.0));
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} out of range: {v}")))
            }
        };
        match self.dataset {
            Source::Csv => {
                if self.csv_path.is_none() {
                    return Err(Error::Config("dataset = \"csv\" needs csv_path".into()));
                }
                if self.csv_classes.is_none_or(|c| c < 2) {
                    return Err(Error::Config("dataset = \"csv\" needs csv_classes ≥ 2".into()));
                }
            }
            Source::Synth => {
                if self.synth_classes < 2 || self.synth_per_class == 0 || self.synth_dims < self.synth_classes {
                    return Err(Error::Config(format!(
                        "synthetic data needs classes ≥ 2, per_class ≥ 1 and dims ≥ classes (got {}, {}, {})",
                        self.synth_classes, self.synth_per_class, self.synth_dims
                    )));
                }
                if !(self.synth_separation.is_finite() && self.synth_separation >= 0.0) {
                    return Err(Error::Config(format!("synth_separation must be ≥ 0, got {}", self.synth_separation)));
                }
                if !(0.0..=1.0).contains(&self.synth_label_noise) {
                    return Err(Error::Config(format!("synth_label_noise must be in [0, 1], got {}", self.synth_label_noise)));
                }
            }
        }
        frac("test_fraction", self.test_fraction, false)?;
        frac("third_fraction", self.third_fraction, true)?;
        frac("alt_fraction", self.alt_fraction, true)?;
        if self.hidden.contains(&0) || self.attack_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be ≥ 1".into()));
        }
        match self.request {
            RequestKind::Sample => frac("unlearn_rate", self.unlearn_rate, false)?,
            RequestKind::Class => {
                let classes = match self.dataset {
                    Source::Synth => Some(self.synth_classes),
                    Source::Csv => self.csv_classes,
                };
                if classes.is_some_and(|c| self.unlearn_class >= c) {
                    return Err(Error::Config(format!("unlearn_class {} out of range", self.unlearn_class)));
                }
            }
        }
        self.pipeline().validate()?;
        Ok(())
    }

    /// Lambda grid for `sweep-lambda`, sorted and checked.
    pub fn sweep_lambdas(&self) -> Result<Vec<f64>> {
        sweep_grid(&self.lambdas)
    }

    pub fn request(&self) -> UnlearnRequest {
        let seed = rng::derive_seed(self.seed, "request");
        match self.request {
            RequestKind::Sample => UnlearnRequest::sample_level(self.unlearn_rate, seed),
            RequestKind::Class => UnlearnRequest::class_level(self.unlearn_class, seed),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let train = TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            lr: self.train_lr,
            momentum: self.train_momentum,
            seed: 0,
        };
        PipelineConfig {
            hidden: self.hidden.clone(),
            train: train.clone(),
            shadow: ShadowConfig {
                shadow_count: self.shadow_count,
                shadow_unlearn_rate: self.shadow_unlearn_rate,
                shadow_train_fraction: self.shadow_train_fraction,
                validation_fraction: self.attack_validation_fraction,
                seed: 0,
            },
            attack: AttackOptions {
                shadow_train: train,
                attack_hidden: self.attack_hidden.clone(),
                attack_train: TrainConfig {
                    epochs: self.attack_epochs,
                    batch_size: self.attack_batch_size,
                    lr: self.attack_lr,
                    momentum: self.attack_momentum,
                    seed: 0,
                },
            },
            game: GameConfig {
                lambda: self.lambda,
                lr_leader: self.lr_leader,
                lr_follower: self.lr_follower,
                epochs_leader: self.epochs_leader,
                epochs_follower: self.epochs_follower,
                rounds: self.rounds,
                tol: self.tol,
                window: self.window,
                smooth_eps: self.smooth_eps,
                batch_size: (self.game_batch_size > 0).then_some(self.game_batch_size),
                seed: 0,
            },
            with_retrain: false,
            classic_mia: self.classic_mia,
            seed: self.seed,
        }
    }

    /// Loads or generates the full dataset.
    pub fn load_data(&self) -> Result<Dataset> {
        match self.dataset {
            Source::Synth => synth_generate(&SynthSpec {
                classes: self.synth_classes,
                dims: self.synth_dims,
                per_class: self.synth_per_class,
                separation: self.synth_separation,
                seed: rng::derive_seed(self.seed, "synth"),
                label_noise: self.synth_label_noise,
            }),
            Source::Csv => {
                let path = self.csv_path.as_deref().expect("validated");
                let data = load_csv(path, self.csv_label_column.as_deref(), self.csv_classes.expect("validated"))?;
                Ok(if self.csv_scale { data.min_max_scaled() } else { data })
            }
        }
    }

    /// Every stage rebuilds the same bundle from the same seed.
    pub fn bundle(&self) -> Result<SplitBundle> {
        let data = self.load_data()?;
        let (train, test) = data.split(self.test_fraction, rng::derive_seed(self.seed, "split"))?;
        make_bundle(&train, &test, self.request(), self.alt_fraction, self.third_fraction)
    }

    /// `--out` beats `output_dir`, which beats the environment, which beats `./out`.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn example_file_spells_out_the_defaults() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("experiment.example.toml");
        assert_eq!(ExperimentConfig::load(Some(&p), &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_parse_as_toml_with_string_fallback() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "rounds=3".into(),
                "hidden=[8, 4]".into(),
                "dataset=csv".into(),
                "csv_path=data/x.csv".into(),
                "csv_classes=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert_eq!(cfg.dataset, Source::Csv);
        assert_eq!(cfg.csv_path.as_deref(), Some(Path::new("data/x.csv")));
    }

    #[test]
    fn file_values_are_overridden() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        std::fs::write(&p, "seed = 4\nlambda = 0.3\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&p), &["lambda=0.7".into()]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.lambda, 0.7);
        assert_eq!(cfg.pipeline().game.lambda, 0.7);
    }

    #[test]
    fn bad_configs_are_rejected_up_front() {
        for bad in [
            "unknown_key=1",
            "lambda=1.5",
            "rounds=0",
            "unlearn_rate=0",
            "dataset=csv",
            "hidden=[0]",
            "synth_dims=1",
            "train_batch_size=0",
            "request=class",
        ] {
            let mut sets = vec![bad.to_string()];
            if bad == "request=class" {
                sets.push("unlearn_class=2".into());
            }
            let err = ExperimentConfig::load(None, &sets).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
        assert!(ExperimentConfig::load(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn bundle_is_reproducible() {
        let cfg = ExperimentConfig::load(None, &["synth_per_class=50".into()]).unwrap();
        let a = cfg.bundle().unwrap();
        let b = cfg.bundle().unwrap();
        assert_eq!(a.forget_idx, b.forget_idx);
        assert_eq!(a.d_train.features(), b.d_train.features());
    }

    #[test]
    fn out_dir_precedence() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolve_out_dir(Some(Path::new("a"))), PathBuf::from("a"));
        cfg.output_dir = Some("b".into());
        assert_eq!(cfg.resolve_out_dir(None), PathBuf::from("b"));
    }
}
