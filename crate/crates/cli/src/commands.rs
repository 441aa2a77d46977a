use std::path::{Path, PathBuf};

use gameunlearn::attack::AttackModel;
use gameunlearn::datasets::SplitBundle;
use gameunlearn::error::{Error, Result};
use gameunlearn::eval::{self, Scored};
use gameunlearn::io::write_atomic;
use gameunlearn::models::{accuracy, load_checkpoint, save_checkpoint, CheckpointKind, ModelParams};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const ORIGINAL: &str = "original.ckpt";
pub const ATTACK: &str = "attack.ckpt";
pub const ALTERNATIVE: &str = "alternative.ckpt";
pub const UNLEARNED: &str = "unlearned.ckpt";
pub const TRACE: &str = "trace.csv";
pub const SUMMARY: &str = "summary.json";
pub const REPORT: &str = "report.json";
pub const SWEEP: &str = "sweep.csv";

/// Written by `unlearn`; `evaluate` reads the game time back from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnSummary {
    pub converged: bool,
    pub rounds_used: usize,
    pub time_ours_s: f64,
    pub final_loss_l: f64,
    pub final_loss_f: f64,
    pub final_priaa: f64,
    pub lambda: f64,
    pub seed: u64,
    pub request: String,
}

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn load_model(path: &Path, kind: CheckpointKind) -> Result<ModelParams> {
    let ck = load_checkpoint(path)?;
    if ck.kind != kind {
        return Err(Error::Checkpoint(format!("{}: expected a {kind:?} checkpoint, found {:?}", path.display(), ck.kind)));
    }
    Ok(ck.model)
}

/// Loads a classifier and checks it was built for this experiment's data and
/// architecture.
fn load_classifier(ctx: &Ctx, path: &Path, bundle: &SplitBundle) -> Result<ModelParams> {
    let m = load_model(path, CheckpointKind::Classifier)?;
    let want = ctx.cfg.pipeline().architecture(&bundle.d_train)?;
    if m.architecture() != &want {
        return Err(Error::Config(format!(
            "{} has architecture {:?}, config expects {:?}",
            path.display(),
            m.architecture(),
            want
        )));
    }
    Ok(m)
}

fn load_attack(path: &Path, bundle: &SplitBundle) -> Result<AttackModel> {
    let m = AttackModel::new(load_model(path, CheckpointKind::Attack)?)?;
    if m.target_classes() != bundle.d_train.classes() {
        return Err(Error::Config(format!(
            "{} attacks {}-class models, data has {} classes",
            path.display(),
            m.target_classes(),
            bundle.d_train.classes()
        )));
    }
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let bundle = ctx.cfg.bundle()?;
    let m_o = eval::train_original(&bundle, &ctx.cfg.pipeline())?;
    let train_acc = accuracy(&m_o, &bundle.d_train)?;
    let test_acc = accuracy(&m_o, &bundle.d_test)?;
    let path = ctx.path(ORIGINAL);
    save_checkpoint(&path, &m_o, CheckpointKind::Classifier)?;
    println!("train_acc={train_acc:.4} test_acc={test_acc:.4} checkpoint={}", path.display());
    Ok(())
}

pub fn attack_train(ctx: &Ctx, model: Option<&Path>) -> Result<()> {
    let bundle = ctx.cfg.bundle()?;
    let m_o = load_classifier(ctx, &model.map_or_else(|| ctx.path(ORIGINAL), Path::to_path_buf), &bundle)?;
    let (m_a, val_acc) = eval::train_attack_model(&bundle, &m_o, &ctx.cfg.pipeline())?;
    let path = ctx.path(ATTACK);
    save_checkpoint(&path, m_a.params(), CheckpointKind::Attack)?;
    println!("attack_val_acc={val_acc:.4} checkpoint={}", path.display());
    Ok(())
}

pub fn unlearn(ctx: &Ctx, model: Option<&Path>, attack: Option<&Path>) -> Result<()> {
    let bundle = ctx.cfg.bundle()?;
    let m_o = load_classifier(ctx, &model.map_or_else(|| ctx.path(ORIGINAL), Path::to_path_buf), &bundle)?;
    let m_a = load_attack(&attack.map_or_else(|| ctx.path(ATTACK), Path::to_path_buf), &bundle)?;
    let pipe = ctx.cfg.pipeline();
    let m_alt = eval::train_alternative(&bundle, &pipe)?;
    let (eq, time_ours_s) = eval::run_game(&bundle, &m_o, &m_alt, &m_a, &pipe.game_config())?;

    let last = eq.trace.rounds.last().expect("at least one round");
    let summary = UnlearnSummary {
        converged: eq.converged,
        rounds_used: eq.rounds_used,
        time_ours_s,
        final_loss_l: last.loss_l,
        final_loss_f: last.loss_f,
        final_priaa: last.priaa,
        lambda: pipe.game.lambda,
        seed: ctx.cfg.seed,
        request: bundle.request.descriptor(),
    };
    save_checkpoint(&ctx.path(ALTERNATIVE), &m_alt, CheckpointKind::Classifier)?;
    save_checkpoint(&ctx.path(UNLEARNED), &eq.model, CheckpointKind::Classifier)?;
    write_atomic(&ctx.path(TRACE), eq.trace.to_csv().as_bytes())?;
    write_json(&ctx.path(SUMMARY), &summary)?;
    println!(
        "converged={} rounds={} priaa={:.4} time_s={:.3}",
        eq.converged, eq.rounds_used, last.priaa, time_ours_s
    );
    Ok(())
}

pub fn evaluate(ctx: &Ctx, with_retrain: bool) -> Result<()> {
    let bundle = ctx.cfg.bundle()?;
    let m_o = load_classifier(ctx, &ctx.path(ORIGINAL), &bundle)?;
    let m_a = load_attack(&ctx.path(ATTACK), &bundle)?;
    let m_u = load_classifier(ctx, &ctx.path(UNLEARNED), &bundle)?;
    let summary_path = ctx.path(SUMMARY);
    let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::Io {
        path: summary_path.clone(),
        source: e,
    })?;
    let summary: UnlearnSummary =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", summary_path.display())))?;

    let pipe = ctx.cfg.pipeline();
    let retrained = if with_retrain { Some(eval::retrain(&bundle, &pipe)?) } else { None };
    let scores = eval::score(
        &bundle,
        &Scored {
            original: &m_o,
            unlearned: &m_u,
            retrained: retrained.as_ref().map(|r| &r.0),
            attack: &m_a,
            time_ours_s: summary.time_ours_s,
            time_retrain_s: retrained.as_ref().map(|r| r.1),
        },
        &pipe,
    )?;
    let r = &scores.report;
    write_json(&ctx.path(REPORT), r)?;
    println!(
        "acc_test={:.4} acc_df={:.4} acc_dr={:.4} priaa_ours={:.4}",
        r.acc_test, r.acc_df, r.acc_dr, r.priaa_ours
    );
    Ok(())
}

pub fn sweep_lambda(ctx: &Ctx, jobs: usize) -> Result<()> {
    let lambdas = ctx.cfg.sweep_lambdas()?;
    let bundle = ctx.cfg.bundle()?;
    let result = eval::lambda_sweep(&bundle, &ctx.cfg.pipeline(), &lambdas, jobs)?;
    write_atomic(&ctx.path(SWEEP), result.to_csv().as_bytes())?;
    for (l, p) in &result.points {
        println!("lambda={l} priaa={p:.4}");
    }
    Ok(())
}
