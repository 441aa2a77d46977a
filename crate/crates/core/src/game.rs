//! Stackelberg game between the unlearning module (leader) and the privacy
//! module (follower).
//!
//! Both players move the same parameter vector `ω_u`. The leader descends
//!
//! ```text
//! Loss_L = mean_{x ∈ D_third} ‖M_u(x) − M_r′(x)‖₂  +  CE(M_u, D_r)
//! ```
//!
//! and the follower then descends
//!
//! ```text
//! Loss_F = smooth_abs(mean_{x ∈ D_f} M_A(M_o(x), M_u(x)) − λ)
//! ```
//!
//! with `M_A` frozen. Rounds repeat until both losses stop moving.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_prob_on_tape, AttackModel};
use crate::datasets::{Dataset, SplitBundle};
use crate::error::{Error, Result};
use crate::models::{cross_entropy, BoundModel, ModelParams};
use crate::numcore::{descend, Tape, Tensor, Var};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    /// Target attack probability on the forget set.
    pub lambda: f64,
    pub lr_leader: f64,
    pub lr_follower: f64,
    pub epochs_leader: usize,
    pub epochs_follower: usize,
    /// Upper bound on outer rounds.
    pub rounds: usize,
    /// Convergence tolerance on round-to-round loss changes.
    pub tol: f64,
    /// Number of consecutive sub-`tol` changes required.
    pub window: usize,
    pub smooth_eps: f64,
    /// Mini-batch size for the leader's `D_r` and `D_third` terms; `None`
    /// means full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            lambda: 0.5,
            lr_leader: 0.05,
            lr_follower: 0.01,
            epochs_leader: 5,
            epochs_follower: 5,
            rounds: 100,
            tol: 1e-4,
            window: 5,
            smooth_eps: 1e-6,
            batch_size: None,
            seed: 0,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda must be in (0, 1), got {}", self.lambda)));
        }
        for (name, v) in [("lr_leader", self.lr_leader), ("lr_follower", self.lr_follower)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be ≥ 1".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be ≥ 1".into()));
        }
        if !(self.smooth_eps > 0.0 && self.smooth_eps.is_finite()) {
            return Err(Error::Config(format!("smooth_eps must be positive, got {}", self.smooth_eps)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Leader loss with its two components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeaderLoss {
    pub total: f64,
    pub dis: f64,
    pub error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FollowerLoss {
    pub loss: f64,
    pub attack_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub loss_l: f64,
    pub dis_term: f64,
    pub error_term: f64,
    pub loss_f: f64,
    /// `|attack_prob − 0.5|` after the round.
    pub priaa: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GameTrace {
    pub rounds: Vec<RoundRecord>,
}

impl GameTrace {
    pub const CSV_HEADER: &'static str = "round,loss_L,dis_term,error_term,loss_F,priaa";

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rounds {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round, r.loss_l, r.dis_term, r.error_term, r.loss_f, r.priaa
            ));
        }
        s
    }

    /// True when the last `window` round-to-round changes of both losses
    /// are below `tol`.
    pub fn is_stable(&self, window: usize, tol: f64) -> bool {
        let n = self.rounds.len();
        if n < window + 1 {
            return false;
        }
        self.rounds[n - window - 1..].windows(2).all(|w| {
            (w[1].loss_l - w[0].loss_l).abs() < tol && (w[1].loss_f - w[0].loss_f).abs() < tol
        })
    }
}

#[derive(Clone, Debug)]
pub struct EquilibriumResult {
    /// Final unlearned parameters (the follower's last move).
    pub model: ModelParams,
    pub trace: GameTrace,
    pub converged: bool,
    pub rounds_used: usize,
}

/// Non-finite values surfacing inside a step are reported as divergence of
/// that step's loss.
fn diverged<T>(r: Result<T>, round: usize, component: &'static str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(_) => Error::Divergence { round, component },
        other => other,
    })
}

fn non_empty(d: &Dataset, what: &str) -> Result<()> {
    if d.is_empty() {
        Err(Error::Data(format!("{what} is empty")))
    } else {
        Ok(())
    }
}

/// Everything that stays fixed while the game runs.
pub struct Game<'a> {
    cfg: GameConfig,
    attack: &'a AttackModel,
    third_x: Tensor,
    alt_probs: Tensor,
    retain_x: Tensor,
    retain_y: Tensor,
    forget_x: Tensor,
    original_probs: Tensor,
}

impl<'a> Game<'a> {
    pub fn new(
        m_o: &ModelParams,
        m_r_alt: &ModelParams,
        m_a: &'a AttackModel,
        d_third: &Dataset,
        d_r: &Dataset,
        d_f: &Dataset,
        cfg: GameConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        non_empty(d_third, "third-party set")?;
        non_empty(d_r, "retain set")?;
        non_empty(d_f, "forget set")?;
        if m_a.target_classes() != m_o.architecture().classes {
            return Err(Error::Config(format!(
                "attack model expects {} classes, target has {}",
                m_a.target_classes(),
                m_o.architecture().classes
            )));
        }
        Ok(Game {
            attack: m_a,
            third_x: d_third.features().clone(),
            alt_probs: m_r_alt.predict_proba(d_third.features())?,
            retain_x: d_r.features().clone(),
            retain_y: d_r.one_hot(),
            forget_x: d_f.features().clone(),
            original_probs: m_o.predict_proba(d_f.features())?,
            cfg,
        })
    }

    pub fn from_bundle(
        m_o: &ModelParams,
        m_r_alt: &ModelParams,
        m_a: &'a AttackModel,
        bundle: &SplitBundle,
        cfg: GameConfig,
    ) -> Result<Self> {
        Game::new(m_o, m_r_alt, m_a, &bundle.d_third, &bundle.d_r, &bundle.d_f, cfg)
    }

    pub fn config(&self) -> &GameConfig {
        &self.cfg
    }

    /// Row indices for one leader epoch; `None` is the full set.
    fn batch(&self, n: usize, stream: &str, step: u64) -> Option<Vec<usize>> {
        let b = self.cfg.batch_size?;
        if b >= n {
            return None;
        }
        let mut r = rng::seeded(rng::derive_indexed(self.cfg.seed, stream, step));
        let mut idx = index::sample(&mut r, n, b).into_vec();
        idx.sort_unstable();
        Some(idx)
    }

    fn leader_graph(
        &self,
        tape: &mut Tape,
        u: &BoundModel,
        step: Option<u64>,
    ) -> Result<(Var, Var, Var)> {
        let pick = |x: &Tensor, idx: &Option<Vec<usize>>| match idx {
            Some(i) => x.select_rows(i),
            None => x.clone(),
        };
        let third_idx = step.and_then(|s| self.batch(self.third_x.rows(), "game-third", s));
        let retain_idx = step.and_then(|s| self.batch(self.retain_x.rows(), "game-retain", s));

        let tx = tape.constant(pick(&self.third_x, &third_idx));
        let alt = tape.constant(pick(&self.alt_probs, &third_idx));
        let pu = u.probs(tape, tx)?;
        let diff = tape.sub(pu, alt)?;
        let sq = tape.square(diff)?;
        let per_sample = tape.sum_rows(sq)?;
        let dist = tape.sqrt(per_sample)?;
        let dis = tape.mean(dist)?;

        let rx = tape.constant(pick(&self.retain_x, &retain_idx));
        let ry = tape.constant(pick(&self.retain_y, &retain_idx));
        let pr = u.probs(tape, rx)?;
        let err = cross_entropy(tape, pr, ry)?;
        let total = tape.add(dis, err)?;
        Ok((total, dis, err))
    }

    fn follower_graph(&self, tape: &mut Tape, u: &BoundModel, lambda: f64) -> Result<(Var, Var)> {
        let a = self.attack.bind_frozen(tape);
        let fx = tape.constant(self.forget_x.clone());
        let po = tape.constant(self.original_probs.clone());
        let pu = u.probs(tape, fx)?;
        let p = attack_prob_on_tape(tape, &a, po, pu)?;
        let shifted = tape.add_scalar(p, -lambda)?;
        let loss = tape.smooth_abs(shifted, self.cfg.smooth_eps)?;
        Ok((loss, p))
    }

    /// Leader loss at `m_u`; full batch unless `step` selects a mini-batch.
    fn eval_leader(&self, m_u: &ModelParams, step: Option<u64>) -> Result<LeaderLoss> {
        let mut tape = Tape::new();
        let u = m_u.bind_frozen(&mut tape);
        let (total, dis, err) = self.leader_graph(&mut tape, &u, step)?;
        Ok(LeaderLoss {
            total: tape.value(total)?.item()?,
            dis: tape.value(dis)?.item()?,
            error: tape.value(err)?.item()?,
        })
    }

    pub fn leader_loss(&self, m_u: &ModelParams) -> Result<LeaderLoss> {
        self.eval_leader(m_u, None)
    }

    pub fn follower_loss(&self, m_u: &ModelParams) -> Result<FollowerLoss> {
        let mut tape = Tape::new();
        let u = m_u.bind_frozen(&mut tape);
        let (loss, p) = self.follower_graph(&mut tape, &u, self.cfg.lambda)?;
        Ok(FollowerLoss {
            loss: tape.value(loss)?.item()?,
            attack_prob: tape.value(p)?.item()?,
        })
    }

    /// Gradient of the leader loss with respect to `m_u`'s tensors.
    pub fn leader_grad(&self, m_u: &ModelParams) -> Result<(LeaderLoss, Vec<Tensor>)> {
        self.leader_grad_at(m_u, None)
    }

    fn leader_grad_at(&self, m_u: &ModelParams, step: Option<u64>) -> Result<(LeaderLoss, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let u = m_u.bind(&mut tape);
        let (total, dis, err) = self.leader_graph(&mut tape, &u, step)?;
        let loss = LeaderLoss {
            total: tape.value(total)?.item()?,
            dis: tape.value(dis)?.item()?,
            error: tape.value(err)?.item()?,
        };
        Ok((loss, tape.backward(total)?.into_vec()))
    }

    pub fn follower_grad(&self, m_u: &ModelParams) -> Result<(FollowerLoss, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let u = m_u.bind(&mut tape);
        let (loss, p) = self.follower_graph(&mut tape, &u, self.cfg.lambda)?;
        let out = FollowerLoss {
            loss: tape.value(loss)?.item()?,
            attack_prob: tape.value(p)?.item()?,
        };
        Ok((out, tape.backward(loss)?.into_vec()))
    }

    /// `epochs_leader` descent steps on `Loss_L`; returns the new parameters
    /// and `Loss_L` evaluated there (on the last epoch's batch when
    /// mini-batching).
    pub fn leader_step(&self, m_u: &ModelParams, round: usize) -> Result<(ModelParams, LeaderLoss)> {
        let mut params = m_u.tensors();
        let mut current = m_u.clone();
        let mut last_step = None;
        for e in 0..self.cfg.epochs_leader {
            let step = self
                .cfg
                .batch_size
                .map(|_| (round * self.cfg.epochs_leader + e) as u64);
            let (loss, grads) = diverged(self.leader_grad_at(&current, step), round, "loss_L")?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    round,
                    component: "loss_L",
                });
            }
            descend(&mut params, &grads, self.cfg.lr_leader)?;
            current = m_u.with_tensors(params.clone())?;
            last_step = step;
        }
        let loss = diverged(self.eval_leader(&current, last_step), round, "loss_L")?;
        if !loss.total.is_finite() || !current.is_finite() {
            return Err(Error::Divergence {
                round,
                component: "loss_L",
            });
        }
        Ok((current, loss))
    }

    /// `epochs_follower` descent steps on `Loss_F` with `M_A` frozen.
    pub fn follower_step(&self, m_u: &ModelParams, round: usize) -> Result<(ModelParams, FollowerLoss)> {
        let mut params = m_u.tensors();
        let mut current = m_u.clone();
        for _ in 0..self.cfg.epochs_follower {
            let (loss, grads) = diverged(self.follower_grad(&current), round, "loss_F")?;
            if !loss.loss.is_finite() {
                return Err(Error::Divergence {
                    round,
                    component: "loss_F",
                });
            }
            descend(&mut params, &grads, self.cfg.lr_follower)?;
            current = m_u.with_tensors(params.clone())?;
        }
        let loss = diverged(self.follower_loss(&current), round, "loss_F")?;
        if !loss.loss.is_finite() || !current.is_finite() {
            return Err(Error::Divergence {
                round,
                component: "loss_F",
            });
        }
        Ok((current, loss))
    }

    /// Alternates leader and follower moves starting from `ω_o`.
    pub fn play(&self, omega_o: &ModelParams) -> Result<EquilibriumResult> {
        let mut m_u = omega_o.clone();
        let mut trace = GameTrace::default();
        let mut converged = false;
        for round in 1..=self.cfg.rounds {
            let (after_leader, l) = self.leader_step(&m_u, round)?;
            let (after_follower, f) = self.follower_step(&after_leader, round)?;
            m_u = after_follower;
            trace.rounds.push(RoundRecord {
                round,
                loss_l: l.total,
                dis_term: l.dis,
                error_term: l.error,
                loss_f: f.loss,
                priaa: (f.attack_prob - 0.5).abs(),
            });
            if trace.is_stable(self.cfg.window, self.cfg.tol) {
                converged = true;
                break;
            }
        }
        Ok(EquilibriumResult {
            model: m_u,
            rounds_used: trace.len(),
            trace,
            converged,
        })
    }
}

/// `Loss_L` of `m_u` against the alternative model, full batch.
pub fn loss_l(m_u: &ModelParams, m_r_alt: &ModelParams, d_third: &Dataset, d_r: &Dataset) -> Result<LeaderLoss> {
    non_empty(d_third, "third-party set")?;
    non_empty(d_r, "retain set")?;
    let mut tape = Tape::new();
    let u = m_u.bind_frozen(&mut tape);
    let tx = tape.constant(d_third.features().clone());
    let alt = tape.constant(m_r_alt.predict_proba(d_third.features())?);
    let pu = u.probs(&mut tape, tx)?;
    let diff = tape.sub(pu, alt)?;
    let sq = tape.square(diff)?;
    let per_sample = tape.sum_rows(sq)?;
    let dist = tape.sqrt(per_sample)?;
    let dis = tape.mean(dist)?;
    let rx = tape.constant(d_r.features().clone());
    let ry = tape.constant(d_r.one_hot());
    let pr = u.probs(&mut tape, rx)?;
    let err = cross_entropy(&mut tape, pr, ry)?;
    let (dis, error) = (tape.value(dis)?.item()?, tape.value(err)?.item()?);
    Ok(LeaderLoss {
        total: dis + error,
        dis,
        error,
    })
}

/// `Loss_F = smooth_abs(attack_prob − λ, ε)`.
pub fn loss_f(
    m_a: &AttackModel,
    m_o: &ModelParams,
    m_u: &ModelParams,
    d_f: &Dataset,
    lambda: f64,
    smooth_eps: f64,
) -> Result<f64> {
    let p = crate::attack::attack_prob(m_a, m_o, m_u, d_f)?;
    if smooth_eps <= 0.0 {
        return Err(Error::Config(format!("smooth_eps must be positive, got {smooth_eps}")));
    }
    Ok(crate::numcore::smooth_abs(p - lambda, smooth_eps))
}

/// Runs the whole game for `bundle`.
pub fn play(
    omega_o: &ModelParams,
    bundle: &SplitBundle,
    m_r_alt: &ModelParams,
    m_a: &AttackModel,
    cfg: &GameConfig,
) -> Result<EquilibriumResult> {
    Game::from_bundle(omega_o, m_r_alt, m_a, bundle, cfg.clone())?.play(omega_o)
}

#[cfg(test)]
mod tests;
