use super::*;
use crate::attack::attack_prob;
use crate::datasets::{make_bundle, synth_generate, SynthSpec, UnlearnRequest};
use crate::models::{init_model, train, Layer, MlpArchitecture, TrainConfig};

fn blobs(classes: usize, dims: usize, per_class: usize, seed: u64) -> Dataset {
    synth_generate(&SynthSpec {
        classes,
        dims,
        per_class,
        separation: 2.5,
        seed,
        label_noise: 0.0,
    })
    .unwrap()
}

struct Fixture {
    bundle: SplitBundle,
    m_o: ModelParams,
    m_alt: ModelParams,
    m_a: AttackModel,
}

/// Small trained instance; the attack model is a random (untrained) MLP,
/// which is enough to exercise gradients through a frozen `M_A`.
fn fixture(seed: u64) -> Fixture {
    let all = blobs(3, 4, 40, seed);
    let (train_set, test) = all.split(0.4, seed).unwrap();
    let bundle = make_bundle(&train_set, &test, UnlearnRequest::sample_level(0.1, seed), 0.2, 0.5).unwrap();
    let arch = MlpArchitecture::new(4, vec![8], 3).unwrap();
    let init = init_model(&arch, seed).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        seed,
        ..TrainConfig::default()
    };
    let (m_o, _) = train(&init, &bundle.d_train, &cfg).unwrap();
    let (m_alt, _) = train(&init, &bundle.d_r_alt, &cfg).unwrap();
    let a_arch = MlpArchitecture::new(6, vec![8], 2).unwrap();
    let m_a = AttackModel::new(init_model(&a_arch, seed + 100).unwrap()).unwrap();
    Fixture { bundle, m_o, m_alt, m_a }
}

fn config() -> GameConfig {
    GameConfig {
        lr_leader: 0.05,
        lr_follower: 0.05,
        epochs_leader: 2,
        epochs_follower: 2,
        rounds: 6,
        ..GameConfig::default()
    }
}

fn game(f: &Fixture, cfg: GameConfig) -> Game<'_> {
    Game::from_bundle(&f.m_o, &f.m_alt, &f.m_a, &f.bundle, cfg).unwrap()
}

/// Linear 2×2 softmax model `x ↦ softmax(x·W)`.
fn linear(w: [f64; 4]) -> ModelParams {
    let arch = MlpArchitecture::new(2, vec![], 2).unwrap();
    ModelParams::from_layers(
        arch,
        vec![Layer {
            weight: Tensor::matrix(2, 2, w.to_vec()).unwrap(),
            bias: Tensor::zeros(&[2]),
        }],
    )
    .unwrap()
}

fn labelled(rows: &[[f64; 2]], labels: &[usize]) -> Dataset {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    Dataset::new(Tensor::from_rows(&rows).unwrap(), labels.to_vec(), 2).unwrap()
}

/// Straight-line `Loss_L`: posteriors via plain forward passes, per-sample
/// Euclidean distance, mean cross-entropy.
fn loss_l_oracle(m_u: &ModelParams, m_alt: &ModelParams, d_third: &Dataset, d_r: &Dataset) -> f64 {
    let pu = m_u.forward(d_third.features()).unwrap();
    let pa = m_alt.forward(d_third.features()).unwrap();
    let dis = pu
        .iter()
        .zip(&pa)
        .map(|(a, b)| a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / pu.len() as f64;
    let pr = m_u.forward(d_r.features()).unwrap();
    let err = pr
        .iter()
        .zip(d_r.labels())
        .map(|(p, &y)| -p.probs()[y].max(1e-12).ln())
        .sum::<f64>()
        / pr.len() as f64;
    dis + err
}

/// Central-difference gradient of `f` over every parameter of `m`.
fn finite_diff(m: &ModelParams, h: f64, f: &dyn Fn(&ModelParams) -> f64) -> Vec<Tensor> {
    let base = m.tensors();
    let mut out = Vec::new();
    for (pi, t) in base.iter().enumerate() {
        let mut g = Tensor::zeros(t.shape());
        for k in 0..t.len() {
            let mut plus = base.clone();
            plus[pi].data_mut()[k] += h;
            let mut minus = base.clone();
            minus[pi].data_mut()[k] -= h;
            let up = f(&m.with_tensors(plus).unwrap());
            let down = f(&m.with_tensors(minus).unwrap());
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn max_rel_err(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

#[test]
fn loss_l_vanishes_when_matching_a_perfect_classifier() {
    let m = linear([1000.0, -1000.0, -1000.0, 1000.0]);
    let data = labelled(&[[1.0, 0.0], [0.0, 1.0]], &[0, 1]);
    let l = loss_l(&m, &m, &data, &data).unwrap();
    assert_eq!(l.dis, 0.0);
    assert_eq!(l.error, 0.0);
    assert_eq!(l.total, 0.0);
}

#[test]
fn opposite_one_hot_posteriors_are_root_two_apart() {
    let m_u = linear([1000.0, -1000.0, 0.0, 0.0]);
    let m_alt = linear([-1000.0, 1000.0, 0.0, 0.0]);
    let third = labelled(&[[1.0, 0.0]], &[0]);
    let l = loss_l(&m_u, &m_alt, &third, &third).unwrap();
    assert!((l.dis - 2f64.sqrt()).abs() < 1e-12, "{}", l.dis);
}

#[test]
fn loss_l_matches_straight_line_recomputation() {
    for seed in 0..5 {
        let f = fixture(seed);
        let m_u = init_model(f.m_o.architecture(), seed + 7).unwrap();
        let l = loss_l(&m_u, &f.m_alt, &f.bundle.d_third, &f.bundle.d_r).unwrap();
        let oracle = loss_l_oracle(&m_u, &f.m_alt, &f.bundle.d_third, &f.bundle.d_r);
        assert!((l.total - oracle).abs() < 1e-12, "{} vs {oracle}", l.total);
        assert!((l.dis + l.error - l.total).abs() < 1e-15);
        let g = game(&f, config());
        assert!((g.leader_loss(&m_u).unwrap().total - oracle).abs() < 1e-12);
    }
}

#[test]
fn empty_inputs_cannot_be_built() {
    assert!(Dataset::new(Tensor::zeros(&[0, 2]), vec![], 2).is_err());
}

#[test]
fn loss_f_is_zero_at_target() {
    let f = fixture(1);
    let arch = MlpArchitecture::new(6, vec![], 2).unwrap();
    let zero = ModelParams::from_layers(
        arch,
        vec![Layer {
            weight: Tensor::zeros(&[6, 2]),
            bias: Tensor::zeros(&[2]),
        }],
    )
    .unwrap();
    let flat = AttackModel::new(zero).unwrap();
    let l = loss_f(&flat, &f.m_o, &f.m_o, &f.bundle.d_f, 0.5, 1e-6).unwrap();
    assert!(l.abs() < 1e-6, "{l}");
}

#[test]
fn loss_f_of_a_certain_attacker() {
    let f = fixture(1);
    let arch = MlpArchitecture::new(6, vec![], 2).unwrap();
    let sure = ModelParams::from_layers(
        arch,
        vec![Layer {
            weight: Tensor::zeros(&[6, 2]),
            bias: Tensor::vector(vec![-1000.0, 1000.0]),
        }],
    )
    .unwrap();
    let m_a = AttackModel::new(sure).unwrap();
    assert_eq!(attack_prob(&m_a, &f.m_o, &f.m_o, &f.bundle.d_f).unwrap(), 1.0);
    let l = loss_f(&m_a, &f.m_o, &f.m_o, &f.bundle.d_f, 0.5, 1e-6).unwrap();
    assert!((l - 0.5).abs() < 1e-6, "{l}");
}

#[test]
fn loss_f_at_half_is_the_attack_advantage() {
    for seed in 0..3 {
        let f = fixture(seed);
        let m_u = init_model(f.m_o.architecture(), seed + 3).unwrap();
        let p = attack_prob(&f.m_a, &f.m_o, &m_u, &f.bundle.d_f).unwrap();
        let l = loss_f(&f.m_a, &f.m_o, &m_u, &f.bundle.d_f, 0.5, 1e-6).unwrap();
        assert!((l - (p - 0.5).abs()).abs() <= 1e-6);
        let g = game(&f, config());
        assert!((g.follower_loss(&m_u).unwrap().loss - l).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rates_are_fixed_points() {
    let f = fixture(2);
    let g = game(
        &f,
        GameConfig {
            lr_leader: 0.0,
            lr_follower: 0.0,
            ..config()
        },
    );
    assert_eq!(g.leader_step(&f.m_o, 1).unwrap().0, f.m_o);
    assert_eq!(g.follower_step(&f.m_o, 1).unwrap().0, f.m_o);
}

#[test]
fn one_leader_epoch_is_one_manual_gradient_step() {
    // One-input softmax classifier: two weights and two biases.
    let arch = MlpArchitecture::new(1, vec![], 2).unwrap();
    let model = |w: [f64; 4]| {
        ModelParams::from_layers(
            arch.clone(),
            vec![Layer {
                weight: Tensor::matrix(1, 2, vec![w[0], w[1]]).unwrap(),
                bias: Tensor::vector(vec![w[2], w[3]]),
            }],
        )
        .unwrap()
    };
    let col = |xs: &[f64], ys: &[usize]| {
        Dataset::new(Tensor::matrix(xs.len(), 1, xs.to_vec()).unwrap(), ys.to_vec(), 2).unwrap()
    };
    let d_r = col(&[-1.0, 0.5, 2.0], &[0, 1, 1]);
    let d_third = col(&[0.3, -0.7], &[0, 0]);
    let d_f = col(&[1.0], &[1]);
    let m_u = model([0.4, -0.2, 0.1, 0.0]);
    let m_alt = model([-0.3, 0.6, 0.0, 0.2]);
    let m_a = AttackModel::new(init_model(&MlpArchitecture::new(4, vec![3], 2).unwrap(), 9).unwrap()).unwrap();

    let lr = 0.3;
    let grad = finite_diff(&m_u, 1e-6, &|m| loss_l_oracle(m, &m_alt, &d_third, &d_r));
    let expected: Vec<f64> = m_u
        .tensors()
        .iter()
        .zip(&grad)
        .flat_map(|(p, g)| p.data().iter().zip(g.data()).map(|(a, b)| a - lr * b).collect::<Vec<_>>())
        .collect();

    let cfg = GameConfig {
        lr_leader: lr,
        epochs_leader: 1,
        ..GameConfig::default()
    };
    let g = Game::new(&m_u, &m_alt, &m_a, &d_third, &d_r, &d_f, cfg).unwrap();
    let (next, _) = g.leader_step(&m_u, 1).unwrap();
    let got: Vec<f64> = next.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-8, "{got:?} vs {expected:?}");
    }
}

#[test]
fn leader_loss_is_non_increasing_for_small_steps() {
    let f = fixture(3);
    let g = game(
        &f,
        GameConfig {
            lr_leader: 0.01,
            epochs_leader: 1,
            ..config()
        },
    );
    let mut m = f.m_o.clone();
    let mut prev = g.leader_loss(&m).unwrap().total;
    for round in 1..=10 {
        let (next, l) = g.leader_step(&m, round).unwrap();
        assert!(l.total <= prev + 1e-12, "round {round}: {} > {prev}", l.total);
        prev = l.total;
        m = next;
    }
}

#[test]
fn follower_loss_does_not_rise_for_small_steps() {
    for seed in 0..3 {
        let f = fixture(seed);
        let g = game(
            &f,
            GameConfig {
                lr_follower: 1e-3,
                epochs_follower: 1,
                ..config()
            },
        );
        let before = g.follower_loss(&f.m_o).unwrap().loss;
        let (_, after) = g.follower_step(&f.m_o, 1).unwrap();
        assert!(after.loss <= before, "seed {seed}: {} > {before}", after.loss);
    }
}

#[test]
fn follower_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let f = fixture(seed);
        let g = game(&f, config());
        let m_u = init_model(f.m_o.architecture(), seed + 11).unwrap();
        let (_, grads) = g.follower_grad(&m_u).unwrap();
        let fd = finite_diff(&m_u, 1e-6, &|m| {
            loss_f(&f.m_a, &f.m_o, m, &f.bundle.d_f, 0.5, 1e-6).unwrap()
        });
        let err = max_rel_err(&grads, &fd);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn leader_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let f = fixture(seed);
        let g = game(&f, config());
        let m_u = init_model(f.m_o.architecture(), seed + 13).unwrap();
        let (_, grads) = g.leader_grad(&m_u).unwrap();
        let fd = finite_diff(&m_u, 1e-6, &|m| loss_l_oracle(m, &f.m_alt, &f.bundle.d_third, &f.bundle.d_r));
        let err = max_rel_err(&grads, &fd);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

/// Halves the step from the default until one epoch lowers the module's
/// own loss.
fn descends_within_twenty_halvings(f: &Fixture, leader: bool) -> bool {
    let base = GameConfig {
        epochs_leader: 1,
        epochs_follower: 1,
        ..GameConfig::default()
    };
    let mut lr = if leader { base.lr_leader } else { base.lr_follower };
    for _ in 0..=20 {
        let cfg = if leader {
            GameConfig { lr_leader: lr, ..base.clone() }
        } else {
            GameConfig { lr_follower: lr, ..base.clone() }
        };
        let g = game(f, cfg);
        let ok = if leader {
            let before = g.leader_loss(&f.m_o).unwrap().total;
            g.leader_step(&f.m_o, 1).unwrap().1.total < before
        } else {
            let before = g.follower_loss(&f.m_o).unwrap().loss;
            g.follower_step(&f.m_o, 1).unwrap().1.loss < before
        };
        if ok {
            return true;
        }
        lr /= 2.0;
    }
    false
}

#[test]
fn each_module_has_a_descending_step_size() {
    for seed in 0..4 {
        let f = fixture(seed);
        assert!(descends_within_twenty_halvings(&f, true), "leader, seed {seed}");
        assert!(descends_within_twenty_halvings(&f, false), "follower, seed {seed}");
    }
}

#[test]
fn one_round_is_leader_then_follower() {
    let f = fixture(4);
    let cfg = GameConfig { rounds: 1, ..config() };
    let g = game(&f, cfg.clone());
    let (after_l, l) = g.leader_step(&f.m_o, 1).unwrap();
    let (after_f, fl) = g.follower_step(&after_l, 1).unwrap();
    let eq = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &cfg).unwrap();
    assert_eq!(eq.model, after_f);
    assert_eq!(eq.rounds_used, 1);
    let r = eq.trace.rounds[0];
    assert_eq!((r.loss_l, r.loss_f), (l.total, fl.loss));
    assert_eq!(r.priaa, (fl.attack_prob - 0.5).abs());
}

#[test]
fn trace_has_one_finite_non_negative_record_per_round() {
    let f = fixture(5);
    let eq = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &config()).unwrap();
    assert_eq!(eq.trace.len(), eq.rounds_used);
    for (i, r) in eq.trace.rounds.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        for v in [r.loss_l, r.dis_term, r.error_term, r.loss_f, r.priaa] {
            assert!(v.is_finite() && v >= 0.0, "{r:?}");
        }
    }
}

#[test]
fn convergence_implies_a_flat_window() {
    let f = fixture(6);
    let cfg = GameConfig {
        lr_leader: 1e-4,
        lr_follower: 1e-4,
        rounds: 50,
        ..config()
    };
    let eq = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &cfg).unwrap();
    assert!(eq.converged);
    assert!(eq.rounds_used > cfg.window && eq.rounds_used < cfg.rounds);
    let tail = &eq.trace.rounds[eq.rounds_used - cfg.window - 1..];
    for w in tail.windows(2) {
        assert!((w[1].loss_l - w[0].loss_l).abs() < cfg.tol);
        assert!((w[1].loss_f - w[0].loss_f).abs() < cfg.tol);
    }
}

#[test]
fn is_stable_needs_a_full_window() {
    let rec = |round, loss_l, loss_f| RoundRecord {
        round,
        loss_l,
        dis_term: 0.0,
        error_term: loss_l,
        loss_f,
        priaa: loss_f,
    };
    let mut t = GameTrace::default();
    for i in 0..5 {
        t.rounds.push(rec(i + 1, 1.0, 0.2));
    }
    assert!(!t.is_stable(5, 1e-4));
    t.rounds.push(rec(6, 1.0 + 5e-5, 0.2));
    assert!(t.is_stable(5, 1e-4));
    t.rounds.push(rec(7, 1.0, 0.2 + 2e-4));
    assert!(!t.is_stable(5, 1e-4));
}

#[test]
fn play_is_bit_reproducible() {
    let f = fixture(7);
    let a = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &config()).unwrap();
    let b = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &config()).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
}

#[test]
fn mini_batches_are_seeded() {
    let f = fixture(8);
    let cfg = GameConfig {
        batch_size: Some(8),
        ..config()
    };
    let a = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &cfg).unwrap();
    let b = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    let full = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &config()).unwrap();
    assert_ne!(a.model, full.model);
    let other = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &GameConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.model, other.model);
}

#[test]
fn a_batch_larger_than_the_data_is_full_batch() {
    let f = fixture(8);
    let cfg = GameConfig {
        batch_size: Some(10_000),
        ..config()
    };
    let a = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &cfg).unwrap();
    let full = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &config()).unwrap();
    assert_eq!(a.model, full.model);
}

#[test]
fn divergence_names_round_and_component() {
    let f = fixture(9);
    let cfg = GameConfig {
        lr_leader: 1e308,
        ..config()
    };
    match play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &cfg) {
        Err(Error::Divergence { round, component }) => {
            assert_eq!(round, 1);
            assert_eq!(component, "loss_L");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    let cfg = GameConfig {
        lr_follower: 1e308,
        ..config()
    };
    match play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &cfg) {
        Err(Error::Divergence { component, .. }) => assert_eq!(component, "loss_F"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn trace_csv_layout() {
    let f = fixture(10);
    let eq = play(&f.m_o, &f.bundle, &f.m_alt, &f.m_a, &GameConfig { rounds: 2, ..config() }).unwrap();
    let csv = eq.trace.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,loss_L,dis_term,error_term,loss_F,priaa");
    assert_eq!(lines.len(), 3);
    let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    let r = eq.trace.rounds[0];
    assert_eq!(first, vec![1.0, r.loss_l, r.dis_term, r.error_term, r.loss_f, r.priaa]);
}

#[test]
fn config_validation() {
    let ok = GameConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        GameConfig { lambda: 0.0, ..ok.clone() },
        GameConfig { lambda: 1.0, ..ok.clone() },
        GameConfig { rounds: 0, ..ok.clone() },
        GameConfig { tol: 0.0, ..ok.clone() },
        GameConfig { lr_leader: -1.0, ..ok.clone() },
        GameConfig { lr_follower: f64::NAN, ..ok.clone() },
        GameConfig { batch_size: Some(0), ..ok.clone() },
        GameConfig { window: 0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn attack_model_must_fit_the_target() {
    let f = fixture(0);
    let wrong = AttackModel::new(init_model(&MlpArchitecture::new(4, vec![], 2).unwrap(), 0).unwrap()).unwrap();
    assert!(Game::from_bundle(&f.m_o, &f.m_alt, &wrong, &f.bundle, config()).is_err());
}
