use super::*;
use crate::objective::objective_with_noise;
use crate::potentials::PotentialSpec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `U - c`, so that `log Z` grows by `beta c`.
struct Shifted {
    inner: PotentialSpec,
    c: f64,
}

impl Potential for Shifted {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn energy_force(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (u, f) = self.inner.energy_force(x)?;
        Ok((u - self.c, f))
    }
}

fn kl(c: f64) -> KlIncrease {
    KlIncrease {
        c,
        numerator: c,
        denominator: 1.0,
        ratio: RatioEstimate {
            value: -0.1,
            ess: 50.0,
            n: 100,
            reliable: true,
            warning: None,
        },
    }
}

#[test]
fn weights_normalize_without_overflow() {
    let w = ImportanceWeights::new(vec![700.0, 710.0, -1e6, 705.0]).unwrap();
    assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(w.shift, 710.0);
    assert!(w.ess() >= 1.0 && w.ess() <= 4.0);
    let flat = ImportanceWeights::new(vec![-3.0; 50]).unwrap();
    assert!((flat.ess() - 50.0).abs() < 1e-9);
    assert!(ImportanceWeights::new(vec![f64::NAN]).is_err());
    assert!(ImportanceWeights::new(Vec::new()).is_err());
}

#[test]
fn zero_step_ratio_is_exactly_zero() {
    let m = CgModel::harmonic_optimum(2, 1.0, 0.3).unwrap();
    let pot = PotentialSpec::double_well();
    let r = log_z_ratio(&m, &pot, 0.5, 0.0, 500, &mut rng(1)).unwrap();
    assert_eq!(r.value, 0.0);
}

#[test]
fn ratio_rejects_small_samples() {
    let m = CgModel::harmonic_optimum(2, 1.0, 1.0).unwrap();
    let pot = PotentialSpec::harmonic(2, 1.0);
    assert!(log_z_ratio(&m, &pot, 0.5, 0.1, 1, &mut rng(1)).is_err());
    assert!(log_z_ratio(&m, &pot, 0.5, -0.1, 500, &mut rng(1)).is_err());
}

#[test]
fn harmonic_ratio_matches_analytic() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let m = CgModel::harmonic_optimum(2, 1.0, 0.5).unwrap();
    let mut r = rng(2);
    let reps: Vec<f64> = (0..20)
        .map(|_| log_z_ratio(&m, &pot, 0.5, 0.1, 1000, &mut r).unwrap().value)
        .collect();
    let expected = -(0.6f64 / 0.5).ln();
    let m_hat = stats::mean(&reps);
    assert!((m_hat - expected).abs() < 3.0 * stats::std_err(&reps), "{m_hat} vs {expected}");
}

#[test]
fn log_z0_with_perfect_proposal() {
    let beta = 0.7;
    let pot = Shifted {
        inner: PotentialSpec::harmonic(2, 1.3),
        c: 2.5,
    };
    let m = CgModel::harmonic_optimum(2, 1.3, beta).unwrap();
    let est = log_z0(&m, &pot, beta, 400, &mut rng(3)).unwrap();
    let expected = PotentialSpec::harmonic(2, 1.3).analytic_log_partition(beta).unwrap() + beta * 2.5;
    assert!((est.value - expected).abs() < 1e-9, "{} vs {expected}", est.value);
    assert!((est.ess - 400.0).abs() < 1e-6);
    assert!(est.reliable);
}

#[test]
fn log_z0_warns_on_unconfined_potential() {
    let m = CgModel::harmonic_optimum(2, 1.0, 1.0).unwrap();
    let open = PotentialSpec::harmonic(2, 1.0);
    let est = log_z0(&m, &open, 1e-4, 200, &mut rng(4)).unwrap();
    assert!(est.warning.is_some());
    let boxed = open.clone().bounded();
    assert!(log_z0(&m, &boxed, 1e-4, 200, &mut rng(4)).unwrap().warning.is_none());
    assert!(log_z0(&m, &open, 0.5, 200, &mut rng(4)).unwrap().warning.is_none());
}

#[test]
fn c_vanishes_for_equal_temperatures() {
    let m = CgModel::harmonic_optimum(2, 1.0, 0.3).unwrap();
    let pot = PotentialSpec::harmonic(2, 1.0);
    let log_z = pot.analytic_log_partition(0.5).unwrap();
    let kl = relative_kl_increase(&m, &pot, 0.5, 0.5, log_z, 500, &mut rng(5)).unwrap();
    assert_eq!(kl.numerator, 0.0);
    assert_eq!(kl.c, 0.0);
}

#[test]
fn numerator_is_first_order_in_step() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let m = CgModel::harmonic_optimum(2, 1.0, 0.3).unwrap();
    let log_z = pot.analytic_log_partition(0.5).unwrap();
    let s = StageSamples::draw(&m, &pot, 0.5, 5000, &mut rng(6)).unwrap();
    let a = s.relative_kl_increase(&pot, 0.51, log_z).unwrap();
    let b = s.relative_kl_increase(&pot, 0.52, log_z).unwrap();
    let ratio = b.numerator / a.numerator;
    assert!((1.5..=2.5).contains(&ratio), "{ratio}");
}

#[test]
fn denominator_is_the_divergence_bound() {
    let pot = PotentialSpec::double_well();
    let m = CgModel::harmonic_optimum(2, 1.0, 0.4).unwrap();
    let noise = m.sample_noise(300, &mut rng(7)).unwrap();
    let s = StageSamples::from_noise(&m, &pot, 0.6, &noise).unwrap();
    let log_z = 3.2;
    let kl = s.relative_kl_increase(&pot, 0.65, log_z).unwrap();
    let l = objective_with_noise(&m, &pot, 0.6, &noise).unwrap().total;
    assert!((kl.denominator - (log_z - l)).abs() < 1e-10);
}

#[test]
fn degenerate_denominator_is_an_error() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let m = CgModel::harmonic_optimum(2, 1.0, 0.5).unwrap();
    let s = StageSamples::draw(&m, &pot, 0.5, 200, &mut rng(8)).unwrap();
    let err = s.relative_kl_increase(&pot, 0.55, s.bound).unwrap_err();
    assert!(matches!(err, Error::DegenerateDivergence { .. }));
    assert!(s.relative_kl_increase(&pot, 0.4, 1.0).is_err());
}

fn config(delta: f64) -> TemperConfig {
    TemperConfig {
        delta_beta_max: delta,
        ..TemperConfig::default()
    }
}

#[test]
fn step_search_traces_the_decay() {
    let state = TemperState::new(0.2, 1.0, 100.0);
    let cfg = config(0.02);
    let mut cs = [1.4, 1.2, 0.9].into_iter();
    let mut tried = Vec::new();
    let p = propose_next_beta_with(&state, &cfg, |b| {
        tried.push(b);
        Ok(Some(kl(cs.next().unwrap())))
    })
    .unwrap();
    assert!((p.factor - 0.36).abs() < 1e-12);
    assert!((p.beta - (0.2 + 0.36 * 0.02)).abs() < 1e-15);
    assert_eq!(p.proposals, 3);
    assert_eq!(p.c, 0.9);
    assert!((tried[1] - (0.2 + 0.6 * 0.02)).abs() < 1e-15);
}

#[test]
fn step_search_accepts_first_proposal() {
    let state = TemperState::new(0.2, 1.0, 100.0);
    let p = propose_next_beta_with(&state, &config(0.02), |_| Ok(Some(kl(0.3)))).unwrap();
    assert_eq!(p.beta, 0.2 + 0.02);
    assert_eq!(p.proposals, 1);
    assert_eq!(p.factor, 1.0);
}

#[test]
fn step_search_clamps_and_terminates() {
    let cfg = config(0.02);
    let near = TemperState::new(0.995, 1.0, 100.0);
    let p = propose_next_beta_with(&near, &cfg, |_| Ok(Some(kl(0.3)))).unwrap();
    assert_eq!(p.beta, 1.0);
    let done = TemperState::new(1.0, 1.0, 100.0);
    let p = propose_next_beta_with(&done, &cfg, |_| panic!("no proposal at the end")).unwrap();
    assert_eq!(p.beta, 1.0);
    // A rejected capped step falls back below the remaining gap.
    let mut tried = Vec::new();
    let mut first = true;
    propose_next_beta_with(&near, &cfg, |b| {
        tried.push(b);
        let c = if std::mem::take(&mut first) { 2.0 } else { 0.5 };
        Ok(Some(kl(c)))
    })
    .unwrap();
    assert_eq!(tried[0], 1.0);
    assert!(tried[1] < 1.0);
}

#[test]
fn step_search_stalls() {
    let state = TemperState::new(0.2, 1.0, 100.0);
    let err = propose_next_beta_with(&state, &config(0.02), |_| Ok(Some(kl(5.0)))).unwrap_err();
    assert!(matches!(err, Error::TemperingStall { .. }));
    let err = propose_next_beta_with(&state, &config(0.02), |_| Ok(None)).unwrap_err();
    assert!(matches!(err, Error::TemperingStall { .. }));
}

#[test]
fn state_accumulates_monotonically() {
    let mut s = TemperState::new(0.1, 2.0, 100.0);
    let p = Proposal {
        beta: 0.2,
        c: 0.5,
        factor: 1.0,
        log_z_ratio: -0.3,
        ess: 90.0,
        proposals: 1,
    };
    s.accept(&p).unwrap();
    assert_eq!(s.k, 1);
    assert!((s.log_z - 1.7).abs() < 1e-15);
    assert_eq!(s.log_z_history.len(), s.k + 1);
    let back = Proposal { beta: 0.1, ..p };
    assert!(s.accept(&back).is_err());
}

#[test]
fn model_step_search_on_harmonic() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let cfg = config(0.1);
    // The model is the exact answer at 0.45, slightly off at 0.5.
    let m = CgModel::harmonic_optimum(2, 1.0, 0.45).unwrap();
    let state = TemperState::new(0.5, pot.analytic_log_partition(0.5).unwrap(), 1000.0);
    let p = propose_next_beta(&state, &cfg, &m, &pot, 1000, &mut rng(9)).unwrap();
    assert!(p.c <= cfg.c_max);
    assert!(p.beta > 0.5 && p.beta <= 0.6);
}

#[test]
fn multistage_sum_with_exact_models() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let mut r = rng(10);
    let beta0 = 0.2;
    let m0 = CgModel::harmonic_optimum(2, 1.0, beta0).unwrap();
    let z0 = log_z0(&m0, &pot, beta0, 500, &mut r).unwrap();
    let mut state = TemperState::new(beta0, z0.value, z0.ess);
    while state.beta < 1.0 {
        let m = CgModel::harmonic_optimum(2, 1.0, state.beta).unwrap();
        let next = (state.beta + 0.1).min(1.0);
        let ratio = log_z_ratio(&m, &pot, state.beta, next - state.beta, 2000, &mut r).unwrap();
        state
            .accept(&Proposal {
                beta: next,
                c: 0.0,
                factor: 1.0,
                log_z_ratio: ratio.value,
                ess: ratio.ess,
                proposals: 1,
            })
            .unwrap();
    }
    let exact = pot.analytic_log_partition(1.0).unwrap();
    assert!((state.log_z - exact).abs() < 0.05 * exact, "{} vs {exact}", state.log_z);
}

proptest! {
    #[test]
    fn weights_invariants(log_w in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let n = log_w.len() as f64;
        let w = ImportanceWeights::new(log_w).unwrap();
        prop_assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
        let ess = w.ess();
        prop_assert!(ess >= 1.0 - 1e-12 && ess <= n + 1e-9);
    }
}
