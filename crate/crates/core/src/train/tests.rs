use super::*;
use crate::model::Architecture;
use crate::potentials::PotentialSpec;

fn small_config() -> TrainConfig {
    TrainConfig {
        samples: 64,
        temper_samples: Some(200),
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        inner: InnerConfig {
            window: 10,
            rel_tol: 1e-2,
            min_windows: 2,
            max_iters: 60,
        },
        temper: TemperConfig {
            beta0: 0.2,
            delta_beta_max: 0.4,
            ..TemperConfig::default()
        },
        checkpoint_every: 25,
        ..TrainConfig::default()
    }
}

fn harmonic_model(seed: u64) -> CgModel {
    CgModel::new(Architecture::linear_gaussian(1, 2), &mut stream_rng(seed, 0)).unwrap()
}

#[derive(Default)]
struct Recorder {
    iters: Vec<(u64, f64)>,
    stages: Vec<StageRecord>,
    checkpoints: Vec<(Checkpoint, bool)>,
}

impl Observer for Recorder {
    fn on_iteration(&mut self, r: &IterRecord) -> Result<()> {
        self.iters.push((r.iter, r.objective.total));
        Ok(())
    }
    fn on_stage(&mut self, r: &StageRecord) -> Result<()> {
        self.stages.push(r.clone());
        Ok(())
    }
    fn on_checkpoint(&mut self, c: &Checkpoint, first: bool) -> Result<()> {
        self.checkpoints.push((c.clone(), first));
        Ok(())
    }
}

#[test]
fn inner_progress_converges_on_flat_windows() {
    let cfg = InnerConfig {
        window: 3,
        rel_tol: 1e-3,
        min_windows: 2,
        max_iters: 100,
    };
    let mut p = InnerProgress::default();
    for v in [5.0, 5.0, 5.0, 5.0, 5.0] {
        assert!(!p.push(v, &cfg));
    }
    assert!(p.push(5.0, &cfg));
    assert_eq!(p.means, vec![5.0, 5.0]);
    assert!(p.window.is_empty());
}

#[test]
fn inner_progress_tolerance_is_relative_to_scale() {
    let cfg = InnerConfig {
        window: 1,
        rel_tol: 1e-3,
        min_windows: 2,
        max_iters: 100,
    };
    let mut p = InnerProgress::default();
    p.push(1000.0, &cfg);
    assert!(p.push(1000.9, &cfg));
    let mut q = InnerProgress::default();
    q.push(0.1, &cfg);
    assert!(!q.push(0.1011, &cfg));
    assert!(q.push(0.1019, &cfg));
}

#[test]
fn inner_progress_stops_at_max_iters() {
    let cfg = InnerConfig {
        window: 2,
        rel_tol: 1e-9,
        min_windows: 2,
        max_iters: 7,
    };
    let mut p = InnerProgress::default();
    let done: Vec<bool> = (0..7).map(|i| p.push(i as f64 * 10.0, &cfg)).collect();
    assert_eq!(done.iter().filter(|d| **d).count(), 1);
    assert!(done[6] && p.done);
}

#[test]
fn sample_ramp_interpolates() {
    let cfg = TrainConfig {
        sample_ramp: Some(SampleRamp {
            from: 100,
            to: 1100,
            iters: 10,
        }),
        ..TrainConfig::default()
    };
    assert_eq!(cfg.samples_at(0), 100);
    assert_eq!(cfg.samples_at(5), 600);
    assert_eq!(cfg.samples_at(10), 1100);
    assert_eq!(cfg.samples_at(1000), 1100);
    assert_eq!(TrainConfig::default().samples_at(77), 1000);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let mut c = TrainConfig::default();
    c.samples = 1;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.temper_samples = Some(50);
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.grad_kappa = Some(0.0);
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.adam.beta1 = 1.0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.inner.min_windows = 1;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.temper.c_max = -1.0;
    assert!(c.validate().is_err());
}

#[test]
fn dimension_mismatch_is_rejected() {
    let pot = PotentialSpec::harmonic(3, 1.0);
    assert!(Trainer::new(harmonic_model(0), &pot, small_config(), 0).is_err());
}

#[test]
fn harmonic_run_reaches_final_beta_within_contract() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let mut t = Trainer::new(harmonic_model(1), &pot, small_config(), 7).unwrap();
    let mut rec = Recorder::default();
    let s = t.run(&mut rec).unwrap();
    assert_eq!(s.final_beta, 1.0);
    assert_eq!(s.iterations as usize, rec.iters.len());
    let betas: Vec<f64> = s.temper.betas().collect();
    assert!(betas.windows(2).all(|w| w[1] > w[0]));
    assert!(s.temper.records.iter().skip(1).all(|r| r.c <= 1.0));
    assert_eq!(rec.stages.len(), s.temper.records.len());
    assert_eq!(rec.checkpoints.iter().filter(|c| c.1).count(), 1);
    assert!(t.state().finished);
    // A finished run does nothing more.
    let again = t.run(&mut ()).unwrap();
    assert_eq!(again.iterations, s.iterations);
    let truth = pot.analytic_log_partition(1.0).unwrap();
    assert!((s.temper.log_z - truth).abs() < 0.1 * truth.abs(), "{} vs {truth}", s.temper.log_z);
}

#[test]
fn same_seed_same_run() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let run = |seed| {
        let mut t = Trainer::new(harmonic_model(2), &pot, small_config(), seed).unwrap();
        let mut rec = Recorder::default();
        t.run(&mut rec).unwrap();
        (t.model.params().values().to_vec(), rec.iters)
    };
    let (a, ta) = run(3);
    let (b, tb) = run(3);
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = run(4);
    assert_ne!(a, c);
}

#[test]
fn resume_continues_bitwise() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let cfg = small_config();
    let mut full = Trainer::new(harmonic_model(5), &pot, cfg.clone(), 11).unwrap();
    let mut rec = Recorder::default();
    full.run(&mut rec).unwrap();
    assert!(rec.checkpoints.len() >= 4);
    let dir = tempfile::tempdir().unwrap();
    for (i, (ck, _)) in rec.checkpoints.iter().enumerate().step_by(3) {
        let path = dir.path().join(format!("c{i}.json"));
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut t = Trainer::resume(&loaded, &pot, cfg.clone()).unwrap();
        let mut tail = Recorder::default();
        t.run(&mut tail).unwrap();
        assert_eq!(t.model.params().values(), full.model.params().values(), "checkpoint {i}");
        let start = ck.training.as_ref().unwrap().iter as usize;
        assert_eq!(tail.iters, rec.iters[start..]);
    }
}

#[test]
fn huge_learning_rate_aborts_with_context() {
    let pot = PotentialSpec::double_well();
    let mut cfg = small_config();
    cfg.adam.lr = 1e6;
    cfg.grad_kappa = None;
    cfg.temper.beta0 = 0.5;
    let model = CgModel::new(Architecture::double_well(4), &mut stream_rng(0, 0)).unwrap();
    let mut t = Trainer::new(model, &pot, cfg, 0).unwrap();
    match t.run(&mut ()) {
        Err(Error::RunAborted { beta, .. }) => assert!(beta > 0.0),
        other => panic!("expected an aborted run, got {other:?}"),
    }
}

fn read_first_column(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}

#[test]
fn run_writer_traces_and_resume_filtering() {
    let pot = PotentialSpec::harmonic(2, 1.0);
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(harmonic_model(6), &pot, cfg.clone(), 1).unwrap();
    let mut w = RunWriter::create(dir.path()).unwrap();
    let s = t.run(&mut w).unwrap();
    w.flush().unwrap();
    drop(w);
    let train = read_first_column(&dir.path().join(TRAIN_TRACE));
    assert_eq!(train[0], "iter");
    assert_eq!(train.len() as u64, s.iterations + 1);
    let header = fs::read_to_string(dir.path().join(TRAIN_TRACE)).unwrap();
    assert!(header.starts_with(TRAIN_HEADER));
    let temper = read_first_column(&dir.path().join(TEMPER_TRACE));
    assert_eq!(temper.len(), s.temper.records.len() + 1);
    assert!(dir.path().join(CHECKPOINT).exists());
    let first = Checkpoint::load(dir.path().join(FIRST_STAGE_CHECKPOINT)).unwrap();
    assert!(first.training.is_none());

    // Pretend the run died right after the first-stage checkpoint.
    let mut rec = Recorder::default();
    Trainer::new(harmonic_model(6), &pot, cfg.clone(), 1).unwrap().run(&mut rec).unwrap();
    let (ck, _) = rec.checkpoints.iter().find(|c| c.1).unwrap();
    let state = ck.training.clone().unwrap();
    let w = RunWriter::resume(dir.path(), &state).unwrap();
    drop(w);
    let train = read_first_column(&dir.path().join(TRAIN_TRACE));
    assert_eq!(train.len() as u64, state.iter + 1);
    let temper = read_first_column(&dir.path().join(TEMPER_TRACE));
    assert_eq!(temper, vec!["stage".to_string(), "0".to_string()]);

    // Continuing rebuilds the same traces.
    let mut t = Trainer::resume(ck, &pot, cfg).unwrap();
    let mut w = RunWriter::resume(dir.path(), t.state()).unwrap();
    t.run(&mut w).unwrap();
    drop(w);
    assert_eq!(read_first_column(&dir.path().join(TRAIN_TRACE)).len() as u64, s.iterations + 1);
}
