//! Tempered training loop.
//!
//! Stage 0 trains at `beta0`, estimates `log Z(beta0)`, and every later stage
//! searches the next temperature, accumulates the log-partition ratio and
//! trains until the windowed bound settles. All randomness is drawn from
//! per-purpose ChaCha streams of one seed, so a run resumed from a
//! checkpoint continues exactly as the uninterrupted run would.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CgModel, Checkpoint};
use crate::objective::{estimate_gradient, AdamConfig, AdamState, ObjectiveEstimate};
use crate::potentials::Potential;
use crate::tempering::{log_z0, propose_next_beta, StageRecord, TemperConfig, TemperState};

const STREAM_ITER: u64 = 1 << 40;
const STREAM_STAGE: u64 = 2 << 40;
const STREAM_LOG_Z0: u64 = 3 << 40;

/// RNG for one purpose; `stream` selects an independent ChaCha stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// When an inner loop counts as converged: the mean bound of consecutive
/// windows changes by less than `rel_tol * max(|previous|, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerConfig {
    pub window: usize,
    pub rel_tol: f64,
    pub min_windows: usize,
    pub max_iters: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            window: 100,
            rel_tol: 1e-3,
            min_windows: 2,
            max_iters: 5000,
        }
    }
}

/// Linear ramp of the sample count over the first `iters` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRamp {
    pub from: usize,
    pub to: usize,
    pub iters: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Samples per gradient estimate.
    pub samples: usize,
    pub sample_ramp: Option<SampleRamp>,
    /// Samples for the tempering estimators; defaults to `samples`.
    pub temper_samples: Option<usize>,
    /// Per-sample gradient cap relative to the mean norm; `None` disables it.
    pub grad_kappa: Option<f64>,
    pub adam: AdamConfig,
    pub inner: InnerConfig,
    pub temper: TemperConfig,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            samples: 1000,
            sample_ramp: None,
            temper_samples: None,
            grad_kappa: Some(3.0),
            adam: AdamConfig::default(),
            inner: InnerConfig::default(),
            temper: TemperConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.temper.validate()?;
        let a = &self.adam;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.samples < 2 {
            return bad("samples must be at least 2");
        }
        if self.temper_samples() < 100 {
            return bad("tempering needs at least 100 samples");
        }
        if let Some(k) = self.grad_kappa {
            if !(k > 0.0) {
                return bad("grad_kappa must be positive");
            }
        }
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("invalid optimizer settings");
        }
        let i = &self.inner;
        if i.window == 0 || i.max_iters == 0 || i.min_windows < 2 || !(i.rel_tol > 0.0) {
            return bad("inner loop needs window >= 1, min_windows >= 2, max_iters >= 1, rel_tol > 0");
        }
        if let Some(r) = self.sample_ramp {
            if r.from < 2 || r.to < 2 {
                return bad("sample ramp endpoints must be at least 2");
            }
        }
        Ok(())
    }

    pub fn temper_samples(&self) -> usize {
        self.temper_samples.unwrap_or(self.samples)
    }

    pub fn samples_at(&self, iter: u64) -> usize {
        match self.sample_ramp {
            None => self.samples,
            Some(r) => {
                let t = (iter as f64 / r.iters.max(1) as f64).min(1.0);
                (r.from as f64 + t * (r.to as f64 - r.from as f64)).round() as usize
            }
        }
    }
}

/// Progress of the current inner loop.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InnerProgress {
    pub iters: usize,
    /// Bound values of the unfinished window.
    pub window: Vec<f64>,
    /// Means of completed windows.
    pub means: Vec<f64>,
    /// Converged or out of iterations.
    pub done: bool,
}

impl InnerProgress {
    /// Records one bound value; true once converged or out of iterations.
    pub fn push(&mut self, value: f64, cfg: &InnerConfig) -> bool {
        self.iters += 1;
        self.window.push(value);
        if self.window.len() == cfg.window {
            let m = self.window.iter().sum::<f64>() / cfg.window as f64;
            self.means.push(m);
            self.window.clear();
        }
        self.done = self.iters >= cfg.max_iters || self.converged(cfg);
        self.done
    }

    pub fn converged(&self, cfg: &InnerConfig) -> bool {
        let n = self.means.len();
        if n < cfg.min_windows {
            return false;
        }
        let (prev, last) = (self.means[n - 2], self.means[n - 1]);
        (last - prev).abs() < cfg.rel_tol * prev.abs().max(1.0)
    }
}

/// Everything beyond the parameters needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub iter: u64,
    pub adam: AdamState,
    /// `None` while still in the initial stage.
    pub temper: Option<TemperState>,
    pub inner: InnerProgress,
    pub finished: bool,
}

/// One optimizer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: u64,
    pub stage: usize,
    pub beta: f64,
    pub objective: ObjectiveEstimate,
    pub grad_norm: f64,
    pub rescaled: usize,
}

pub trait Observer {
    fn on_iteration(&mut self, _record: &IterRecord) -> Result<()> {
        Ok(())
    }
    fn on_stage(&mut self, _record: &StageRecord) -> Result<()> {
        Ok(())
    }
    /// `first_stage` is set for the checkpoint taken when stage 0 completes.
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint, _first_stage: bool) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_beta: f64,
    pub iterations: u64,
    pub temper: TemperState,
}

pub struct Trainer<'a> {
    pub model: CgModel,
    potential: &'a dyn Potential,
    config: TrainConfig,
    seed: u64,
    state: ResumeState,
}

impl<'a> Trainer<'a> {
    pub fn new(model: CgModel, potential: &'a dyn Potential, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        crate::error::check_dim("potential dimension", model.n_f(), potential.dim())?;
        let adam = AdamState::new(model.num_params(), config.adam);
        Ok(Trainer {
            model,
            potential,
            config,
            seed,
            state: ResumeState {
                iter: 0,
                adam,
                temper: None,
                inner: InnerProgress::default(),
                finished: false,
            },
        })
    }

    /// Continues from a checkpoint written by a previous run.
    pub fn resume(checkpoint: &Checkpoint, potential: &'a dyn Potential, config: TrainConfig) -> Result<Self> {
        let model = checkpoint.to_model()?;
        let mut t = Self::new(model, potential, config, checkpoint.seed)?;
        if let Some(state) = &checkpoint.training {
            crate::error::check_dim("optimizer state", t.model.num_params(), state.adam.m.len())?;
            t.state = state.clone();
            t.state.adam.config = t.config.adam;
        }
        Ok(t)
    }

    pub fn state(&self) -> &ResumeState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn beta(&self) -> f64 {
        self.state.temper.as_ref().map_or(self.config.temper.beta0, |t| t.beta)
    }

    fn stage(&self) -> usize {
        self.state.temper.as_ref().map_or(0, |t| t.k)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, self.seed);
        c.training = Some(self.state.clone());
        c
    }

    fn abort(&self, e: Error) -> Error {
        match e {
            Error::RunAborted { .. } => e,
            other => Error::RunAborted {
                stage: self.stage(),
                beta: self.beta(),
                reason: other.to_string(),
            },
        }
    }

    /// One ADAM step at the current temperature.
    pub fn step(&mut self) -> Result<IterRecord> {
        let beta = self.beta();
        let iter = self.state.iter;
        let mut rng = stream_rng(self.seed, STREAM_ITER + iter);
        let j = self.config.samples_at(iter);
        let est = estimate_gradient(&self.model, self.potential, beta, j, &mut rng, self.config.grad_kappa)?;
        // Ascent on the bound.
        let descent: Vec<f64> = est.grad.iter().map(|g| -g).collect();
        self.state.adam.step(self.model.params_mut().values_mut(), &descent)?;
        if let Some(bad) = self.model.params().values().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {bad} after update")));
        }
        self.state.iter += 1;
        Ok(IterRecord {
            iter,
            stage: self.stage(),
            beta,
            objective: est.objective,
            grad_norm: est.telemetry.grad_norm,
            rescaled: est.telemetry.rescaled,
        })
    }

    fn inner_loop(&mut self, obs: &mut dyn Observer) -> Result<()> {
        while !self.state.inner.done {
            let rec = self.step()?;
            obs.on_iteration(&rec)?;
            self.state.inner.push(rec.objective.total, &self.config.inner);
            if self.config.checkpoint_every > 0 && self.state.iter % self.config.checkpoint_every == 0 {
                obs.on_checkpoint(&self.checkpoint(), false)?;
            }
        }
        Ok(())
    }

    fn run_inner(&mut self, obs: &mut dyn Observer) -> Result<RunSummary> {
        while !self.state.finished {
            self.inner_loop(obs)?;
            let Some(temper) = self.state.temper.as_ref() else {
                let beta0 = self.config.temper.beta0;
                let mut rng = stream_rng(self.seed, STREAM_LOG_Z0);
                let z0 = log_z0(&self.model, self.potential, beta0, self.config.temper_samples(), &mut rng)?;
                let state = TemperState::new(beta0, z0.value, z0.ess);
                log::info!("stage 0: beta {beta0:e}, log Z {:.4}, ess {:.1}", z0.value, z0.ess);
                obs.on_stage(&state.records[0])?;
                self.state.temper = Some(state);
                obs.on_checkpoint(&self.checkpoint(), true)?;
                continue;
            };
            if temper.is_terminal(&self.config.temper) {
                self.state.finished = true;
                obs.on_checkpoint(&self.checkpoint(), false)?;
                break;
            }
            let mut rng = stream_rng(self.seed, STREAM_STAGE + temper.k as u64);
            let p = propose_next_beta(
                temper,
                &self.config.temper,
                &self.model,
                self.potential,
                self.config.temper_samples(),
                &mut rng,
            )?;
            let temper = self.state.temper.as_mut().expect("checked above");
            temper.accept(&p)?;
            let rec = temper.records.last().expect("accepted stage").clone();
            log::info!(
                "stage {}: beta {:.5}, c {:.3}, f {:.4}, log Z {:.4}, ess {:.1}",
                rec.stage,
                rec.beta,
                rec.c,
                rec.factor,
                rec.log_z,
                rec.ess
            );
            obs.on_stage(&rec)?;
            self.state.inner = InnerProgress::default();
            obs.on_checkpoint(&self.checkpoint(), false)?;
        }
        Ok(self.summary())
    }

    /// Runs (or continues) the tempered optimization up to the final beta.
    /// Failures carry the stage and temperature at which they happened.
    pub fn run(&mut self, obs: &mut dyn Observer) -> Result<RunSummary> {
        self.run_inner(obs).map_err(|e| self.abort(e))
    }

    fn summary(&self) -> RunSummary {
        let temper = self.state.temper.clone().expect("finished runs have a schedule");
        RunSummary {
            final_beta: temper.beta,
            iterations: self.state.iter,
            temper,
        }
    }
}

pub const TRAIN_TRACE: &str = "train_trace.csv";
pub const TEMPER_TRACE: &str = "tempering_trace.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const FIRST_STAGE_CHECKPOINT: &str = "checkpoint_stage0.json";

const TRAIN_HEADER: &str =
    "iter,beta,L,term_energy,term_recon,term_entropy,grad_norm,capped_samples,rescaled_samples";
const TEMPER_HEADER: &str = "stage,beta,c,f_s_final,log_Z,ess";

/// Writes traces and checkpoints into a run directory.
pub struct RunWriter {
    dir: PathBuf,
    train: BufWriter<File>,
    temper: BufWriter<File>,
}

impl RunWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        Self::open(dir.as_ref(), None)
    }

    /// Reopens the traces of an interrupted run, dropping rows written after
    /// the checkpoint being resumed from.
    pub fn resume(dir: impl AsRef<Path>, state: &ResumeState) -> Result<Self> {
        Self::open(dir.as_ref(), Some(state))
    }

    fn open(dir: &Path, resume: Option<&ResumeState>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let keep_iter = resume.map(|s| s.iter);
        let keep_stage = resume.map(|s| s.temper.as_ref().map_or(-1, |t| t.k as i64));
        let train = reopen(&dir.join(TRAIN_TRACE), TRAIN_HEADER, |first| {
            keep_iter.is_some_and(|n| first.parse::<u64>().is_ok_and(|i| i < n))
        })?;
        let temper = reopen(&dir.join(TEMPER_TRACE), TEMPER_HEADER, |first| {
            keep_stage.is_some_and(|k| first.parse::<i64>().is_ok_and(|s| s <= k))
        })?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            train,
            temper,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn flush(&mut self) -> Result<()> {
        let dir = self.dir.clone();
        self.train.flush().map_err(|e| Error::io(dir.join(TRAIN_TRACE), e))?;
        self.temper.flush().map_err(|e| Error::io(dir.join(TEMPER_TRACE), e))
    }
}

/// Rewrites `path` with its header and the rows whose first field passes `keep`.
fn reopen(path: &Path, header: &str, keep: impl Fn(&str) -> bool) -> Result<BufWriter<File>> {
    let mut rows = Vec::new();
    if let Ok(f) = File::open(path) {
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            if keep(line.split(',').next().unwrap_or("")) {
                rows.push(line);
            }
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut put = |s: &str| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
    put(header)?;
    for r in &rows {
        put(r)?;
    }
    Ok(w)
}

impl Observer for RunWriter {
    fn on_iteration(&mut self, r: &IterRecord) -> Result<()> {
        let o = &r.objective;
        writeln!(
            self.train,
            "{},{},{},{},{},{},{},{},{}",
            r.iter, r.beta, o.total, o.term_energy, o.term_recon, o.term_entropy, r.grad_norm, o.capped, r.rescaled
        )
        .map_err(|e| Error::io(self.dir.join(TRAIN_TRACE), e))
    }

    fn on_stage(&mut self, r: &StageRecord) -> Result<()> {
        writeln!(self.temper, "{},{},{},{},{},{}", r.stage, r.beta, r.c, r.factor, r.log_z, r.ess)
            .map_err(|e| Error::io(self.dir.join(TEMPER_TRACE), e))
    }

    fn on_checkpoint(&mut self, c: &Checkpoint, first_stage: bool) -> Result<()> {
        self.flush()?;
        if first_stage {
            let mut plain = c.clone();
            plain.training = None;
            plain.save(self.dir.join(FIRST_STAGE_CHECKPOINT))?;
        }
        c.save(self.dir.join(CHECKPOINT))
    }
}

#[cfg(test)]
mod tests;
