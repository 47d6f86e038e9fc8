//! Adaptive inverse-temperature schedule.
//!
//! Each stage trains at `beta_k`, then searches for the next temperature by
//! shrinking a trial step until the relative increase of the divergence
//!
//! ```text
//! c_k = [log Z(b') - log Z(b) + <b' U - b U>_q] / [log Z(b) - L(b)]
//! ```
//!
//! drops below `c_max`. Partition-function ratios come from importance
//! sampling with the joint model as proposal and the encoder as auxiliary
//! density, and are accumulated into a running `log Z(beta_k)`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CgModel, JointNoise};
use crate::objective::{capped_energy, sample_terms, summarize};
use crate::potentials::Potential;
use crate::stats;

/// Default minimum effective sample size, as a fraction of the sample count.
pub const ESS_MIN_FRACTION: f64 = 0.02;
const MIN_SAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemperConfig {
    pub beta0: f64,
    pub beta_final: f64,
    pub delta_beta_max: f64,
    pub c_max: f64,
    /// Step factor multiplier after a rejected proposal.
    pub decay: f64,
    pub ess_min_fraction: f64,
    /// Stall threshold for the step factor.
    pub min_factor: f64,
}

impl Default for TemperConfig {
    fn default() -> Self {
        TemperConfig {
            beta0: 1e-10,
            beta_final: 1.0,
            delta_beta_max: 1e-3,
            c_max: 1.0,
            decay: 0.6,
            ess_min_fraction: ESS_MIN_FRACTION,
            min_factor: 1e-12,
        }
    }
}

impl TemperConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta0 > 0.0
            && self.beta_final >= self.beta0
            && self.delta_beta_max > 0.0
            && self.c_max > 0.0
            && self.decay > 0.0
            && self.decay < 1.0
            && (0.0..1.0).contains(&self.ess_min_fraction)
            && self.min_factor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid tempering settings: {self:?}")))
        }
    }
}

/// Self-normalized importance weights held in log space.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceWeights {
    pub log_w: Vec<f64>,
    /// `max log_w`.
    pub shift: f64,
    pub normalized: Vec<f64>,
}

impl ImportanceWeights {
    pub fn new(log_w: Vec<f64>) -> Result<Self> {
        if log_w.is_empty() {
            return Err(Error::InvalidArgument("no importance weights".into()));
        }
        if let Some(bad) = log_w.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
            return Err(Error::NonFinite(format!("log importance weight {bad}")));
        }
        let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            return Err(Error::NonFinite("all importance weights vanish".into()));
        }
        let lse = stats::log_sum_exp(&log_w);
        let normalized = log_w.iter().map(|v| (v - lse).exp()).collect();
        Ok(ImportanceWeights {
            log_w,
            shift,
            normalized,
        })
    }

    /// `1 / sum W^2`, between 1 and the sample count.
    pub fn ess(&self) -> f64 {
        1.0 / self.normalized.iter().map(|w| w * w).sum::<f64>()
    }
}

/// An importance-sampling estimate of a log partition function (or ratio).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub value: f64,
    pub ess: f64,
    pub n: usize,
    /// `ess >= ess_min`.
    pub reliable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Relative divergence increase between two temperatures.
#[derive(Clone, Debug, PartialEq)]
pub struct KlIncrease {
    pub c: f64,
    pub numerator: f64,
    /// `log Z_k - L(beta_k)`, the current divergence bound.
    pub denominator: f64,
    pub ratio: RatioEstimate,
}

/// Joint samples at `beta_k` with everything the stage estimators need.
#[derive(Clone, Debug)]
pub struct StageSamples {
    pub beta: f64,
    pub xs: Vec<Vec<f64>>,
    /// Reduced energies `beta_k U(x)`.
    pub energy: Vec<f64>,
    pub log_r: Vec<f64>,
    pub log_q: Vec<f64>,
    /// `L(beta_k)` on these samples.
    pub bound: f64,
    pub ess_min_fraction: f64,
}

impl StageSamples {
    pub fn from_noise(
        model: &CgModel,
        potential: &dyn Potential,
        beta: f64,
        noise: &[JointNoise],
    ) -> Result<Self> {
        if noise.len() < MIN_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "importance sampling needs N >= {MIN_SAMPLES}, got {}",
                noise.len()
            )));
        }
        let terms = sample_terms(model, potential, beta, noise)?;
        let bound = summarize(model, &terms).total;
        let mut s = StageSamples {
            beta,
            xs: Vec::with_capacity(terms.len()),
            energy: Vec::with_capacity(terms.len()),
            log_r: Vec::with_capacity(terms.len()),
            log_q: Vec::with_capacity(terms.len()),
            bound,
            ess_min_fraction: ESS_MIN_FRACTION,
        };
        for t in terms {
            s.xs.push(t.x);
            s.energy.push(t.energy);
            s.log_r.push(t.log_r);
            s.log_q.push(t.log_q);
        }
        Ok(s)
    }

    pub fn draw<R: Rng + ?Sized>(
        model: &CgModel,
        potential: &dyn Potential,
        beta: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n < MIN_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "importance sampling needs N >= {MIN_SAMPLES}, got {n}"
            )));
        }
        let noise = model.sample_noise(n, rng)?;
        Self::from_noise(model, potential, beta, &noise)
    }

    pub fn with_ess_min_fraction(mut self, fraction: f64) -> Self {
        self.ess_min_fraction = fraction;
        self
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// `log w = -beta_k U + log r(z|x) - log q(x, z)`.
    pub fn log_weights(&self) -> Vec<f64> {
        self.energy
            .iter()
            .zip(&self.log_r)
            .zip(&self.log_q)
            .map(|((e, r), q)| r - e - q)
            .collect()
    }

    pub fn weights(&self) -> Result<ImportanceWeights> {
        ImportanceWeights::new(self.log_weights())
    }

    fn estimate(&self, value: f64, ess: f64) -> RatioEstimate {
        RatioEstimate {
            value,
            ess,
            n: self.len(),
            reliable: ess >= self.ess_min_fraction * self.len() as f64,
            warning: None,
        }
    }

    /// `log Z(beta_k)` by importance sampling.
    pub fn log_z(&self) -> Result<RatioEstimate> {
        let w = self.weights()?;
        let value = stats::log_mean_exp(&w.log_w);
        Ok(self.estimate(value, w.ess()))
    }

    /// Reduced energies of the stored samples at another temperature.
    pub fn energies_at(&self, potential: &dyn Potential, beta: f64) -> Result<Vec<f64>> {
        if beta == self.beta {
            return Ok(self.energy.clone());
        }
        self.xs
            .par_iter()
            .map(|x| capped_energy(potential, x, beta).map(|(e, _, _)| e))
            .collect()
    }

    /// `log Z(beta_next) - log Z(beta_k)`; the ESS is that of the combined weights.
    pub fn log_z_ratio(&self, potential: &dyn Potential, beta_next: f64) -> Result<RatioEstimate> {
        let next = self.energies_at(potential, beta_next)?;
        self.ratio_from(&next)
    }

    fn ratio_from(&self, next: &[f64]) -> Result<RatioEstimate> {
        let log_w = self.log_weights();
        let shifted: Vec<f64> = log_w
            .iter()
            .zip(next)
            .zip(&self.energy)
            .map(|((w, en), ek)| w - (en - ek))
            .collect();
        let combined = ImportanceWeights::new(shifted)?;
        let value = stats::log_sum_exp(&combined.log_w) - stats::log_sum_exp(&log_w);
        Ok(self.estimate(value, combined.ess()))
    }

    /// Relative divergence increase `c` for a move to `beta_next`, on these samples.
    pub fn relative_kl_increase(
        &self,
        potential: &dyn Potential,
        beta_next: f64,
        log_z_k: f64,
    ) -> Result<KlIncrease> {
        if beta_next < self.beta {
            return Err(Error::InvalidArgument(format!(
                "next beta {beta_next} below current {}",
                self.beta
            )));
        }
        let next = self.energies_at(potential, beta_next)?;
        let ratio = self.ratio_from(&next)?;
        let delta: Vec<f64> = next.iter().zip(&self.energy).map(|(a, b)| a - b).collect();
        let numerator = ratio.value + stats::mean(&delta);
        let denominator = log_z_k - self.bound;
        if denominator.abs() < 1e-8 {
            return Err(Error::DegenerateDivergence { denominator });
        }
        Ok(KlIncrease {
            c: numerator / denominator,
            numerator,
            denominator,
            ratio,
        })
    }
}

/// `log Z(beta_k + delta_beta) - log Z(beta_k)` from `n` fresh joint samples.
pub fn log_z_ratio<R: Rng + ?Sized>(
    model: &CgModel,
    potential: &dyn Potential,
    beta_k: f64,
    delta_beta: f64,
    n: usize,
    rng: &mut R,
) -> Result<RatioEstimate> {
    if !(delta_beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("delta beta must be >= 0, got {delta_beta}")));
    }
    StageSamples::draw(model, potential, beta_k, n, rng)?.log_z_ratio(potential, beta_k + delta_beta)
}

/// `log Z(beta0)` by importance sampling. Warns when the potential is not
/// confined and `beta0` is small, since `Z` then barely exists.
pub fn log_z0<R: Rng + ?Sized>(
    model: &CgModel,
    potential: &dyn Potential,
    beta0: f64,
    n: usize,
    rng: &mut R,
) -> Result<RatioEstimate> {
    let mut est = StageSamples::draw(model, potential, beta0, n, rng)?.log_z()?;
    if !potential.bounded_domain() && beta0 < 1e-3 {
        let msg = format!(
            "log Z at beta0 = {beta0:e} on an unconfined potential diverges as beta0 -> 0; \
             wrap the potential in an auxiliary box"
        );
        log::warn!("{msg}");
        est.warning = Some(msg);
    }
    Ok(est)
}

pub fn relative_kl_increase<R: Rng + ?Sized>(
    model: &CgModel,
    potential: &dyn Potential,
    beta_k: f64,
    beta_next: f64,
    log_z_k: f64,
    n: usize,
    rng: &mut R,
) -> Result<KlIncrease> {
    StageSamples::draw(model, potential, beta_k, n, rng)?.relative_kl_increase(potential, beta_next, log_z_k)
}

/// One accepted tempering stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub beta: f64,
    /// Accepted `c` (0 for the initial stage).
    pub c: f64,
    /// Final step factor.
    pub factor: f64,
    pub log_z: f64,
    pub ess: f64,
    pub proposals: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperState {
    pub k: usize,
    pub beta: f64,
    pub log_z: f64,
    pub log_z_history: Vec<f64>,
    pub records: Vec<StageRecord>,
}

impl TemperState {
    pub fn new(beta0: f64, log_z0: f64, ess0: f64) -> Self {
        TemperState {
            k: 0,
            beta: beta0,
            log_z: log_z0,
            log_z_history: vec![log_z0],
            records: vec![StageRecord {
                stage: 0,
                beta: beta0,
                c: 0.0,
                factor: 0.0,
                log_z: log_z0,
                ess: ess0,
                proposals: 0,
            }],
        }
    }

    pub fn betas(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.beta)
    }

    pub fn is_terminal(&self, config: &TemperConfig) -> bool {
        self.beta >= config.beta_final
    }

    /// Moves to the proposed temperature and accumulates its log-ratio.
    pub fn accept(&mut self, p: &Proposal) -> Result<()> {
        if p.beta < self.beta {
            return Err(Error::InvalidArgument(format!(
                "tempering cannot move down from {} to {}",
                self.beta, p.beta
            )));
        }
        self.k += 1;
        self.beta = p.beta;
        self.log_z += p.log_z_ratio;
        self.log_z_history.push(self.log_z);
        self.records.push(StageRecord {
            stage: self.k,
            beta: p.beta,
            c: p.c,
            factor: p.factor,
            log_z: self.log_z,
            ess: p.ess,
            proposals: p.proposals,
        });
        Ok(())
    }
}

/// Outcome of one temperature search.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub beta: f64,
    pub c: f64,
    pub factor: f64,
    pub log_z_ratio: f64,
    pub ess: f64,
    pub proposals: usize,
}

/// Step search with a caller-supplied estimator of `c`.
///
/// Trial temperatures are `beta_k + f * delta_beta_max` (capped at the final
/// beta) for `f = 1, decay, decay^2, ...`; the first with `c <= c_max` wins.
/// `evaluate` returns `None` for an estimate too noisy to use, which counts
/// as a rejection.
pub fn propose_next_beta_with<F>(state: &TemperState, config: &TemperConfig, mut evaluate: F) -> Result<Proposal>
where
    F: FnMut(f64) -> Result<Option<KlIncrease>>,
{
    if state.is_terminal(config) {
        return Ok(Proposal {
            beta: config.beta_final,
            c: 0.0,
            factor: 0.0,
            log_z_ratio: 0.0,
            ess: f64::NAN,
            proposals: 0,
        });
    }
    let mut f: f64 = 1.0;
    let mut proposals = 0;
    loop {
        let beta = (state.beta + f * config.delta_beta_max).min(config.beta_final);
        proposals += 1;
        if let Some(kl) = evaluate(beta)? {
            if kl.c <= config.c_max {
                return Ok(Proposal {
                    beta,
                    c: kl.c,
                    factor: f,
                    log_z_ratio: kl.ratio.value,
                    ess: kl.ratio.ess,
                    proposals,
                });
            }
        }
        f *= config.decay;
        // A capped trial repeats until the step drops below the remaining gap.
        while f * config.delta_beta_max > config.beta_final - state.beta && f >= config.min_factor {
            f *= config.decay;
        }
        if f < config.min_factor {
            return Err(Error::TemperingStall {
                beta: state.beta,
                factor: f,
            });
        }
    }
}

/// Step search on `n` joint samples drawn once for the stage. When an
/// estimate's ESS is too low the stage switches to `4n` samples once; a
/// trial still too noisy after that is rejected.
pub fn propose_next_beta<R: Rng + ?Sized>(
    state: &TemperState,
    config: &TemperConfig,
    model: &CgModel,
    potential: &dyn Potential,
    n: usize,
    rng: &mut R,
) -> Result<Proposal> {
    if state.is_terminal(config) {
        return propose_next_beta_with(state, config, |_| Ok(None));
    }
    let draw = |n: usize, rng: &mut R| {
        StageSamples::draw(model, potential, state.beta, n, rng)
            .map(|s| s.with_ess_min_fraction(config.ess_min_fraction))
    };
    let mut samples = draw(n, rng)?;
    let mut enlarged = false;
    propose_next_beta_with(state, config, |beta| {
        let mut kl = samples.relative_kl_increase(potential, beta, state.log_z)?;
        if !kl.ratio.reliable && !enlarged {
            log::info!(
                "ess {:.1} of {} at beta {beta}; redrawing with {} samples",
                kl.ratio.ess,
                samples.len(),
                4 * n
            );
            samples = draw(4 * n, rng)?;
            enlarged = true;
            kl = samples.relative_kl_increase(potential, beta, state.log_z)?;
        }
        Ok(kl.ratio.reliable.then_some(kl))
    })
}

#[cfg(test)]
mod tests;
