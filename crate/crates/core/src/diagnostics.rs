//! Evaluation of a trained model against the target and reference data.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{diag_gaussian_log_density, CgModel};
use crate::objective::estimate_objective;
use crate::potentials::Potential;
use crate::reference::QuadratureResult;
use crate::stats;

const MIN_SAMPLES: usize = 100;
const CHUNK: usize = 64;

/// A Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    fn from_samples(values: &[f64]) -> Self {
        Estimate {
            value: stats::mean(values),
            std_err: stats::std_err(values),
        }
    }
}

fn require_samples(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!("need at least {MIN_SAMPLES} samples, got {n}")));
    }
    Ok(())
}

/// How `log q(x)` is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalMethod {
    /// `log mean_i q(x | z_i)` with `z_i ~ q(z)`.
    #[default]
    Prior,
    /// Importance sampling with the encoder as proposal (an extension for
    /// variance comparison): `log mean_i q(x|z_i) q(z_i) / r(z_i|x)`, `z_i ~ r(z|x)`.
    Encoder,
}

/// Prior-sampling estimator of `log q(x)` with the latent draws, and the
/// decoder means they produce, fixed up front. Reusing one set of draws for
/// many points keeps slices smooth and costs one decoder pass per draw.
#[derive(Clone, Debug)]
pub struct MarginalEstimator {
    means: Vec<Vec<f64>>,
    log_var: Vec<f64>,
}

impl MarginalEstimator {
    pub fn new<R: Rng + ?Sized>(model: &CgModel, n: usize, rng: &mut R) -> Result<Self> {
        require_samples(n)?;
        let zs = model.sample_prior(n, rng)?;
        let means = zs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut ws = model.workspace();
                chunk.iter().map(|z| model.decoder_mean(&mut ws, z)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(MarginalEstimator {
            means,
            log_var: model.decoder_log_var().0,
        })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn log_q(&self, x: &[f64]) -> Result<Estimate> {
        check_dim("configuration", self.log_var.len(), x.len())?;
        let terms: Vec<f64> = self
            .means
            .iter()
            .map(|m| diag_gaussian_log_density(x, m, &self.log_var))
            .collect();
        Ok(log_mean_exp_estimate(&terms))
    }

    pub fn log_q_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Estimate>> {
        xs.par_iter().map(|x| self.log_q(x)).collect()
    }
}

/// `log mean exp(t)` with a delta-method standard error.
fn log_mean_exp_estimate(terms: &[f64]) -> Estimate {
    let value = stats::log_mean_exp(terms);
    let w: Vec<f64> = terms.iter().map(|t| (t - value).exp()).collect();
    Estimate {
        value,
        std_err: stats::std_err(&w),
    }
}

/// `log q(x)` from `n` latent draws.
pub fn log_marginal<R: Rng + ?Sized>(
    model: &CgModel,
    x: &[f64],
    n: usize,
    method: MarginalMethod,
    rng: &mut R,
) -> Result<Estimate> {
    require_samples(n)?;
    match method {
        MarginalMethod::Prior => MarginalEstimator::new(model, n, rng)?.log_q(x),
        MarginalMethod::Encoder => {
            let mut ws = model.workspace();
            let enc = model.encode(&mut ws, x)?;
            let sd: Vec<f64> = enc.log_var.iter().map(|s| (0.5 * s).exp()).collect();
            let mut terms = Vec::with_capacity(n);
            for _ in 0..n {
                let z: Vec<f64> = enc
                    .mean
                    .iter()
                    .zip(&sd)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                let log_r = diag_gaussian_log_density(&z, &enc.mean, &enc.log_var);
                terms.push(model.log_q_joint(&mut ws, x, &z)? - log_r);
            }
            Ok(log_mean_exp_estimate(&terms))
        }
    }
}

/// One point of a predicted-potential slice, in reduced units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePoint {
    pub x: Vec<f64>,
    /// `beta U(x)`.
    pub reduced_energy: f64,
    pub log_q: f64,
    /// `-log q(x)` shifted so its minimum over the slice equals that of `beta U`.
    pub predicted: f64,
}

/// Predicted potential `-log q(x) / beta` along a set of points, returned in
/// reduced units (`beta` times the potential) and aligned at the slice minimum.
pub fn predicted_potential(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    points: &[Vec<f64>],
    estimator: &MarginalEstimator,
) -> Result<Vec<SlicePoint>> {
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("predicted potential needs beta > 0, got {beta}")));
    }
    check_dim("potential dimension", model.n_f(), potential.dim())?;
    let log_q = estimator.log_q_many(points)?;
    let energies = points
        .iter()
        .map(|x| potential.energy(x).map(|u| beta * u))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = log_q.iter().map(|e| -e.value).collect();
    let min_raw = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let min_u = energies.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(points
        .iter()
        .zip(&energies)
        .zip(log_q.iter().zip(&raw))
        .map(|((x, &e), (lq, &r))| SlicePoint {
            x: x.clone(),
            reduced_energy: e,
            log_q: lq.value,
            predicted: r - min_raw + min_u,
        })
        .collect())
}

/// Points `(x1, fixed...)` evenly spaced over `[lo, hi]` in the first coordinate.
pub fn slice_points(lo: f64, hi: f64, n: usize, rest: &[f64]) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let mut x = vec![lo + t * (hi - lo)];
            x.extend_from_slice(rest);
            x
        })
        .collect()
}

/// Indices of strict interior local minima.
pub fn local_minima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] < values[i - 1] && values[i] < values[i + 1])
        .collect()
}

/// `log Z - L`, the reverse-KL bound; without a reference `log Z` only `-L` is known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlBound {
    pub value: f64,
    pub std_err: f64,
    pub has_reference: bool,
}

pub fn reverse_kl_bound<R: Rng + ?Sized>(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    j: usize,
    log_z: Option<f64>,
    rng: &mut R,
) -> Result<KlBound> {
    let est = estimate_objective(model, potential, beta, j, rng)?;
    Ok(KlBound {
        value: log_z.unwrap_or(0.0) - est.total,
        std_err: est.std_err,
        has_reference: log_z.is_some(),
    })
}

/// `D(p || q) = -<log q>_p - H(p)`, with `H(p)` from quadrature and `log q`
/// from the prior-sampling estimator.
pub fn forward_kl_estimate(
    estimator: &MarginalEstimator,
    reference_samples: &[Vec<f64>],
    oracle: &QuadratureResult,
) -> Result<Estimate> {
    if reference_samples.is_empty() {
        return Err(Error::InvalidArgument("no reference samples".into()));
    }
    let log_q = estimator.log_q_many(reference_samples)?;
    let neg: Vec<f64> = log_q.iter().map(|e| -e.value).collect();
    let cross = Estimate::from_samples(&neg);
    Ok(Estimate {
        value: cross.value - oracle.entropy,
        std_err: cross.std_err,
    })
}

/// Lower bound on `H(q(x))`: `H(q(x, z)) + <log r(z|x)>_q`.
pub fn entropy_lower_bound<R: Rng + ?Sized>(model: &CgModel, j: usize, rng: &mut R) -> Result<Estimate> {
    require_samples(j)?;
    let samples = model.ancestral_sample(j, rng)?;
    let mut ws = model.workspace();
    let log_r = samples
        .iter()
        .map(|s| model.log_r_z_given_x(&mut ws, &s.z, &s.x))
        .collect::<Result<Vec<_>>>()?;
    let e = Estimate::from_samples(&log_r);
    Ok(Estimate {
        value: model.joint_entropy() + e.value,
        std_err: e.std_err,
    })
}

/// Upper bound on `H(q(x))`: `< -log q(x|z) - log q(z) + log r(z|x) >` with
/// `x ~ q(x)` and `z ~ r(z|x)`.
pub fn entropy_upper_bound<R: Rng + ?Sized>(model: &CgModel, j: usize, rng: &mut R) -> Result<Estimate> {
    require_samples(j)?;
    let samples = model.ancestral_sample(j, rng)?;
    let mut ws = model.workspace();
    let mut values = Vec::with_capacity(j);
    for s in &samples {
        let enc = model.encode(&mut ws, &s.x)?;
        let z: Vec<f64> = enc
            .mean
            .iter()
            .zip(&enc.log_var)
            .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let log_r = diag_gaussian_log_density(&z, &enc.mean, &enc.log_var);
        values.push(log_r - model.log_q_joint(&mut ws, &s.x, &z)?);
    }
    Ok(Estimate::from_samples(&values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvAssignment {
    pub x: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_sigma: Vec<f64>,
}

/// Encoder mean and standard deviation for each configuration.
pub fn assign_cvs(model: &CgModel, xs: &[Vec<f64>]) -> Result<Vec<CvAssignment>> {
    let chunks = xs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = model.workspace();
            chunk
                .iter()
                .map(|x| {
                    let enc = model.encode(&mut ws, x)?;
                    Ok(CvAssignment {
                        x: x.clone(),
                        z_mean: enc.mean,
                        z_sigma: enc.log_var.iter().map(|s| (0.5 * s).exp()).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Named scalar function of a configuration.
pub struct ObservableFn {
    pub name: String,
    pub units: String,
    pub f: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl ObservableFn {
    pub fn new(name: impl Into<String>, units: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ObservableFn {
            name: name.into(),
            units: units.into(),
            f: Box::new(f),
        }
    }

    /// Sample average with standard error.
    pub fn average(&self, samples: &[Vec<f64>]) -> Result<Estimate> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!("no samples to average {}", self.name)));
        }
        let values: Vec<f64> = samples.iter().map(|x| (self.f)(x)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("observable {}", self.name)));
        }
        Ok(Estimate::from_samples(&values))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn moments(samples: &[Vec<f64>]) -> Result<Moments> {
    let (mean, std) = crate::reference::sample_moments(samples)?;
    Ok(Moments { mean, std })
}

/// Moments under normalized non-negative weights (population variance).
pub fn weighted_moments(points: &[Vec<f64>], weights: &[f64]) -> Result<Moments> {
    check_dim("weights", points.len(), weights.len())?;
    let total: f64 = weights.iter().sum();
    if points.is_empty() || !(total > 0.0) {
        return Err(Error::InvalidArgument("weighted moments need positive total weight".into()));
    }
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for (x, w) in points.iter().zip(weights) {
        for j in 0..d {
            mean[j] += w * x[j];
            sq[j] += w * x[j] * x[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let std = sq.iter().zip(&mean).map(|(s, m)| (s / total - m * m).max(0.0).sqrt()).collect();
    Ok(Moments { mean, std })
}

/// Axes and binning of a 2-D histogram over coordinates `dims`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistSpec {
    pub dims: (usize, usize),
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub bins: (usize, usize),
}

impl HistSpec {
    pub fn double_well() -> Self {
        HistSpec {
            dims: (0, 1),
            x_range: (-4.0, 4.0),
            y_range: (-4.0, 4.0),
            bins: (80, 80),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub spec: HistSpec,
    /// Row-major `bins.0 x bins.1` frequencies over the in-range samples.
    pub freq: Vec<f64>,
    pub outside: usize,
}

impl Histogram2D {
    pub fn bin_centre(&self, i: usize, j: usize) -> (f64, f64) {
        let s = &self.spec;
        let hx = (s.x_range.1 - s.x_range.0) / s.bins.0 as f64;
        let hy = (s.y_range.1 - s.y_range.0) / s.bins.1 as f64;
        (s.x_range.0 + (i as f64 + 0.5) * hx, s.y_range.0 + (j as f64 + 0.5) * hy)
    }
}

pub fn histogram2d(samples: &[Vec<f64>], spec: &HistSpec) -> Result<Histogram2D> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("histogram of no samples".into()));
    }
    let (nx, ny) = spec.bins;
    if nx == 0 || ny == 0 || !(spec.x_range.1 > spec.x_range.0) || !(spec.y_range.1 > spec.y_range.0) {
        return Err(Error::InvalidArgument(format!("bad histogram spec {spec:?}")));
    }
    let (a, b) = spec.dims;
    let mut counts = vec![0usize; nx * ny];
    let mut outside = 0;
    for s in samples {
        let (Some(&x), Some(&y)) = (s.get(a), s.get(b)) else {
            return Err(Error::InvalidArgument("histogram axis beyond sample dimension".into()));
        };
        let fx = (x - spec.x_range.0) / (spec.x_range.1 - spec.x_range.0);
        let fy = (y - spec.y_range.0) / (spec.y_range.1 - spec.y_range.0);
        if !(0.0..1.0).contains(&fx) || !(0.0..1.0).contains(&fy) {
            outside += 1;
            continue;
        }
        counts[(fx * nx as f64) as usize * ny + (fy * ny as f64) as usize] += 1;
    }
    let inside = samples.len() - outside;
    if inside == 0 {
        return Err(Error::InvalidArgument("every sample lies outside the histogram".into()));
    }
    Ok(Histogram2D {
        spec: spec.clone(),
        freq: counts.iter().map(|&c| c as f64 / inside as f64).collect(),
        outside,
    })
}

/// Mass-weighted RMS distance of particles from their centre of mass;
/// `x` holds `masses.len()` particles of `spatial_dim` coordinates each.
pub fn radius_of_gyration(x: &[f64], masses: &[f64], spatial_dim: usize) -> Result<f64> {
    if spatial_dim == 0 {
        return Err(Error::InvalidArgument("spatial dimension must be positive".into()));
    }
    check_dim("particle coordinates", masses.len() * spatial_dim, x.len())?;
    if masses.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidArgument("particle masses must be positive".into()));
    }
    let total: f64 = masses.iter().sum();
    let mut com = vec![0.0; spatial_dim];
    for (p, m) in x.chunks_exact(spatial_dim).zip(masses) {
        for (c, v) in com.iter_mut().zip(p) {
            *c += m * v;
        }
    }
    com.iter_mut().for_each(|c| *c /= total);
    let ss: f64 = x
        .chunks_exact(spatial_dim)
        .zip(masses)
        .map(|(p, m)| m * p.iter().zip(&com).map(|(v, c)| (v - c) * (v - c)).sum::<f64>())
        .sum();
    Ok((ss / total).sqrt())
}
