//! The training bound
//!
//! ```text
//! L(phi, theta) = -<beta U(x)>  +  <log r(z|x)>  +  H(q(x, z))
//!                  energy          reconstruction   entropy (closed form)
//! ```
//!
//! with expectations under the joint `q(x, z)`, its reparametrized gradient
//! (forces enter through `x = mu(z) + sigma * eps`), per-sample gradient
//! normalization, and ADAM. `L` is maximized; ADAM minimizes `-L`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{
    CgModel, JointNoise, Workspace, DECODER_LOG_VAR_CLAMP, ENCODER_LOG_VAR_CLAMP,
};
use crate::potentials::Potential;
use crate::stats;

/// Reduced energies above this (or non-finite) are replaced by it, with zero force.
pub const ENERGY_CAP: f64 = 1e12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    pub total: f64,
    /// `-beta <U>`
    pub term_energy: f64,
    /// `<log r(z|x)>`
    pub term_recon: f64,
    /// `H(q(x, z))`
    pub term_entropy: f64,
    pub j: usize,
    pub std_err: f64,
    /// Samples whose energy hit [`ENERGY_CAP`].
    pub capped: usize,
    /// Encoder or decoder log-variance components that hit their clamp.
    pub clamped: usize,
}

/// Per-sample quantities at `x = mu(z) + sigma * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTerms {
    pub x: Vec<f64>,
    /// `beta * U(x)` after capping.
    pub energy: f64,
    pub log_r: f64,
    /// `log q(x, z)`.
    pub log_q: f64,
    pub capped: bool,
    pub clamped: usize,
}

impl SampleTerms {
    /// `-beta U + log r`, the sampled part of the bound.
    pub fn sampled_objective(&self) -> f64 {
        self.log_r - self.energy
    }
}

/// Decoder scale shared by every sample of a batch.
struct DecoderScale {
    log_var: Vec<f64>,
    sigma: Vec<f64>,
    active: Vec<bool>,
    clamped: usize,
}

impl DecoderScale {
    fn of(model: &CgModel) -> Self {
        let (lo, hi) = DECODER_LOG_VAR_CLAMP;
        let raw = &model.params().values()[model.decoder_log_var_range()];
        let (log_var, clamped) = model.decoder_log_var();
        DecoderScale {
            sigma: log_var.iter().map(|s| (0.5 * s).exp()).collect(),
            active: raw.iter().map(|v| (lo..=hi).contains(v)).collect(),
            log_var,
            clamped,
        }
    }
}

pub(crate) fn capped_energy(potential: &dyn Potential, x: &[f64], beta: f64) -> Result<(f64, Vec<f64>, bool)> {
    let (e, g) = potential.reduced_energy_grad(x, beta)?;
    if e.is_finite() && e <= ENERGY_CAP && g.iter().all(|v| v.is_finite()) {
        Ok((e, g, false))
    } else {
        Ok((ENERGY_CAP, vec![0.0; x.len()], true))
    }
}

/// Evaluates one sample; with `grad`, adds the gradient of
/// `-beta U + log r + H` with respect to all parameters into it.
fn eval_sample(
    model: &CgModel,
    ws: &mut Workspace,
    scale: &DecoderScale,
    potential: &dyn Potential,
    beta: f64,
    noise: &JointNoise,
    grad: Option<&mut [f64]>,
) -> Result<SampleTerms> {
    let params = model.params().values();
    check_dim("latent noise", model.n_c(), noise.z.len())?;
    check_dim("decoder noise", model.n_f(), noise.eps.len())?;
    ws.decoder.evaluate(params, &noise.z)?;
    let x: Vec<f64> = ws
        .decoder
        .output(0)
        .iter()
        .zip(&scale.sigma)
        .zip(&noise.eps)
        .map(|((m, s), e)| m + s * e)
        .collect();
    let (energy, energy_grad, capped) = capped_energy(potential, &x, beta)?;

    ws.encoder.evaluate(params, &x)?;
    let (lo, hi) = ENCODER_LOG_VAR_CLAMP;
    let n_c = model.n_c();
    let mut log_r = 0.0;
    let mut clamped = scale.clamped;
    let mut seed = vec![0.0; 2 * n_c];
    {
        let mean = ws.encoder.output(0);
        let raw = ws.encoder.output(1);
        for j in 0..n_c {
            let active = (lo..=hi).contains(&raw[j]);
            clamped += usize::from(!active);
            let s = raw[j].clamp(lo, hi);
            let inv_var = (-s).exp();
            let r = noise.z[j] - mean[j];
            log_r -= 0.5 * (LN_2PI + s + r * r * inv_var);
            seed[j] = r * inv_var;
            seed[n_c + j] = if active { 0.5 * (r * r * inv_var - 1.0) } else { 0.0 };
        }
    }
    let log_q = model.prior().log_density(&noise.z)
        - 0.5
            * scale
                .log_var
                .iter()
                .zip(&noise.eps)
                .map(|(s, e)| LN_2PI + s + e * e)
                .sum::<f64>();

    if let Some(grad) = grad {
        let mut gx = ws.encoder.backward(params, &seed, grad)?;
        for (g, de) in gx.iter_mut().zip(&energy_grad) {
            *g -= de;
        }
        ws.decoder.backward(params, &gx, grad)?;
        for (j, idx) in model.decoder_log_var_range().enumerate() {
            if scale.active[j] {
                grad[idx] += 0.5 * (gx[j] * noise.eps[j] * scale.sigma[j] + 1.0);
            }
        }
    }

    Ok(SampleTerms {
        x,
        energy,
        log_r,
        log_q,
        capped,
        clamped,
    })
}

fn check_potential(model: &CgModel, potential: &dyn Potential, beta: f64) -> Result<()> {
    check_dim("potential dimension", model.n_f(), potential.dim())?;
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    Ok(())
}

/// Per-sample terms for frozen noise.
pub fn sample_terms(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    noise: &[JointNoise],
) -> Result<Vec<SampleTerms>> {
    check_potential(model, potential, beta)?;
    let scale = DecoderScale::of(model);
    let chunks: Vec<Result<Vec<SampleTerms>>> = noise
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = model.workspace();
            chunk
                .iter()
                .map(|n| eval_sample(model, &mut ws, &scale, potential, beta, n, None))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(noise.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Assembles the estimate from per-sample terms.
pub fn summarize(model: &CgModel, terms: &[SampleTerms]) -> ObjectiveEstimate {
    let sampled: Vec<f64> = terms.iter().map(SampleTerms::sampled_objective).collect();
    let energies: Vec<f64> = terms.iter().map(|t| t.energy).collect();
    let recon: Vec<f64> = terms.iter().map(|t| t.log_r).collect();
    let term_energy = -stats::mean(&energies);
    let term_recon = stats::mean(&recon);
    let term_entropy = model.joint_entropy();
    ObjectiveEstimate {
        total: term_energy + term_recon + term_entropy,
        term_energy,
        term_recon,
        term_entropy,
        j: terms.len(),
        std_err: stats::std_err(&sampled),
        capped: terms.iter().filter(|t| t.capped).count(),
        clamped: terms.iter().map(|t| t.clamped).sum(),
    }
}

pub fn objective_with_noise(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    noise: &[JointNoise],
) -> Result<ObjectiveEstimate> {
    if noise.len() < 2 {
        return Err(Error::InvalidArgument("objective needs J >= 2 samples".into()));
    }
    Ok(summarize(model, &sample_terms(model, potential, beta, noise)?))
}

pub fn estimate_objective<R: Rng + ?Sized>(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    j: usize,
    rng: &mut R,
) -> Result<ObjectiveEstimate> {
    if j < 2 {
        return Err(Error::InvalidArgument("objective needs J >= 2 samples".into()));
    }
    let noise = model.sample_noise(j, rng)?;
    objective_with_noise(model, potential, beta, &noise)
}

/// Materialized per-sample gradients of the bound.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBatch {
    pub grads: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
    pub mean_norm: f64,
    pub l_max: f64,
    pub rescaled: usize,
}

impl GradBatch {
    pub fn new(grads: Vec<Vec<f64>>) -> Result<Self> {
        if grads.is_empty() {
            return Err(Error::InvalidArgument("gradient batch is empty".into()));
        }
        let norms: Vec<f64> = grads.iter().map(|g| l2(g)).collect();
        let mean_norm = stats::mean(&norms);
        Ok(GradBatch {
            grads,
            norms,
            mean_norm,
            l_max: f64::INFINITY,
            rescaled: 0,
        })
    }

    /// Sample mean of the (possibly rescaled) gradients.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grads[0].len()];
        for g in &self.grads {
            for (o, v) in out.iter_mut().zip(g) {
                *o += v;
            }
        }
        let n = self.grads.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Caps every per-sample norm at `kappa` times the batch mean norm.
pub fn normalize_gradients(mut batch: GradBatch, kappa: f64) -> Result<GradBatch> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    let l_max = kappa * batch.mean_norm;
    batch.l_max = l_max;
    batch.rescaled = 0;
    for (g, l) in batch.grads.iter_mut().zip(batch.norms.iter_mut()) {
        if *l > l_max {
            let f = l_max / *l;
            g.iter_mut().for_each(|v| *v *= f);
            *l = l_max;
            batch.rescaled += 1;
        }
    }
    Ok(batch)
}

/// Per-sample gradients of `-beta U + log r + H`, one vector per noise draw.
pub fn per_sample_gradients(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    noise: &[JointNoise],
) -> Result<GradBatch> {
    check_potential(model, potential, beta)?;
    let scale = DecoderScale::of(model);
    let mut ws = model.workspace();
    let grads = noise
        .iter()
        .map(|n| {
            let mut g = vec![0.0; model.num_params()];
            eval_sample(model, &mut ws, &scale, potential, beta, n, Some(&mut g))?;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    GradBatch::new(grads)
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GradTelemetry {
    pub mean_norm: f64,
    pub l_max: f64,
    pub rescaled: usize,
    /// Norm of the returned batch gradient.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    /// Gradient of `L` (ascent direction).
    pub grad: Vec<f64>,
    pub objective: ObjectiveEstimate,
    pub telemetry: GradTelemetry,
}

/// Reparametrized gradient of the bound for frozen noise.
///
/// With `kappa`, per-sample gradients above `kappa` times the mean norm are
/// rescaled. Per-sample gradients are never stored: norms are collected on a
/// first pass and the few rescaled samples are recomputed and corrected.
pub fn gradient_with_noise(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    noise: &[JointNoise],
    kappa: Option<f64>,
) -> Result<GradientEstimate> {
    check_potential(model, potential, beta)?;
    if noise.len() < 2 {
        return Err(Error::InvalidArgument("gradient needs J >= 2 samples".into()));
    }
    if let Some(k) = kappa {
        if !(k > 0.0) {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {k}")));
        }
    }
    let p = model.num_params();
    let scale = DecoderScale::of(model);

    type ChunkOut = (Vec<f64>, Vec<SampleTerms>, Vec<f64>);
    let chunks: Vec<Result<ChunkOut>> = noise
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = model.workspace();
            let mut sum = vec![0.0; p];
            let mut g = vec![0.0; p];
            let mut terms = Vec::with_capacity(chunk.len());
            let mut norms = Vec::with_capacity(chunk.len());
            for n in chunk {
                g.iter_mut().for_each(|v| *v = 0.0);
                terms.push(eval_sample(model, &mut ws, &scale, potential, beta, n, Some(&mut g))?);
                norms.push(l2(&g));
                for (s, v) in sum.iter_mut().zip(&g) {
                    *s += v;
                }
            }
            Ok((sum, terms, norms))
        })
        .collect();

    let mut total = vec![0.0; p];
    let mut terms = Vec::with_capacity(noise.len());
    let mut norms = Vec::with_capacity(noise.len());
    for c in chunks {
        let (sum, t, n) = c?;
        for (a, b) in total.iter_mut().zip(&sum) {
            *a += b;
        }
        terms.extend(t);
        norms.extend(n);
    }

    let mean_norm = stats::mean(&norms);
    let mut telemetry = GradTelemetry {
        mean_norm,
        l_max: f64::INFINITY,
        ..Default::default()
    };
    if let Some(k) = kappa {
        let l_max = k * mean_norm;
        telemetry.l_max = l_max;
        let mut ws = model.workspace();
        let mut g = vec![0.0; p];
        for (i, &l) in norms.iter().enumerate() {
            if l > l_max {
                g.iter_mut().for_each(|v| *v = 0.0);
                eval_sample(model, &mut ws, &scale, potential, beta, &noise[i], Some(&mut g))?;
                let shrink = 1.0 - l_max / l;
                for (a, v) in total.iter_mut().zip(&g) {
                    *a -= shrink * v;
                }
                telemetry.rescaled += 1;
            }
        }
    }
    let inv = 1.0 / noise.len() as f64;
    total.iter_mut().for_each(|v| *v *= inv);
    telemetry.grad_norm = l2(&total);
    Ok(GradientEstimate {
        grad: total,
        objective: summarize(model, &terms),
        telemetry,
    })
}

pub fn estimate_gradient<R: Rng + ?Sized>(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    j: usize,
    rng: &mut R,
    kappa: Option<f64>,
) -> Result<GradientEstimate> {
    let noise = model.sample_noise(j.max(1), rng)?;
    gradient_with_noise(model, potential, beta, &noise, kappa)
}

/// Largest componentwise relative error, with magnitudes floored at 1% of
/// the largest reference component so near-zero entries do not dominate.
pub fn max_rel_error(got: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    got.iter()
        .zip(reference)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-2 * scale))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub params: usize,
    pub samples: usize,
}

/// Compares the reparametrized gradient with central differences of the
/// objective, both with the same frozen noise.
pub fn gradient_check(
    model: &CgModel,
    potential: &dyn Potential,
    beta: f64,
    noise: &[JointNoise],
    h: f64,
) -> Result<GradCheck> {
    let g = gradient_with_noise(model, potential, beta, noise, None)?;
    let mut trial = model.clone();
    let mut failure = None;
    let fd = crate::autodiff::fd_gradient(
        |p| {
            let value = trial.set_values(p).and_then(|_| objective_with_noise(&trial, potential, beta, noise));
            match value {
                Ok(v) => v.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        model.params().values(),
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(GradCheck {
        max_rel_error: max_rel_error(&g.grad, &fd?),
        params: model.num_params(),
        samples: noise.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected ADAM moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            config,
        }
    }

    /// One descent step on `grad`. Nothing is modified if `grad` has a
    /// non-finite component.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim("adam gradient", self.m.len(), grad.len())?;
        check_dim("adam parameters", self.m.len(), params.len())?;
        if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index, value });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, grad: &[f64], params: &mut [f64]) -> Result<()> {
    state.step(params, grad)
}
