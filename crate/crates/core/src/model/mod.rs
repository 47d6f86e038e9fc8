//! Generative coarse-grained model: latent prior `q(z)`, Gaussian decoder
//! `q(x|z)` with a network mean and free diagonal variance, and Gaussian
//! encoder `r(z|x)` with network mean and log-variance heads on a shared trunk.

mod checkpoint;

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ActivationKind, ExprGraph, GraphBuilder, ParamLayout, ParamVector};
use crate::error::{check_dim, Error, Result};

pub use checkpoint::Checkpoint;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds on the decoder log-variances before exponentiation.
pub const DECODER_LOG_VAR_CLAMP: (f64, f64) = (-20.0, 20.0);
/// Bounds on the encoder log-variance head.
pub const ENCODER_LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// One linear map followed by an elementwise activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub activation: ActivationKind,
}

impl LayerSpec {
    pub fn new(d_in: usize, d_out: usize, activation: ActivationKind) -> Self {
        LayerSpec {
            d_in,
            d_out,
            activation,
        }
    }
}

/// Network shapes. The decoder list ends in the layer producing `n_f`
/// outputs; the encoder trunk is followed by two implied linear heads of
/// width `n_c` (mean and log-variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_c: usize,
    pub n_f: usize,
    pub decoder: Vec<LayerSpec>,
    pub encoder_trunk: Vec<LayerSpec>,
}

impl Architecture {
    /// Encoder SeLu-SeLu-Tanh trunk and decoder Tanh-Tanh, all hidden widths `width`.
    pub fn mlp(n_c: usize, n_f: usize, width: usize) -> Self {
        Architecture {
            n_c,
            n_f,
            encoder_trunk: vec![
                LayerSpec::new(n_f, width, ActivationKind::selu()),
                LayerSpec::new(width, width, ActivationKind::selu()),
                LayerSpec::new(width, width, ActivationKind::Tanh),
            ],
            decoder: vec![
                LayerSpec::new(n_c, width, ActivationKind::Tanh),
                LayerSpec::new(width, width, ActivationKind::Tanh),
                LayerSpec::new(width, n_f, ActivationKind::Identity),
            ],
        }
    }

    /// [`Architecture::mlp`] with one latent and two observed coordinates.
    pub fn double_well(width: usize) -> Self {
        Self::mlp(1, 2, width)
    }

    /// Affine decoder and affine encoder heads (no hidden layers).
    pub fn linear_gaussian(n_c: usize, n_f: usize) -> Self {
        Architecture {
            n_c,
            n_f,
            decoder: vec![LayerSpec::new(n_c, n_f, ActivationKind::Identity)],
            encoder_trunk: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.n_f == 0 {
            return Err(Error::Config("n_c and n_f must be positive".into()));
        }
        if self.decoder.is_empty() {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        check_chain("decoder", &self.decoder, self.n_c, Some(self.n_f))?;
        check_chain("encoder trunk", &self.encoder_trunk, self.n_f, None)
    }

}

fn check_chain(name: &str, layers: &[LayerSpec], d_in: usize, d_out: Option<usize>) -> Result<()> {
    let mut expected = d_in;
    for (i, layer) in layers.iter().enumerate() {
        if layer.d_in != expected {
            return Err(Error::Config(format!(
                "{name} layer {} takes {} inputs but receives {expected}",
                i + 1,
                layer.d_in
            )));
        }
        if layer.d_out == 0 {
            return Err(Error::Config(format!("{name} layer {} has zero width", i + 1)));
        }
        expected = layer.d_out;
    }
    if let Some(d_out) = d_out {
        if expected != d_out {
            return Err(Error::Config(format!(
                "{name} produces {expected} outputs, expected {d_out}"
            )));
        }
    }
    Ok(())
}

/// `q(z) = N(0, I)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentPrior {
    pub n_c: usize,
}

impl LatentPrior {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        -0.5 * (self.n_c as f64 * LN_2PI + z.iter().map(|v| v * v).sum::<f64>())
    }

    pub fn entropy(&self) -> f64 {
        0.5 * self.n_c as f64 * (1.0 + LN_2PI)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one prior sample".into()));
        }
        Ok((0..n).map(|_| standard_normal(self.n_c, rng)).collect())
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Decoder mean network plus the range of its free log-variances.
#[derive(Clone, Debug)]
pub struct Decoder {
    graph: ExprGraph,
    log_var: Range<usize>,
}

/// Encoder trunk with mean and log-variance heads (graph outputs 0 and 1).
#[derive(Clone, Debug)]
pub struct Encoder {
    graph: ExprGraph,
}

/// Mutable per-thread evaluation state (graph value caches).
#[derive(Clone, Debug)]
pub struct Workspace {
    pub(crate) decoder: ExprGraph,
    pub(crate) encoder: ExprGraph,
}

/// Frozen randomness for one joint draw: latent `z ~ N(0, I)` and decoder noise `eps ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointNoise {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

/// One draw from `q(x, z)` together with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub x: Vec<f64>,
}

/// Encoder output for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mean: Vec<f64>,
    /// Clamped log-variance.
    pub log_var: Vec<f64>,
    /// Number of coordinates that hit the clamp.
    pub clamped: usize,
}

#[derive(Clone, Debug)]
pub struct CgModel {
    arch: Architecture,
    prior: LatentPrior,
    decoder: Decoder,
    encoder: Encoder,
    theta: ParamLayout,
    phi: ParamLayout,
    params: ParamVector,
}

impl CgModel {
    /// Builds the networks with uniform `[-1/sqrt(d_in), 1/sqrt(d_in)]`
    /// weights, zero biases and unit decoder variances.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        model.initialize(rng);
        Ok(model)
    }

    /// All parameters zero (unit decoder variance, zero weights).
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut theta = ParamLayout::new();
        let mut b = GraphBuilder::new(arch.n_c);
        let mut node = b.input();
        for (i, layer) in arch.decoder.iter().enumerate() {
            node = b.linear(&mut theta, &format!("dec.l{}", i + 1), node, layer.d_out);
            if layer.activation != ActivationKind::Identity {
                node = b.activation(layer.activation, node);
            }
        }
        let dec_graph = b.finish(&[node]);
        let log_var = theta.push("dec.log_var", arch.n_f, 1);

        let mut phi = ParamLayout::starting_at(theta.end());
        let mut b = GraphBuilder::new(arch.n_f);
        let mut node = b.input();
        for (i, layer) in arch.encoder_trunk.iter().enumerate() {
            node = b.linear(&mut phi, &format!("enc.l{}", i + 1), node, layer.d_out);
            if layer.activation != ActivationKind::Identity {
                node = b.activation(layer.activation, node);
            }
        }
        let mu = b.linear(&mut phi, "enc.mu", node, arch.n_c);
        let sig = b.linear(&mut phi, "enc.log_var", node, arch.n_c);
        let enc_graph = b.finish(&[mu, sig]);

        let layout = ParamLayout::concat(&[&theta, &phi])?;
        Ok(CgModel {
            prior: LatentPrior { n_c: arch.n_c },
            decoder: Decoder {
                graph: dec_graph,
                log_var,
            },
            encoder: Encoder { graph: enc_graph },
            theta,
            phi,
            params: ParamVector::zeros(layout),
            arch,
        })
    }

    fn initialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let layers: Vec<_> = self
            .decoder
            .graph
            .linear_layers()
            .chain(self.encoder.graph.linear_layers())
            .copied()
            .collect();
        let values = self.params.values_mut();
        for layer in layers {
            let bound = 1.0 / (layer.d_in as f64).sqrt();
            for w in &mut values[layer.weight_range()] {
                *w = rng.random_range(-bound..=bound);
            }
            values[layer.bias_range()].iter_mut().for_each(|b| *b = 0.0);
        }
        values[self.decoder.log_var.clone()]
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }

    /// Affine model whose joint exactly matches `exp(-beta k |x|^2 / 2)` in
    /// `n_f` dimensions, with the encoder equal to the true posterior.
    ///
    /// With `v = 1/(beta k)` the decoder maps `z` onto `x1` with slope
    /// `sqrt(v/2)` and variances `(v/2, v, ..., v)`; the posterior of `z` is
    /// `N(x1 sqrt(v/2) / v, 1/2)`.
    pub fn harmonic_optimum(n_f: usize, stiffness: f64, beta: f64) -> Result<Self> {
        if !(stiffness > 0.0 && beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "harmonic optimum needs stiffness > 0 and beta > 0 (got {stiffness}, {beta})"
            )));
        }
        let mut m = Self::zeroed(Architecture::linear_gaussian(1, n_f))?;
        let v = 1.0 / (beta * stiffness);
        let s = (0.5 * v).sqrt();
        let p = m.params_mut();
        p.block_mut("dec.l1.weight").expect("decoder weight")[0] = s;
        let lv = p.block_mut("dec.log_var").expect("decoder log-variance");
        lv.iter_mut().for_each(|x| *x = v.ln());
        lv[0] = (v - s * s).ln();
        p.block_mut("enc.mu.weight").expect("encoder mean")[0] = s / v;
        p.block_mut("enc.log_var.bias").expect("encoder log-variance")[0] = ((v - s * s) / v).ln();
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_c(&self) -> usize {
        self.arch.n_c
    }

    pub fn n_f(&self) -> usize {
        self.arch.n_f
    }

    pub fn prior(&self) -> LatentPrior {
        self.prior
    }

    /// Decoder parameters (theta): mean network and log-variances.
    pub fn theta_layout(&self) -> &ParamLayout {
        &self.theta
    }

    /// Encoder parameters (phi).
    pub fn phi_layout(&self) -> &ParamLayout {
        &self.phi
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        check_dim("model parameters", self.params.len(), values.len())?;
        self.params.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn decoder_log_var_range(&self) -> Range<usize> {
        self.decoder.log_var.clone()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            decoder: self.decoder.graph.clone(),
            encoder: self.encoder.graph.clone(),
        }
    }

    /// Clamped decoder log-variances and how many were clamped.
    pub fn decoder_log_var(&self) -> (Vec<f64>, usize) {
        let (lo, hi) = DECODER_LOG_VAR_CLAMP;
        let raw = &self.params.values()[self.decoder.log_var.clone()];
        let clamped = raw.iter().filter(|v| **v < lo || **v > hi).count();
        (raw.iter().map(|v| v.clamp(lo, hi)).collect(), clamped)
    }

    pub fn decoder_sigma(&self) -> Vec<f64> {
        self.decoder_log_var()
            .0
            .iter()
            .map(|s| (0.5 * s).exp())
            .collect()
    }

    pub fn decoder_mean(&self, ws: &mut Workspace, z: &[f64]) -> Result<Vec<f64>> {
        ws.decoder.forward(self.params.values(), z)
    }

    /// `x = mu(z) + sigma * eps`.
    pub fn reparametrize(&self, ws: &mut Workspace, z: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        check_dim("decoder noise", self.n_f(), eps.len())?;
        let mut x = self.decoder_mean(ws, z)?;
        for ((xi, s), e) in x.iter_mut().zip(self.decoder_sigma()).zip(eps) {
            *xi += s * e;
        }
        Ok(x)
    }

    pub fn encode(&self, ws: &mut Workspace, x: &[f64]) -> Result<EncoderOutput> {
        ws.encoder.evaluate(self.params.values(), x)?;
        let (lo, hi) = ENCODER_LOG_VAR_CLAMP;
        let raw = ws.encoder.output(1);
        Ok(EncoderOutput {
            mean: ws.encoder.output(0).to_vec(),
            log_var: raw.iter().map(|v| v.clamp(lo, hi)).collect(),
            clamped: raw.iter().filter(|v| **v < lo || **v > hi).count(),
        })
    }

    pub fn log_q_z(&self, z: &[f64]) -> Result<f64> {
        check_dim("latent", self.n_c(), z.len())?;
        Ok(self.prior.log_density(z))
    }

    pub fn log_q_x_given_z(&self, ws: &mut Workspace, x: &[f64], z: &[f64]) -> Result<f64> {
        check_dim("configuration", self.n_f(), x.len())?;
        let mu = self.decoder_mean(ws, z)?;
        let (log_var, _) = self.decoder_log_var();
        Ok(diag_gaussian_log_density(x, &mu, &log_var))
    }

    pub fn log_r_z_given_x(&self, ws: &mut Workspace, z: &[f64], x: &[f64]) -> Result<f64> {
        check_dim("latent", self.n_c(), z.len())?;
        let enc = self.encode(ws, x)?;
        Ok(diag_gaussian_log_density(z, &enc.mean, &enc.log_var))
    }

    /// `log q(x, z) = log q(z) + log q(x|z)`.
    pub fn log_q_joint(&self, ws: &mut Workspace, x: &[f64], z: &[f64]) -> Result<f64> {
        Ok(self.log_q_z(z)? + self.log_q_x_given_z(ws, x, z)?)
    }

    /// Closed-form `H(q(x, z)) = H(q(z)) + H(q(x|z))`; the decoder variance does not depend on `z`.
    pub fn joint_entropy(&self) -> f64 {
        let (log_var, _) = self.decoder_log_var();
        self.prior.entropy() + 0.5 * log_var.iter().map(|s| 1.0 + LN_2PI + s).sum::<f64>()
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        self.prior.sample(n, rng)
    }

    /// Noise for `n` joint draws: each draw takes `z` then `eps` from the stream.
    pub fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<JointNoise>> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        Ok((0..n)
            .map(|_| {
                let z = standard_normal(self.n_c(), rng);
                let eps = standard_normal(self.n_f(), rng);
                JointNoise { z, eps }
            })
            .collect())
    }

    /// Ancestral sampling: `z ~ q(z)`, then `x = mu(z) + sigma * eps`.
    pub fn ancestral_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<JointSample>> {
        let noise = self.sample_noise(n, rng)?;
        let mut ws = self.workspace();
        noise
            .into_iter()
            .map(|JointNoise { z, eps }| {
                let x = self.reparametrize(&mut ws, &z, &eps)?;
                Ok(JointSample { z, eps, x })
            })
            .collect()
    }
}

/// `log N(x; mu, diag(exp(log_var)))`.
pub fn diag_gaussian_log_density(x: &[f64], mu: &[f64], log_var: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(log_var)
        .map(|((x, m), s)| -0.5 * (LN_2PI + s + (x - m) * (x - m) * (-s).exp()))
        .sum()
}

/// Entropy of a diagonal Gaussian with the given log-variances.
pub fn diag_gaussian_entropy(log_var: &[f64]) -> f64 {
    0.5 * log_var.iter().map(|s| 1.0 + (2.0 * PI).ln() + s).sum::<f64>()
}
