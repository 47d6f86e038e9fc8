//! Analytic potential energies in reduced units, with exact forces.
//!
//! Training only ever calls [`Potential::reduced_energy_grad`], which returns
//! `beta * U(x)` and its gradient. Keeping the contract that narrow lets an
//! external force provider stand in for the analytic kinds below.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Energy/force provider.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;

    /// `U(x)` and `F(x) = -grad U(x)`.
    fn energy_force(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn energy(&self, x: &[f64]) -> Result<f64> {
        self.energy_force(x).map(|(u, _)| u)
    }

    fn force(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.energy_force(x).map(|(_, f)| f)
    }

    /// `beta * U(x)` and its gradient with respect to `x`.
    fn reduced_energy_grad(&self, x: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
        let (u, mut f) = self.energy_force(x)?;
        f.iter_mut().for_each(|v| *v *= -beta);
        Ok((beta * u, f))
    }

    /// Whether `exp(-beta U)` stays integrable as `beta -> 0`.
    fn bounded_domain(&self) -> bool {
        false
    }
}

/// Configuration, energy and force at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergySample {
    pub x: Vec<f64>,
    pub u: f64,
    pub f: Vec<f64>,
}

impl EnergySample {
    pub fn evaluate(potential: &dyn Potential, x: &[f64]) -> Result<Self> {
        let (u, f) = potential.energy_force(x)?;
        Ok(EnergySample { x: x.to_vec(), u, f })
    }
}

fn default_tilt() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialSpec {
    /// `U(x) = x1^4/4 - 3 x1^2 + tilt * x1 + x2^2/2`.
    #[serde(rename = "double_well_2d")]
    DoubleWell2D {
        #[serde(default = "default_tilt")]
        tilt: f64,
    },
    /// `U(x) = k/2 |x|^2` in `dim` dimensions.
    Harmonic { dim: usize, stiffness: f64 },
    /// `U(x) = -log sum_k w_k N(x; m_k, diag(v_k))`.
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
    /// Confines `inner` to `[-b, b]^n`: `U(clamp(x)) + (u / beta) sum_i max(|x_i| - b, 0)`.
    AuxiliaryBounded {
        inner: Box<PotentialSpec>,
        half_width: f64,
        slope: f64,
    },
}

impl PotentialSpec {
    pub const AUX_HALF_WIDTH: f64 = 10.0;
    pub const AUX_SLOPE: f64 = 1000.0;

    pub fn double_well() -> Self {
        PotentialSpec::DoubleWell2D { tilt: 1.0 }
    }

    pub fn harmonic(dim: usize, stiffness: f64) -> Self {
        PotentialSpec::Harmonic { dim, stiffness }
    }

    /// Wraps `self` in the default auxiliary box.
    pub fn bounded(self) -> Self {
        self.bounded_with(Self::AUX_HALF_WIDTH, Self::AUX_SLOPE)
    }

    pub fn bounded_with(self, half_width: f64, slope: f64) -> Self {
        PotentialSpec::AuxiliaryBounded {
            inner: Box::new(self),
            half_width,
            slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PotentialSpec::DoubleWell2D { tilt } if !tilt.is_finite() => {
                Err(Error::Config("double well tilt must be finite".into()))
            }
            PotentialSpec::DoubleWell2D { .. } => Ok(()),
            PotentialSpec::Harmonic { dim, stiffness } => {
                if *dim == 0 || !(*stiffness > 0.0) {
                    Err(Error::Config(format!(
                        "harmonic needs dim >= 1 and stiffness > 0 (got {dim}, {stiffness})"
                    )))
                } else {
                    Ok(())
                }
            }
            PotentialSpec::GaussianMixture {
                weights,
                means,
                variances,
            } => {
                if weights.is_empty() || means.len() != weights.len() || variances.len() != weights.len()
                {
                    return Err(Error::Config(
                        "gaussian mixture needs matching non-empty weights, means, variances".into(),
                    ));
                }
                let d = means[0].len();
                if d == 0
                    || means.iter().any(|m| m.len() != d)
                    || variances.iter().any(|v| v.len() != d || v.iter().any(|s| !(*s > 0.0)))
                    || weights.iter().any(|w| !(*w > 0.0))
                {
                    return Err(Error::Config(
                        "gaussian mixture components need equal dimensions, positive weights and variances"
                            .into(),
                    ));
                }
                Ok(())
            }
            PotentialSpec::AuxiliaryBounded {
                inner,
                half_width,
                slope,
            } => {
                if !(*half_width > 0.0) || !(*slope > 0.0) {
                    return Err(Error::Config(format!(
                        "auxiliary box needs b > 0 and u > 0 (got {half_width}, {slope})"
                    )));
                }
                inner.validate()
            }
        }
    }

    /// `log int exp(-beta U) dx` where it has a closed form.
    pub fn analytic_log_partition(&self, beta: f64) -> Option<f64> {
        match self {
            PotentialSpec::Harmonic { dim, stiffness } => {
                Some(0.5 * *dim as f64 * (2.0 * PI / (beta * stiffness)).ln())
            }
            PotentialSpec::GaussianMixture { weights, .. } if beta == 1.0 => {
                Some(weights.iter().sum::<f64>().ln())
            }
            _ => None,
        }
    }

    /// Energy in the auxiliary box at inverse temperature `beta`; the tail slope is `u / beta`.
    pub fn auxiliary_energy(&self, x: &[f64], beta: f64) -> Result<f64> {
        match self {
            PotentialSpec::AuxiliaryBounded { .. } => {
                if !(beta > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "auxiliary energy needs beta > 0, got {beta}"
                    )));
                }
                let (reduced, _) = self.reduced_energy_grad(x, beta)?;
                Ok(reduced / beta)
            }
            other => other.energy(x),
        }
    }

    fn inner_energy_force(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim("potential input", self.dim(), x.len())?;
        match self {
            PotentialSpec::DoubleWell2D { tilt } => {
                let (x1, x2) = (x[0], x[1]);
                let x1sq = x1 * x1;
                let u = 0.25 * x1sq * x1sq - 3.0 * x1sq + tilt * x1 + 0.5 * x2 * x2;
                let du1 = x1sq * x1 - 6.0 * x1 + tilt;
                Ok((u, vec![-du1, -x2]))
            }
            PotentialSpec::Harmonic { stiffness, .. } => {
                let u = 0.5 * stiffness * x.iter().map(|v| v * v).sum::<f64>();
                Ok((u, x.iter().map(|v| -stiffness * v).collect()))
            }
            PotentialSpec::GaussianMixture {
                weights,
                means,
                variances,
            } => {
                let d = x.len();
                let log_terms: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .zip(variances)
                    .map(|((w, m), v)| {
                        let mut acc = w.ln() - 0.5 * d as f64 * (2.0 * PI).ln();
                        for j in 0..d {
                            let r = x[j] - m[j];
                            acc -= 0.5 * (v[j].ln() + r * r / v[j]);
                        }
                        acc
                    })
                    .collect();
                let lse = crate::stats::log_sum_exp(&log_terms);
                let mut f = vec![0.0; d];
                for ((lt, m), v) in log_terms.iter().zip(means).zip(variances) {
                    let resp = (lt - lse).exp();
                    for j in 0..d {
                        f[j] -= resp * (x[j] - m[j]) / v[j];
                    }
                }
                Ok((-lse, f))
            }
            PotentialSpec::AuxiliaryBounded { .. } => unreachable!("handled by caller"),
        }
    }
}

impl Potential for PotentialSpec {
    fn dim(&self) -> usize {
        match self {
            PotentialSpec::DoubleWell2D { .. } => 2,
            PotentialSpec::Harmonic { dim, .. } => *dim,
            PotentialSpec::GaussianMixture { means, .. } => means.first().map_or(0, Vec::len),
            PotentialSpec::AuxiliaryBounded { inner, .. } => inner.dim(),
        }
    }

    /// For the auxiliary box this is the energy at `beta = 1`.
    fn energy_force(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            PotentialSpec::AuxiliaryBounded { .. } => {
                let (u, mut g) = self.reduced_energy_grad(x, 1.0)?;
                g.iter_mut().for_each(|v| *v = -*v);
                Ok((u, g))
            }
            _ => self.inner_energy_force(x),
        }
    }

    fn reduced_energy_grad(&self, x: &[f64], beta: f64) -> Result<(f64, Vec<f64>)> {
        match self {
            PotentialSpec::AuxiliaryBounded {
                inner,
                half_width,
                slope,
            } => {
                check_dim("potential input", inner.dim(), x.len())?;
                let b = *half_width;
                let clamped: Vec<f64> = x.iter().map(|v| v.clamp(-b, b)).collect();
                let (u_in, mut grad) = inner.reduced_energy_grad(&clamped, beta)?;
                let mut tail = 0.0;
                for (g, &xi) in grad.iter_mut().zip(x) {
                    let excess = xi.abs() - b;
                    if excess > 0.0 {
                        tail += excess;
                        *g = slope * xi.signum();
                    }
                }
                Ok((u_in + slope * tail, grad))
            }
            _ => {
                let (u, mut f) = self.inner_energy_force(x)?;
                f.iter_mut().for_each(|v| *v *= -beta);
                Ok((beta * u, f))
            }
        }
    }

    fn bounded_domain(&self) -> bool {
        matches!(self, PotentialSpec::AuxiliaryBounded { .. })
    }
}
