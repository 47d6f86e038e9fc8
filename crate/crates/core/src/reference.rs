//! Ground truth that never feeds training: a MALA sampler of
//! `exp(-beta U)` and midpoint-rule quadrature on a dense grid.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::potentials::{Potential, PotentialSpec};
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalaConfig {
    pub tau: f64,
    pub steps: usize,
    pub burnin: usize,
    pub thin: usize,
    pub beta: f64,
    pub x0: Vec<f64>,
}

impl MalaConfig {
    /// Step size for roughly half acceptance: 0.12 for the double well
    /// (stiffest curvature about 13 at the deep minimum); `1.6 / (beta k)`
    /// for a harmonic well of stiffness `k`; the narrowest component
    /// variance for a mixture. Chain settings are 2e5 steps, 2e4 burn-in,
    /// thinning 10, started at the origin (or the deep double-well minimum).
    pub fn default_for(spec: &PotentialSpec, beta: f64) -> Self {
        let tau = match spec {
            PotentialSpec::DoubleWell2D { .. } => 0.12 / beta,
            PotentialSpec::Harmonic { stiffness, .. } => 1.6 / (beta * stiffness),
            PotentialSpec::GaussianMixture { variances, .. } => {
                1.6 * variances.iter().flatten().copied().fold(f64::INFINITY, f64::min) / beta
            }
            PotentialSpec::AuxiliaryBounded { inner, .. } => Self::default_for(inner, beta).tau,
        };
        let x0 = match spec {
            PotentialSpec::DoubleWell2D { .. } => vec![-2.5, 0.0],
            other => vec![0.0; other.dim()],
        };
        MalaConfig {
            tau,
            steps: 200_000,
            burnin: 20_000,
            thin: 10,
            beta,
            x0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.thin == 0 || self.burnin >= self.steps || !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "MALA needs tau > 0, beta > 0, thin >= 1 and burnin < steps (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Rows returned: `(steps - burnin) / thin`.
    pub fn output_len(&self) -> usize {
        (self.steps - self.burnin) / self.thin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MalaChain {
    pub samples: Vec<Vec<f64>>,
    /// Acceptance rate after burn-in.
    pub acceptance: f64,
    pub warning: Option<String>,
}

/// Metropolis-adjusted Langevin chain:
/// `x' = x + tau beta F(x) + sqrt(2 tau) xi`, accepted with the
/// Metropolis-Hastings ratio for the asymmetric Gaussian proposal.
pub fn mala_chain<R: Rng + ?Sized>(potential: &dyn Potential, cfg: &MalaConfig, rng: &mut R) -> Result<MalaChain> {
    cfg.validate()?;
    let d = potential.dim();
    check_dim("MALA start", d, cfg.x0.len())?;
    let (beta, tau) = (cfg.beta, cfg.tau);
    let noise_scale = (2.0 * tau).sqrt();
    let mut x = cfg.x0.clone();
    let (mut u, mut f) = potential.energy_force(&x)?;
    if !u.is_finite() {
        return Err(Error::NonFinite(format!("initial energy {u}")));
    }
    let drift = |x: &[f64], f: &[f64]| -> Vec<f64> { x.iter().zip(f).map(|(a, g)| a + tau * beta * g).collect() };
    let log_kernel = |to: &[f64], mean: &[f64]| -> f64 {
        -to.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>() / (4.0 * tau)
    };
    let mut mean_x = drift(&x, &f);
    let mut samples = Vec::with_capacity(cfg.output_len());
    let mut accepted = 0usize;
    for step in 0..cfg.steps {
        let y: Vec<f64> = mean_x
            .iter()
            .map(|m| m + noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (uy, fy) = potential.energy_force(&y)?;
        let mean_y = drift(&y, &fy);
        let log_alpha = -beta * (uy - u) + log_kernel(&x, &mean_y) - log_kernel(&y, &mean_x);
        let uniform: f64 = rng.random();
        if uy.is_finite() && uniform.ln() < log_alpha {
            x = y;
            u = uy;
            f = fy;
            mean_x = mean_y;
            if step >= cfg.burnin {
                accepted += 1;
            }
        }
        if step >= cfg.burnin && (step - cfg.burnin + 1) % cfg.thin == 0 {
            samples.push(x.clone());
        }
    }
    let _ = f;
    let acceptance = accepted as f64 / (cfg.steps - cfg.burnin) as f64;
    let warning = (!(0.1..=0.9).contains(&acceptance)).then(|| {
        let msg = format!("MALA acceptance {acceptance:.3} outside [0.1, 0.9]; adjust tau");
        log::warn!("{msg}");
        msg
    });
    Ok(MalaChain {
        samples,
        acceptance,
        warning,
    })
}

/// Cell-centred tensor grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

impl QuadratureGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let g = QuadratureGrid { lower, upper, cells };
        g.validate()?;
        Ok(g)
    }

    /// `[-5, 5] x [-8, 8]` at 800 x 800: wide enough in `x2` for the tail check at `beta = 1`.
    pub fn double_well() -> Self {
        QuadratureGrid {
            lower: vec![-5.0, -8.0],
            upper: vec![5.0, 8.0],
            cells: vec![800, 800],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.cells.len() != d {
            return Err(Error::Config("grid bounds and cell counts must share a dimension".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(u > l)) || self.cells.contains(&0) {
            return Err(Error::Config("grid needs upper > lower and at least one cell per axis".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn spacing(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (self.upper[i] - self.lower[i]) / self.cells[i] as f64)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn len(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same box, twice the cells per axis.
    pub fn refined(&self) -> Self {
        QuadratureGrid {
            cells: self.cells.iter().map(|c| 2 * c).collect(),
            ..self.clone()
        }
    }

    /// Centre of the cell with row-major flat index `flat`.
    pub fn point(&self, mut flat: usize) -> Vec<f64> {
        let h = self.spacing();
        let mut x = vec![0.0; self.dim()];
        for i in (0..self.dim()).rev() {
            let idx = flat % self.cells[i];
            flat /= self.cells[i];
            x[i] = self.lower[i] + (idx as f64 + 0.5) * h[i];
        }
        x
    }

    fn index(&self, flat: usize, axis: usize) -> usize {
        let stride: usize = self.cells[axis + 1..].iter().product();
        (flat / stride) % self.cells[axis]
    }
}

/// Named region of configuration space for mode masses.
pub struct Region<'a> {
    pub name: String,
    pub contains: Box<dyn Fn(&[f64]) -> bool + Send + Sync + 'a>,
}

impl<'a> Region<'a> {
    pub fn new(name: impl Into<String>, contains: impl Fn(&[f64]) -> bool + Send + Sync + 'a) -> Self {
        Region {
            name: name.into(),
            contains: Box::new(contains),
        }
    }
}

/// The two double-well basins, split at `x1 = 0`.
pub fn double_well_regions() -> Vec<Region<'static>> {
    vec![
        Region::new("x1<0", |x: &[f64]| x[0] < 0.0),
        Region::new("x1>0", |x: &[f64]| x[0] > 0.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMass {
    pub name: String,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureResult {
    pub beta: f64,
    pub log_z: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// `beta <U>_p`.
    pub mean_reduced_energy: f64,
    /// `H(p) = log Z + beta <U>_p`.
    pub entropy: f64,
    pub mode_masses: Vec<ModeMass>,
}

impl QuadratureResult {
    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn mass(&self, name: &str) -> Option<f64> {
        self.mode_masses.iter().find(|m| m.name == name).map(|m| m.mass)
    }
}

/// Midpoint-rule normalizer, moments and region masses of `exp(-beta U)`.
///
/// Fails with [`Error::GridTooSmall`] when a boundary cell carries more than
/// `1e-12` of the peak density.
pub fn grid_quadrature(
    potential: &dyn Potential,
    beta: f64,
    grid: &QuadratureGrid,
    regions: &[Region<'_>],
) -> Result<QuadratureResult> {
    grid.validate()?;
    check_dim("quadrature grid", potential.dim(), grid.dim())?;
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("quadrature needs beta > 0, got {beta}")));
    }
    let d = grid.dim();
    let n = grid.len();
    let energies: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| potential.energy(&grid.point(i)).map(|u| beta * u))
        .collect::<Result<_>>()?;
    if let Some(bad) = energies.iter().find(|e| !e.is_finite()) {
        return Err(Error::NonFinite(format!("reduced energy {bad} on the grid")));
    }
    let e_min = energies.iter().copied().fold(f64::INFINITY, f64::min);

    // Tail check on every face.
    for axis in 0..d {
        for (side, target) in [("lower", 0), ("upper", grid.cells[axis] - 1)] {
            let worst = (0..n)
                .filter(|&i| grid.index(i, axis) == target)
                .map(|i| (e_min - energies[i]).exp())
                .fold(0.0, f64::max);
            if worst >= 1e-12 {
                return Err(Error::GridTooSmall {
                    boundary: format!("x{} {side}", axis + 1),
                    ratio: worst,
                });
            }
        }
    }

    // Row-wise partial sums, combined in order.
    let row = n / grid.cells[0];
    let k = regions.len();
    let partials: Vec<Vec<f64>> = (0..grid.cells[0])
        .into_par_iter()
        .map(|r| {
            // [mass, sum x, sum x^2, sum e, regions...]
            let mut acc = vec![0.0; 1 + 2 * d + 1 + k];
            for i in r * row..(r + 1) * row {
                let w = (e_min - energies[i]).exp();
                let x = grid.point(i);
                acc[0] += w;
                for j in 0..d {
                    acc[1 + j] += w * x[j];
                    acc[1 + d + j] += w * x[j] * x[j];
                }
                acc[1 + 2 * d] += w * energies[i];
                for (m, region) in regions.iter().enumerate() {
                    if (region.contains)(&x) {
                        acc[2 + 2 * d + m] += w;
                    }
                }
            }
            acc
        })
        .collect();
    let mut tot = vec![0.0; 1 + 2 * d + 1 + k];
    for p in &partials {
        for (t, v) in tot.iter_mut().zip(p) {
            *t += v;
        }
    }
    let z = tot[0];
    let mean: Vec<f64> = (0..d).map(|j| tot[1 + j] / z).collect();
    let var: Vec<f64> = (0..d).map(|j| tot[1 + d + j] / z - mean[j] * mean[j]).collect();
    let log_z = z.ln() - e_min + grid.cell_volume().ln();
    let mean_reduced_energy = tot[1 + 2 * d] / z;
    Ok(QuadratureResult {
        beta,
        log_z,
        mean,
        var,
        mean_reduced_energy,
        entropy: log_z + mean_reduced_energy,
        mode_masses: regions
            .iter()
            .enumerate()
            .map(|(m, r)| ModeMass {
                name: r.name.clone(),
                mass: tot[2 + 2 * d + m] / z,
            })
            .collect(),
    })
}

/// Frozen quadrature results for tests and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFixture {
    pub potential: PotentialSpec,
    pub grid: QuadratureGrid,
    pub result: QuadratureResult,
}

pub const DOUBLE_WELL_ORACLE: &str = "oracle_double_well_beta1.json";

impl OracleFixture {
    /// Quadrature of `potential` at `beta`, with masses of the half-spaces
    /// `x1 < 0` and `x1 > 0`.
    pub fn compute(potential: PotentialSpec, beta: f64, grid: QuadratureGrid) -> Result<Self> {
        let result = grid_quadrature(&potential, beta, &grid, &double_well_regions())?;
        Ok(OracleFixture {
            potential,
            grid,
            result,
        })
    }

    pub fn double_well() -> Result<Self> {
        Self::compute(PotentialSpec::double_well(), 1.0, QuadratureGrid::double_well())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-dimension mean and standard deviation of reference samples.
pub fn sample_moments(samples: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples".into()))?;
    let d = first.len();
    let cols: Vec<Vec<f64>> = (0..d).map(|j| samples.iter().map(|s| s[j]).collect()).collect();
    Ok((
        cols.iter().map(|c| stats::mean(c)).collect(),
        cols.iter().map(|c| stats::variance(c).sqrt()).collect(),
    ))
}
