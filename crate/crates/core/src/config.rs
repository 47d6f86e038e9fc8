//! Run configuration: one TOML (or JSON) file, layered over a named preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{HistSpec, MarginalMethod};
use crate::error::{Error, Result};
use crate::model::{Architecture, CgModel};
use crate::potentials::{Potential, PotentialSpec};
use crate::reference::{MalaConfig, QuadratureGrid};
use crate::train::{stream_rng, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Published hyperparameters throughout.
    #[default]
    Paper,
    /// Double-well settings that finish on one CPU core in well under an hour.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected paper or desk)"))),
        }
    }
}

/// Linear confining walls outside `[-half_width, half_width]^n`, needed
/// when the initial temperature is so high the target is nearly flat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxiliaryBox {
    pub enabled: bool,
    pub half_width: f64,
    pub slope: f64,
}

impl Default for AuxiliaryBox {
    fn default() -> Self {
        AuxiliaryBox {
            enabled: true,
            half_width: PotentialSpec::AUX_HALF_WIDTH,
            slope: PotentialSpec::AUX_SLOPE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_c: usize,
    /// Hidden width of every encoder and decoder layer.
    pub width: usize,
    /// Explicit layer list; replaces `n_c` and `width` when present.
    pub architecture: Option<Architecture>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_c: 1,
            width: 100,
            architecture: None,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, n_f: usize) -> Architecture {
        self.architecture
            .clone()
            .unwrap_or_else(|| Architecture::mlp(self.n_c, n_f, self.width))
    }
}

/// Reference chain and quadrature settings. Unset fields fall back to
/// per-potential defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub beta: f64,
    pub steps: usize,
    pub burnin: usize,
    pub thin: usize,
    pub tau: Option<f64>,
    pub x0: Option<Vec<f64>>,
    pub grid: Option<QuadratureGrid>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            beta: 1.0,
            steps: 200_000,
            burnin: 20_000,
            thin: 10,
            tau: None,
            x0: None,
            grid: None,
        }
    }
}

impl ReferenceConfig {
    pub fn mala(&self, potential: &PotentialSpec) -> MalaConfig {
        let mut m = MalaConfig::default_for(potential, self.beta);
        m.steps = self.steps;
        m.burnin = self.burnin;
        m.thin = self.thin;
        if let Some(t) = self.tau {
            m.tau = t;
        }
        if let Some(x0) = &self.x0 {
            m.x0 = x0.clone();
        }
        m
    }

    /// Configured grid, else a default for the double well and for
    /// harmonic wells of up to two dimensions.
    pub fn grid(&self, potential: &PotentialSpec) -> Option<QuadratureGrid> {
        if self.grid.is_some() {
            return self.grid.clone();
        }
        match potential {
            PotentialSpec::DoubleWell2D { tilt } if *tilt == 1.0 => Some(QuadratureGrid::double_well()),
            PotentialSpec::Harmonic { dim, stiffness } if *dim <= 2 => {
                let w = 8.0 / (self.beta * stiffness).sqrt();
                QuadratureGrid::new(vec![-w; *dim], vec![w; *dim], vec![400; *dim]).ok()
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceConfig {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
    /// Fixed values of the remaining coordinates; zeros when empty.
    pub rest: Vec<f64>,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            lower: -3.5,
            upper: 3.5,
            points: 200,
            rest: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseConfig {
    /// Ancestral samples for moments, histograms and CV checks.
    pub samples: usize,
    /// Latent draws per marginal density estimate.
    pub marginal_samples: usize,
    pub marginal_method: MarginalMethod,
    /// Samples for the bound and entropy estimates.
    pub kl_samples: usize,
    pub slice: SliceConfig,
    pub hist: HistSpec,
    /// Frozen quadrature oracle; looked up next to the checkpoint when unset.
    pub fixture: Option<PathBuf>,
    /// Reference samples CSV for the forward divergence; a fresh chain is
    /// run when unset.
    pub reference_samples: Option<PathBuf>,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            samples: 10_000,
            marginal_samples: 5000,
            marginal_method: MarginalMethod::Prior,
            kl_samples: 1000,
            slice: SliceConfig::default(),
            hist: HistSpec::double_well(),
            fixture: None,
            reference_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub potential: PotentialSpec,
    pub auxiliary: AuxiliaryBox,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reference: ReferenceConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Paper,
            seed: 0,
            out: PathBuf::from("run"),
            potential: PotentialSpec::double_well(),
            auxiliary: AuxiliaryBox::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            reference: ReferenceConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = RunConfig {
            preset,
            ..RunConfig::default()
        };
        if preset == Preset::Desk {
            c.model.width = 32;
            c.train.samples = 200;
            c.train.temper_samples = Some(500);
            c.train.adam.lr = 3e-3;
            c.train.temper.delta_beta_max = 0.02;
        }
        c
    }

    /// Parses TOML, or JSON when the text starts with `{`. The preset named
    /// by `preset_override`, else by the file, else `paper`, supplies every
    /// value the file leaves out.
    pub fn parse(text: &str, preset_override: Option<Preset>) -> Result<Self> {
        let overlay: toml::Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text)?
        };
        let file_preset = match overlay.get("preset") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("preset must be a string".into()))?
                    .parse()?,
            ),
            None => None,
        };
        let preset = preset_override.or(file_preset).unwrap_or_default();
        let mut merged = toml::Value::try_from(Self::preset(preset))
            .map_err(|e| Error::Config(format!("serializing preset: {e}")))?;
        merge(&mut merged, overlay);
        let mut config: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.preset = preset;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, preset_override: Option<Preset>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, preset_override)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Potential used for training, wrapped in the auxiliary box when enabled.
    pub fn training_potential(&self) -> PotentialSpec {
        let p = self.potential.clone();
        if self.auxiliary.enabled && !matches!(p, PotentialSpec::AuxiliaryBounded { .. }) {
            p.bounded_with(self.auxiliary.half_width, self.auxiliary.slope)
        } else {
            p
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.model.architecture(self.potential.dim())
    }

    /// Freshly initialized model, drawn from the run seed.
    pub fn initial_model(&self) -> Result<CgModel> {
        CgModel::new(self.architecture(), &mut stream_rng(self.seed, 0))
    }

    pub fn validate(&self) -> Result<()> {
        self.potential.validate()?;
        self.training_potential().validate()?;
        let arch = self.architecture();
        arch.validate()?;
        if arch.n_f != self.potential.dim() {
            return Err(Error::Config(format!(
                "model has {} observed coordinates but the potential has {}",
                arch.n_f,
                self.potential.dim()
            )));
        }
        self.train.validate()?;
        self.reference.mala(&self.potential).validate()?;
        if let Some(g) = &self.reference.grid {
            g.validate()?;
        }
        let d = &self.diagnose;
        if d.samples < 100 || d.marginal_samples < 100 || d.kl_samples < 100 {
            return Err(Error::Config("diagnostics need at least 100 samples per estimate".into()));
        }
        if d.slice.points < 3 || !(d.slice.upper > d.slice.lower) {
            return Err(Error::Config("slice needs at least 3 points over a non-empty range".into()));
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`. A table naming a different
/// `kind` than the base replaces it outright.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            let kind_changed = matches!((b.get("kind"), t.get("kind")), (Some(x), Some(y)) if x != y);
            if kind_changed {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

#[cfg(test)]
mod tests;
