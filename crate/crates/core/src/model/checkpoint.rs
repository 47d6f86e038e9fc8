use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, CgModel};
use crate::autodiff::ParamLayout;
use crate::error::{Error, Result};
use crate::train::ResumeState;

/// JSON checkpoint: architecture, layouts of the decoder (`theta`) and
/// encoder (`phi`) parameter blocks, and the flat value array they index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub theta_layout: ParamLayout,
    pub phi_layout: ParamLayout,
    pub values: Vec<f64>,
    pub n_c: usize,
    pub n_f: usize,
    pub seed: u64,
    /// Optimizer and tempering state for resuming a training run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<ResumeState>,
}

impl Checkpoint {
    pub fn from_model(model: &CgModel, seed: u64) -> Self {
        Checkpoint {
            arch: model.architecture().clone(),
            theta_layout: model.theta_layout().clone(),
            phi_layout: model.phi_layout().clone(),
            values: model.params().values().to_vec(),
            n_c: model.n_c(),
            n_f: model.n_f(),
            seed,
            training: None,
        }
    }

    /// Rebuilds the model, checking that the stored layouts match the architecture.
    pub fn to_model(&self) -> Result<CgModel> {
        if self.arch.n_c != self.n_c || self.arch.n_f != self.n_f {
            return Err(Error::Config(format!(
                "checkpoint dimensions (n_c={}, n_f={}) disagree with its architecture",
                self.n_c, self.n_f
            )));
        }
        let mut model = CgModel::zeroed(self.arch.clone())?;
        if model.theta_layout() != &self.theta_layout || model.phi_layout() != &self.phi_layout {
            return Err(Error::Config(
                "checkpoint layouts do not match the architecture".into(),
            ));
        }
        model.set_values(&self.values)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
