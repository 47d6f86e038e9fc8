use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity with a closed-form derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Tanh,
    /// `scale * x` for `x >= 0`, `scale * alpha * (e^x - 1)` otherwise.
    Selu { alpha: f64, scale: f64 },
    /// `log(1 / (1 + e^-x))`.
    LogSigmoid,
    Identity,
}

impl ActivationKind {
    pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
    pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

    /// The self-normalizing SeLu constants.
    pub fn selu() -> Self {
        ActivationKind::Selu {
            alpha: Self::SELU_ALPHA,
            scale: Self::SELU_SCALE,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Selu { alpha, scale } => {
                if x < 0.0 {
                    scale * alpha * x.exp_m1()
                } else {
                    scale * x
                }
            }
            ActivationKind::LogSigmoid => -softplus(-x),
            ActivationKind::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Selu { alpha, scale } => {
                if x < 0.0 {
                    scale * alpha * x.exp()
                } else {
                    scale
                }
            }
            // d/dx log sigmoid(x) = sigmoid(-x)
            ActivationKind::LogSigmoid => sigmoid(-x),
            ActivationKind::Identity => 1.0,
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
