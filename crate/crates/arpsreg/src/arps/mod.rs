//! The learned registration pipeline: stacked reference-point-shifting
//! layers, a membership head, the in-graph mixture-registration solve and
//! the training loop.
//!
//! Each layer encodes current coordinates, enhances features with Siamese
//! self- and cross-attention, selects the strongest rows on both sets,
//! estimates a step size from the selected means, and translates both sets
//! so the estimated common reference point moves toward the origin. After
//! the last layer a per-point head produces component memberships and the
//! closed-form weighted alignment of the implied mixtures yields the pose.

pub mod layers;
pub mod loss;
pub mod network;
pub mod train;

use crate::error::{Error, Result};
use arpsreg_nn::{MhaSpec, MlpSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Raw coordinates into the first encoder (the default; works best for
    /// partial pairs).
    Xyz,
    /// Rotation-invariant features into the first encoder.
    Rri,
}

impl std::str::FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(InputMode::Xyz),
            "rri" => Ok(InputMode::Rri),
            other => Err(Error::Config(format!("unknown input mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArpsConfig {
    /// Number of shifting layers L.
    pub layers: usize,
    /// Per-layer feature width C; attention runs at 2C.
    pub feature_dim: usize,
    /// Points selected per set for the reference estimate; `None` means
    /// N/4.
    pub top_h: Option<usize>,
    /// Mixture size J.
    pub components: usize,
    pub heads: usize,
    pub input_mode: InputMode,
    /// Neighborhood size for the rri input mode.
    pub rri_neighbors: usize,
    /// Ablation: attention blocks become identity pass-throughs.
    pub disable_attention: bool,
    /// Ablation: shifts are pinned to zero.
    pub disable_recenter: bool,
}

impl Default for ArpsConfig {
    fn default() -> Self {
        ArpsConfig {
            layers: 4,
            feature_dim: 16,
            top_h: None,
            components: 16,
            heads: 4,
            input_mode: InputMode::Xyz,
            rri_neighbors: 8,
            disable_attention: false,
            disable_recenter: false,
        }
    }
}

impl ArpsConfig {
    pub fn d_model(&self) -> usize {
        2 * self.feature_dim
    }

    /// Resolved selection size for a set of `n` points.
    pub fn resolve_top_h(&self, n: usize) -> usize {
        self.top_h.unwrap_or(n / 4).clamp(1, n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("need at least one layer".into()));
        }
        if self.components < 3 {
            return Err(Error::Config("need at least 3 mixture components".into()));
        }
        if self.feature_dim < 1 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model() % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention width {} is not divisible by {} heads",
                self.d_model(),
                self.heads
            )));
        }
        if let Some(h) = self.top_h {
            if h == 0 {
                return Err(Error::Config("top_h must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn encoder_spec(&self, layer: usize) -> MlpSpec {
        let c = self.feature_dim;
        let input = if layer == 0 {
            match self.input_mode {
                InputMode::Xyz => 3,
                InputMode::Rri => 4 * self.rri_neighbors,
            }
        } else {
            3
        };
        MlpSpec::new(format!("layer{layer}.encoder"), &[input, c, c])
    }

    pub(crate) fn self_mha_spec(&self, layer: usize) -> Result<MhaSpec> {
        Ok(MhaSpec::new(
            format!("layer{layer}.self_mha"),
            self.d_model(),
            self.heads,
        )?)
    }

    pub(crate) fn cross_mha_spec(&self, layer: usize) -> Result<MhaSpec> {
        Ok(MhaSpec::new(
            format!("layer{layer}.cross_mha"),
            self.d_model(),
            self.heads,
        )?)
    }

    pub(crate) fn step_spec(&self, layer: usize) -> MlpSpec {
        MlpSpec::new(
            format!("layer{layer}.step"),
            &[3 + self.d_model(), self.feature_dim, 1],
        )
    }

    pub(crate) fn membership_spec(&self) -> MlpSpec {
        MlpSpec::new("membership", &[self.d_model(), self.d_model(), self.components])
    }
}

/// What one layer did on one forward pass.
#[derive(Debug, Clone)]
pub struct LayerTraceEntry {
    pub src_indices: Vec<usize>,
    pub tgt_indices: Vec<usize>,
    /// Applied step size, strictly inside (0, 1).
    pub step: f64,
    pub shift_src: nalgebra::Vector3<f64>,
    pub shift_tgt: nalgebra::Vector3<f64>,
}

/// Scalar loss values extracted from a forward pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_aff: f64,
    pub l_reg: f64,
    pub l_ctr: f64,
    pub l_stp: f64,
    pub total: f64,
}

pub use network::{init_params, network_forward, LossNodes, NetworkOutput};
pub use train::{train, write_loss_csv, EpochRecord, TrainConfig, TrainOutcome};
