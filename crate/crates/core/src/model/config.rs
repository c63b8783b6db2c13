use serde::{Deserialize, Serialize};

use crate::attention::AttnConfig;
use crate::error::{Error, Result};
use crate::graph_learning::GraphConfig;
use crate::moe::{MoeConfig, NormKind};
use crate::tokenizer::PatchConfig;

/// Which decoder layers carry a MoE block instead of a dense FFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    All,
    /// Layers 2, 4, 6, ... (1-based).
    Every2,
    /// Layers 4, 8, ... (1-based).
    Every4,
    FirstHalf,
    LastHalf,
    /// The 1-based list in `moe_layers`.
    Custom,
    Dense,
}

impl Placement {
    /// `is_moe[l]` for 0-based layer `l`.
    pub fn resolve(self, layers: usize, custom: Option<&[usize]>) -> Result<Vec<bool>> {
        let half = layers / 2;
        let mut out: Vec<bool> = (0..layers)
            .map(|l| match self {
                Placement::All => true,
                Placement::Every2 => (l + 1) % 2 == 0,
                Placement::Every4 => (l + 1) % 4 == 0,
                Placement::FirstHalf => l < half,
                Placement::LastHalf => l >= layers - half,
                Placement::Custom | Placement::Dense => false,
            })
            .collect();
        if self == Placement::Custom {
            let list = custom.ok_or_else(|| {
                Error::Config("placement = \"custom\" requires model.moe_layers".into())
            })?;
            for &k in list {
                if k == 0 || k > layers {
                    return Err(Error::Config(format!(
                        "moe_layers entry {k} is outside 1..={layers}"
                    )));
                }
                if std::mem::replace(&mut out[k - 1], true) {
                    return Err(Error::Config(format!("moe_layers lists layer {k} twice")));
                }
            }
        } else if custom.is_some_and(|c| !c.is_empty()) {
            return Err(Error::Config(
                "model.moe_layers is only allowed with placement = \"custom\"".into(),
            ));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Every next-patch position.
    All,
    /// Only the final position (the horizon patch).
    LastOnly,
}

fn default_placement() -> Placement {
    Placement::Every2
}
fn default_graph_layers() -> usize {
    1
}
fn default_norm() -> NormKind {
    NormKind::Rms
}
fn yes() -> bool {
    true
}
fn default_rope() -> f64 {
    10_000.0
}
fn default_loss() -> LossKind {
    LossKind::All
}

/// Architecture of a forecaster. `moe` and `graph` are filled from their
/// own config sections and carried alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Look-back length `L`.
    pub lookback: usize,
    /// Patch length `P` (= horizon `F`).
    pub patch: usize,
    #[serde(default)]
    pub stride: Option<usize>,
    pub d_model: usize,
    pub heads: usize,
    /// Decoder layer count `J`.
    pub layers: usize,
    #[serde(default = "default_placement")]
    pub placement: Placement,
    #[serde(default)]
    pub moe_layers: Option<Vec<usize>>,
    /// Trailing layers run channel-mixed in finetuning (`J_CM`); the first
    /// `layers − graph_layers` are frozen (`J_CI`).
    #[serde(default = "default_graph_layers")]
    pub graph_layers: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    /// Biases on the patch embedding, output head and FFN experts.
    #[serde(default = "yes")]
    pub linear_bias: bool,
    #[serde(default)]
    pub full_width_scale: bool,
    #[serde(default = "default_rope")]
    pub rope_base: f64,
    /// Weight init std; `1/√fan_in` when unset.
    #[serde(default)]
    pub init_std: Option<f64>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(skip)]
    pub moe: MoeConfig,
    #[serde(skip)]
    pub graph: GraphConfig,
}

impl ModelConfig {
    /// A small config with defaults everywhere else.
    pub fn tiny(lookback: usize, patch: usize, d_model: usize, heads: usize, layers: usize) -> Self {
        Self {
            lookback,
            patch,
            stride: None,
            d_model,
            heads,
            layers,
            placement: Placement::Every2,
            moe_layers: None,
            graph_layers: 1,
            norm: NormKind::Rms,
            linear_bias: true,
            full_width_scale: false,
            rope_base: 10_000.0,
            init_std: None,
            loss: LossKind::All,
            moe: MoeConfig::default(),
            graph: GraphConfig::default(),
        }
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            lookback: self.lookback,
            patch: self.patch,
            stride: self.stride,
        }
    }

    pub fn attn_config(&self) -> AttnConfig {
        AttnConfig {
            heads: self.heads,
            full_width_scale: self.full_width_scale,
            rope_base: self.rope_base,
        }
    }

    pub fn horizon(&self) -> usize {
        self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.patch_config().num_patches()
    }

    /// `J_CI`.
    pub fn frozen_layers(&self) -> usize {
        self.layers - self.graph_layers
    }

    pub fn moe_mask(&self) -> Result<Vec<bool>> {
        self.placement.resolve(self.layers, self.moe_layers.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_config().validate()?;
        self.attn_config().validate(self.d_model)?;
        if self.lookback % 2 != 0 || self.lookback < 4 {
            return Err(Error::Config(format!(
                "look-back {} must be even and at least 4 for the spectral graph",
                self.lookback
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.graph_layers > self.layers {
            return Err(Error::Config(format!(
                "graph_layers = {} exceeds layers = {}",
                self.graph_layers, self.layers
            )));
        }
        if let Some(s) = self.init_std {
            if !(s > 0.0) {
                return Err(Error::Config("init_std must be positive".into()));
            }
        }
        let mask = self.moe_mask()?;
        if mask.iter().any(|&m| m) {
            self.moe.validate()?;
        }
        self.graph.validate()
    }
}
