//! Model assembly, the two training pipelines, metrics, parameter counts
//! and checkpoints.
//!
//! A [`Model`] is a [`ParamStore`] of named tensors plus one
//! [`RouterState`] per MoE layer. Every forward pass binds the store onto a
//! fresh [`Graph`](crate::tensor::Graph); which names are bound as
//! trainable leaves is what distinguishes pretraining from finetuning.

mod checkpoint;
mod config;
mod count;
mod forward;
mod metrics;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{LossKind, ModelConfig, Placement};
pub use count::{count_finetune_trainable, count_parameters, counted_from_model, reference_reconciliation, CountMode, ParamCount};
pub use forward::{forward, next_patch_loss, predict, ForwardOptions, ForwardOutput, Mode};
pub use metrics::{evaluate, metrics_from, Metrics};
pub use params::{Binding, ParamStore};
pub use train::{
    finetune, pretrain, train, LogRecord, Optimizer, OptimizerKind, TrainPlan, TrainReport, TrainSpec,
};

use crate::attention::AttnVars;
use crate::error::Result;
use crate::moe::{FfnBlock, FfnVars, LayerVars, MoeVars, NormKind, NormVars, RouterState};
use crate::tensor::{RngStream, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// `Some` exactly for MoE layers.
    pub routers: Vec<Option<RouterState>>,
}

pub(crate) fn layer_prefix(l: usize) -> String {
    format!("layers.{l}.")
}

fn weight(rng: &mut RngStream, cfg: &ModelConfig, fan_in: usize, shape: &[usize]) -> Tensor {
    let std = cfg.init_std.unwrap_or(1.0 / (fan_in as f64).sqrt());
    rng.normal_tensor(shape, std)
}

fn add_norm(store: &mut ParamStore, cfg: &ModelConfig, prefix: &str) -> Result<()> {
    let d = cfg.d_model;
    store.insert(format!("{prefix}.gain"), Tensor::ones(&[d]))?;
    if cfg.norm == NormKind::Layer {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

fn add_ffn(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngStream, prefix: &str, hidden: usize) -> Result<()> {
    let d = cfg.d_model;
    store.insert(format!("{prefix}.w1"), weight(rng, cfg, d, &[d, hidden]))?;
    if cfg.linear_bias {
        store.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?;
    }
    store.insert(format!("{prefix}.w2"), weight(rng, cfg, hidden, &[hidden, d]))?;
    if cfg.linear_bias {
        store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

/// Deterministic initialization from `rng`.
///
/// No parameter depends on the channel count, so a model built for
/// univariate pretraining accepts any `C` later.
pub fn build_model(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Model> {
    cfg.validate()?;
    let (d, p, h) = (cfg.d_model, cfg.patch, cfg.heads);
    let mut s = ParamStore::new();
    s.insert("embed.w", weight(rng, cfg, p, &[p, d]))?;
    if cfg.linear_bias {
        s.insert("embed.b", Tensor::zeros(&[d]))?;
    }
    let moe_mask = cfg.moe_mask()?;
    let mut routers = Vec::with_capacity(cfg.layers);
    for (l, &is_moe) in moe_mask.iter().enumerate() {
        let pre = format!("layers.{l}");
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            s.insert(format!("{pre}.attn.{w}"), weight(rng, cfg, d, &[d, d]))?;
        }
        s.insert(format!("{pre}.attn.e_id"), Tensor::zeros(&[2, h]))?;
        add_norm(&mut s, cfg, &format!("{pre}.norm1"))?;
        if is_moe {
            let m = &cfg.moe;
            s.insert(format!("{pre}.moe.cluster"), rng.normal_tensor(&[m.n_private, d], m.router_init_std))?;
            for i in 0..m.n_shared {
                add_ffn(&mut s, cfg, rng, &format!("{pre}.moe.shared.{i}"), m.shared_width(d))?;
            }
            for i in 0..m.n_private {
                add_ffn(&mut s, cfg, rng, &format!("{pre}.moe.private.{i}"), m.expert_width(d))?;
            }
            routers.push(Some(RouterState::new(m.n_private)));
        } else {
            add_ffn(&mut s, cfg, rng, &format!("{pre}.ffn"), 4 * d)?;
            routers.push(None);
        }
        add_norm(&mut s, cfg, &format!("{pre}.norm2"))?;
    }
    s.insert("head.w", weight(rng, cfg, d, &[d, p]))?;
    if cfg.linear_bias {
        s.insert("head.b", Tensor::zeros(&[p]))?;
    }
    s.insert("graph.alpha_raw", Tensor::zeros(&[cfg.lookback / 2]))?;
    s.insert("graph.edge_bias", Tensor::zeros(&[3]))?;
    Ok(Model {
        cfg: cfg.clone(),
        params: s,
        routers,
    })
}

impl Model {
    pub fn is_moe(&self, l: usize) -> bool {
        self.routers[l].is_some()
    }

    /// Serialized parameters and router bias of layer `l`.
    pub fn layer_bytes(&self, l: usize) -> Vec<u8> {
        let mut out = self.params.bytes_with_prefix(&layer_prefix(l));
        if let Some(r) = &self.routers[l] {
            for b in &r.bias {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub(crate) fn layer_vars(&self, b: &Binding, l: usize) -> Result<LayerVars> {
        let pre = format!("layers.{l}");
        let norm = |name: &str| -> Result<NormVars> {
            Ok(NormVars {
                gain: b.var(&format!("{pre}.{name}.gain"))?,
                bias: b.opt(&format!("{pre}.{name}.bias")),
            })
        };
        let ffn = |p: &str| -> Result<FfnVars> {
            Ok(FfnVars {
                w1: b.var(&format!("{p}.w1"))?,
                b1: b.opt(&format!("{p}.b1")),
                w2: b.var(&format!("{p}.w2"))?,
                b2: b.opt(&format!("{p}.b2")),
            })
        };
        let attn = AttnVars {
            w_q: b.var(&format!("{pre}.attn.w_q"))?,
            w_k: b.var(&format!("{pre}.attn.w_k"))?,
            w_v: b.var(&format!("{pre}.attn.w_v"))?,
            w_o: b.var(&format!("{pre}.attn.w_o"))?,
            e_id: b.var(&format!("{pre}.attn.e_id"))?,
        };
        let block = if self.is_moe(l) {
            let m = &self.cfg.moe;
            FfnBlock::Moe(MoeVars {
                cluster: b.var(&format!("{pre}.moe.cluster"))?,
                shared: (0..m.n_shared)
                    .map(|i| ffn(&format!("{pre}.moe.shared.{i}")))
                    .collect::<Result<_>>()?,
                private: (0..m.n_private)
                    .map(|i| ffn(&format!("{pre}.moe.private.{i}")))
                    .collect::<Result<_>>()?,
                norm: norm("norm2")?,
            })
        } else {
            FfnBlock::Dense {
                ffn: ffn(&format!("{pre}.ffn"))?,
                norm: norm("norm2")?,
            }
        };
        Ok(LayerVars {
            attn,
            norm1: norm("norm1")?,
            block,
        })
    }
}
