use std::fmt::Write as _;

use super::{Model, ModelConfig, Placement};
use crate::error::Result;
use crate::moe::{MoeConfig, NormKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    /// Every expert plus the gating matrices; no graph learner.
    Pretrain,
    /// Only `K` private experts per MoE layer, plus `α` and the edge biases.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Component name and size, in a fixed order.
    pub breakdown: Vec<(String, usize)>,
}

impl ParamCount {
    fn from_parts(parts: Vec<(&str, usize)>) -> Self {
        let breakdown: Vec<(String, usize)> = parts.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Self {
            total: breakdown.iter().map(|(_, v)| v).sum(),
            breakdown,
        }
    }

    pub fn get(&self, component: &str) -> usize {
        self.breakdown
            .iter()
            .find(|(k, _)| k == component)
            .map_or(0, |(_, v)| *v)
    }
}

pub const COMPONENTS: [&str; 11] = [
    "patch_embedding",
    "identifier_embeddings",
    "attention",
    "norms",
    "dense_ffn",
    "moe_gating",
    "moe_shared",
    "moe_private",
    "output_head",
    "graph_alpha",
    "edge_biases",
];

fn ffn_size(d: usize, hidden: usize, bias: bool) -> usize {
    2 * d * hidden + if bias { hidden + d } else { 0 }
}

/// Closed-form parameter count of `cfg`.
pub fn count_parameters(cfg: &ModelConfig, mode: CountMode) -> Result<ParamCount> {
    cfg.validate()?;
    let (d, p, h, j) = (cfg.d_model, cfg.patch, cfg.heads, cfg.layers);
    let b = cfg.linear_bias;
    let norm = match cfg.norm {
        NormKind::Rms => d,
        NormKind::Layer => 2 * d,
    };
    let mask = cfg.moe_mask()?;
    let n_moe = mask.iter().filter(|&&m| m).count();
    let n_dense = j - n_moe;
    let m = &cfg.moe;
    let private_active = match mode {
        CountMode::Pretrain => m.n_private,
        CountMode::Finetune => m.top_k,
    };
    let finetune = mode == CountMode::Finetune;
    Ok(ParamCount::from_parts(vec![
        ("patch_embedding", p * d + if b { d } else { 0 }),
        ("identifier_embeddings", 2 * h * j),
        ("attention", 4 * d * d * j),
        ("norms", 2 * norm * j),
        ("dense_ffn", n_dense * ffn_size(d, 4 * d, b)),
        ("moe_gating", n_moe * m.n_private * d),
        ("moe_shared", n_moe * m.n_shared * ffn_size(d, m.shared_width(d), b)),
        ("moe_private", n_moe * private_active * ffn_size(d, m.expert_width(d), b)),
        ("output_head", d * p + if b { p } else { 0 }),
        ("graph_alpha", if finetune { cfg.lookback / 2 } else { 0 }),
        ("edge_biases", if finetune { 3 } else { 0 }),
    ]))
}

/// Parameters the finetune stage actually updates: the last `graph_layers`
/// layers with every expert, the head, `α` and the edge biases.
pub fn count_finetune_trainable(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let d = cfg.d_model;
    let b = cfg.linear_bias;
    let m = &cfg.moe;
    let norm = match cfg.norm {
        NormKind::Rms => d,
        NormKind::Layer => 2 * d,
    };
    let mask = cfg.moe_mask()?;
    let layers: usize = mask[cfg.frozen_layers()..]
        .iter()
        .map(|&is_moe| {
            let block = if is_moe {
                m.n_private * d
                    + m.n_shared * ffn_size(d, m.shared_width(d), b)
                    + m.n_private * ffn_size(d, m.expert_width(d), b)
            } else {
                ffn_size(d, 4 * d, b)
            };
            2 * cfg.heads + 4 * d * d + 2 * norm + block
        })
        .sum();
    Ok(layers + d * cfg.patch + if b { cfg.patch } else { 0 } + cfg.lookback / 2 + 3)
}

fn component_of(name: &str) -> &'static str {
    let last = name.rsplit('.').next().unwrap_or("");
    if name.starts_with("embed.") {
        "patch_embedding"
    } else if name.starts_with("head.") {
        "output_head"
    } else if name == "graph.alpha_raw" {
        "graph_alpha"
    } else if name == "graph.edge_bias" {
        "edge_biases"
    } else if last == "e_id" {
        "identifier_embeddings"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".norm1.") || name.contains(".norm2.") {
        "norms"
    } else if name.contains(".moe.cluster") {
        "moe_gating"
    } else if name.contains(".moe.shared.") {
        "moe_shared"
    } else if name.contains(".moe.private.") {
        "moe_private"
    } else {
        "dense_ffn"
    }
}

/// The same breakdown summed from the tensors of a built model.
pub fn counted_from_model(model: &Model, mode: CountMode) -> ParamCount {
    let k = model.cfg.moe.top_k;
    let mut sizes = vec![0usize; COMPONENTS.len()];
    for (name, t) in model.params.iter() {
        let comp = component_of(name);
        let include = match mode {
            CountMode::Pretrain => !name.starts_with("graph."),
            CountMode::Finetune => match name.split_once(".moe.private.") {
                Some((_, rest)) => rest
                    .split('.')
                    .next()
                    .and_then(|e| e.parse::<usize>().ok())
                    .is_some_and(|e| e < k),
                None => true,
            },
        };
        if include {
            let i = COMPONENTS.iter().position(|c| *c == comp).unwrap();
            sizes[i] += t.numel();
        }
    }
    ParamCount::from_parts(COMPONENTS.iter().copied().zip(sizes).collect())
}

pub const REFERENCE_PRETRAIN_TOTAL: usize = 79_911_648;
pub const REFERENCE_FINETUNE_TOTAL: usize = 16_850_883;

/// Searches unstated hyperparameters (heads, expert counts, `K`, norm type,
/// biases, placement) at `d = 512, P = 96, L = 672, J = 8` for the totals
/// closest to the published ones, and reports the gap.
pub fn reference_reconciliation() -> String {
    let mut rows = Vec::new();
    for &placement in &[Placement::Every2, Placement::All, Placement::Every4, Placement::FirstHalf] {
        for &heads in &[4usize, 8, 16] {
            for &norm in &[NormKind::Rms, NormKind::Layer] {
                for &bias in &[false, true] {
                    for n_shared in 0..=2 {
                        for n_private in 1..=16 {
                            for top_k in 1..=n_private.min(8) {
                                let mut cfg = ModelConfig::tiny(672, 96, 512, heads, 8);
                                cfg.placement = placement;
                                cfg.norm = norm;
                                cfg.linear_bias = bias;
                                cfg.moe = MoeConfig {
                                    n_shared,
                                    n_private,
                                    top_k,
                                    ..MoeConfig::default()
                                };
                                let (Ok(pre), Ok(fine)) = (
                                    count_parameters(&cfg, CountMode::Pretrain),
                                    count_parameters(&cfg, CountMode::Finetune),
                                ) else {
                                    continue;
                                };
                                let gap = pre.total.abs_diff(REFERENCE_PRETRAIN_TOTAL)
                                    + fine.total.abs_diff(REFERENCE_FINETUNE_TOTAL);
                                let trainable = count_finetune_trainable(&cfg).unwrap_or(0);
                                rows.push((gap, pre.total, fine.total, trainable, cfg));
                            }
                        }
                    }
                }
            }
        }
    }
    rows.sort_by_key(|r| r.0);
    let mut out = String::new();
    let _ = writeln!(out, "reading A: finetune = activated parameters (K private experts, plus alpha and edge biases)");
    let _ = writeln!(
        out,
        "target: pretrain {REFERENCE_PRETRAIN_TOTAL}, finetune {REFERENCE_FINETUNE_TOTAL} (d=512, P=96, L=672, J=8)"
    );
    let _ = writeln!(out, "searched {} configurations; closest:", rows.len());
    let _ = writeln!(
        out,
        "rank,placement,heads,norm,linear_bias,n_shared,n_private,top_k,pretrain,pretrain_gap,finetune,finetune_gap"
    );
    for (i, (_, pre, fine, _, c)) in rows.iter().take(10).enumerate() {
        let _ = writeln!(
            out,
            "{},{:?},{},{:?},{},{},{},{},{},{},{},{}",
            i + 1,
            c.placement,
            c.heads,
            c.norm,
            c.linear_bias,
            c.moe.n_shared,
            c.moe.n_private,
            c.moe.top_k,
            pre,
            *pre as i64 - REFERENCE_PRETRAIN_TOTAL as i64,
            fine,
            *fine as i64 - REFERENCE_FINETUNE_TOTAL as i64,
        );
    }
    let pre_exact = rows.iter().filter(|r| r.1 == REFERENCE_PRETRAIN_TOTAL).count();
    let fine_exact = rows.iter().filter(|r| r.2 == REFERENCE_FINETUNE_TOTAL).count();
    let _ = writeln!(
        out,
        "exact pretrain matches: {pre_exact}; exact finetune matches: {fine_exact}"
    );
    let _ = writeln!(
        out,
        "reading B: finetune = parameters updated when only the last layer trains (graph_layers = 1)"
    );
    rows.sort_by_key(|r| r.1.abs_diff(REFERENCE_PRETRAIN_TOTAL) + r.3.abs_diff(REFERENCE_FINETUNE_TOTAL));
    let _ = writeln!(
        out,
        "rank,placement,heads,norm,linear_bias,n_shared,n_private,top_k,pretrain,pretrain_gap,finetune_trainable,finetune_gap"
    );
    for (i, (_, pre, _, tr, c)) in rows.iter().take(10).enumerate() {
        let _ = writeln!(
            out,
            "{},{:?},{},{:?},{},{},{},{},{},{},{},{}",
            i + 1,
            c.placement,
            c.heads,
            c.norm,
            c.linear_bias,
            c.moe.n_shared,
            c.moe.n_private,
            c.moe.top_k,
            pre,
            *pre as i64 - REFERENCE_PRETRAIN_TOTAL as i64,
            tr,
            *tr as i64 - REFERENCE_FINETUNE_TOTAL as i64,
        );
    }
    let tr_exact = rows.iter().filter(|r| r.3 == REFERENCE_FINETUNE_TOTAL).count();
    let _ = writeln!(out, "exact reading-B finetune matches: {tr_exact}");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::tensor::RngStream;

    #[test]
    fn tiny_dense_hand_count() {
        let mut cfg = ModelConfig::tiny(4, 2, 4, 1, 1);
        cfg.placement = Placement::Dense;
        cfg.linear_bias = false;
        // embed 2·4, e_id 2, attention 4·16, two RMS gains 8, FFN 2·4·16, head 4·2
        let expect = 8 + 2 + 64 + 8 + 128 + 8;
        let c = count_parameters(&cfg, CountMode::Pretrain).unwrap();
        assert_eq!(c.total, expect);
        let f = count_parameters(&cfg, CountMode::Finetune).unwrap();
        assert_eq!(f.total, expect + 2 + 3);
    }

    #[test]
    fn extra_private_expert() {
        let mut cfg = ModelConfig::tiny(8, 2, 4, 1, 1);
        cfg.placement = Placement::All;
        cfg.linear_bias = false;
        cfg.moe = MoeConfig {
            n_shared: 1,
            n_private: 2,
            top_k: 1,
            expert_hidden: Some(6),
            ..MoeConfig::default()
        };
        let a = count_parameters(&cfg, CountMode::Pretrain).unwrap().total;
        cfg.moe.n_private = 3;
        let b = count_parameters(&cfg, CountMode::Pretrain).unwrap().total;
        assert_eq!(b - a, 2 * 4 * 6 + 4);
    }

    #[test]
    fn closed_form_matches_built_tensors() {
        for placement in [Placement::Every2, Placement::All, Placement::Dense] {
            for norm in [NormKind::Rms, NormKind::Layer] {
                let mut cfg = ModelConfig::tiny(16, 4, 8, 2, 3);
                cfg.placement = placement;
                cfg.norm = norm;
                cfg.moe.n_private = 4;
                let m = build_model(&cfg, &mut RngStream::new(0)).unwrap();
                for mode in [CountMode::Pretrain, CountMode::Finetune] {
                    assert_eq!(count_parameters(&cfg, mode).unwrap(), counted_from_model(&m, mode));
                }
            }
        }
    }
}
