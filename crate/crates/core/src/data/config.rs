use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{SplitScheme, SynthPreset};
use crate::error::{Error, Result};
use crate::graph_learning::GraphConfig;
use crate::model::{ModelConfig, TrainSpec};
use crate::moe::MoeConfig;

fn default_channels() -> usize {
    4
}
fn default_length() -> usize {
    2000
}
fn default_scheme() -> SplitScheme {
    SplitScheme::Standard
}

/// Where the series come from: a CSV file or a synthetic preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<SynthPreset>,
    /// Synthetic channel count.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Synthetic length `T`.
    #[serde(default = "default_length")]
    pub length: usize,
    /// Lag of the copied channels; the patch length when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<usize>,
    /// Seed of the generator; the run seed when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_scheme")]
    pub scheme: SplitScheme,
    /// Label written into metric files; the file stem or preset name when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// One experiment: the `[data]`, `[model]`, `[train]`, `[moe]` and
/// `[graph]` sections of a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub moe: MoeConfig,
    #[serde(default)]
    pub graph: GraphConfig,
}

/// Keys without defaults.
pub const REQUIRED_KEYS: [&str; 5] = [
    "model.lookback",
    "model.patch",
    "model.d_model",
    "model.heads",
    "model.layers",
];

pub const SECTION_KEYS: [(&str, &[&str]); 5] = [
    ("data", &["path", "preset", "channels", "length", "delay", "seed", "scheme", "name"]),
    (
        "model",
        &[
            "lookback",
            "patch",
            "stride",
            "d_model",
            "heads",
            "layers",
            "placement",
            "moe_layers",
            "graph_layers",
            "norm",
            "linear_bias",
            "full_width_scale",
            "rope_base",
            "init_std",
            "loss",
        ],
    ),
    (
        "train",
        &[
            "lr",
            "batch_size",
            "steps",
            "seed",
            "optimizer",
            "beta1",
            "beta2",
            "eps",
            "log_every",
            "grad_clip",
        ],
    ),
    (
        "moe",
        &[
            "n_shared",
            "n_private",
            "top_k",
            "expert_hidden",
            "shared_hidden",
            "bias_rate",
            "renormalize",
            "routing",
            "router_init_std",
        ],
    ),
    ("graph", &["tau", "tau_end", "anneal_steps", "edge_bias"]),
];

impl ExperimentConfig {
    /// Parses and validates. Every unknown key and every missing required
    /// key is reported in one error.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        for (section, value) in &table {
            let Some((_, keys)) = SECTION_KEYS.iter().find(|(s, _)| s == section) else {
                unknown.push(format!("[{section}]"));
                continue;
            };
            let Some(inner) = value.as_table() else {
                return Err(Error::Config(format!("{section} must be a section")));
            };
            unknown.extend(inner.keys().filter(|k| !keys.contains(&k.as_str())).map(|k| format!("{section}.{k}")));
        }
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let has = |dotted: &str| {
            let (s, k) = dotted.split_once('.').unwrap();
            table.get(s).and_then(|v| v.as_table()).is_some_and(|t| t.contains_key(k))
        };
        let mut missing: Vec<String> = REQUIRED_KEYS.iter().filter(|k| !has(k)).map(|k| k.to_string()).collect();
        if !has("data.path") && !has("data.preset") {
            missing.push("data.path or data.preset".into());
        }
        if !missing.is_empty() {
            return Err(Error::MissingKeys(missing));
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The model config with its `moe` and `graph` sections attached.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.moe = self.moe.clone();
        m.graph = self.graph.clone();
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.path.is_some() == self.data.preset.is_some() {
            return Err(Error::Config("set exactly one of data.path and data.preset".into()));
        }
        self.model_config().validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[data]\npreset = \"lagged\"\n[model]\nlookback = 16\npatch = 4\nd_model = 8\nheads = 2\nlayers = 2\n";

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train, TrainSpec::default());
        assert_eq!(c.moe, MoeConfig::default());
        assert_eq!(c.data.scheme, SplitScheme::Standard);
        assert_eq!(c.model_config(), ModelConfig::tiny(16, 4, 8, 2, 2));
    }

    #[test]
    fn all_missing_keys_listed() {
        match ExperimentConfig::parse("[model]\npatch = 4\n").unwrap_err() {
            Error::MissingKeys(k) => assert_eq!(
                k,
                vec!["model.lookback", "model.d_model", "model.heads", "model.layers", "data.path or data.preset"]
            ),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn all_unknown_keys_listed() {
        let text = format!("{MINIMAL}lookbak = 3\n[trian]\nx = 1\n[moe]\ntopk = 2\n");
        let e = ExperimentConfig::parse(&text).unwrap_err().to_string();
        for k in ["model.lookbak", "[trian]", "moe.topk"] {
            assert!(e.contains(k), "{e}");
        }
    }

    #[test]
    fn key_lists_cover_every_field() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        c.data.path = Some("x.csv".into());
        c.data.delay = Some(3);
        c.data.seed = Some(1);
        c.data.name = Some("n".into());
        c.model.stride = Some(4);
        c.model.moe_layers = Some(vec![1]);
        c.model.init_std = Some(0.1);
        c.train.grad_clip = Some(1.0);
        c.moe.expert_hidden = Some(4);
        c.moe.shared_hidden = Some(4);
        c.graph.tau_end = Some(0.1);
        let table: toml::Table = toml::from_str(&c.to_toml().unwrap()).unwrap();
        for (section, keys) in SECTION_KEYS {
            let mut got: Vec<&str> = table[section].as_table().unwrap().keys().map(String::as_str).collect();
            let mut want = keys.to_vec();
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want, "{section}");
        }
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let text = c.to_toml().unwrap();
        let again = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_toml().unwrap(), text);
    }
}
