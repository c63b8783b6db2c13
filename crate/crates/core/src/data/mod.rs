//! CSV ingestion, synthetic series, chronological splits, window
//! extraction and the experiment config file.

mod config;
mod dataset;
mod split;
mod synth;

pub use config::{DataConfig, ExperimentConfig, REQUIRED_KEYS, SECTION_KEYS};
pub use dataset::{load_dataset, write_dataset, Dataset};
pub use split::{extract_pretrain_samples, split, window_count, windows, Split, SplitScheme};
pub use synth::{synth_generate, ChannelSpec, LagCopy, Sinusoid, SynthPreset, SynthSpec};
