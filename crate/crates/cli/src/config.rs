//! Run configuration: JSON file sections with strict schemas, overridden by
//! command-line flags, fully resolved and echoed beside every run's outputs.

use serde::{Deserialize, Serialize};
use surfuse_core::data::Preprocess;
use surfuse_core::model::{ConvStage, TactileBranchConfig, VisionBranchConfig};
use surfuse_core::train::TrainConfig;

/// Vision section of the config file; `n_classes` always comes from the
/// dataset, never from the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionSection {
    pub input_hw: usize,
    pub in_channels: usize,
    pub stages: Vec<ConvStage>,
    pub feature_dim: usize,
    pub projection_norm: bool,
    pub head_hidden: usize,
    pub dropout: f64,
    pub n_unfrozen_tensors: usize,
}

impl Default for VisionSection {
    fn default() -> Self {
        let v = VisionBranchConfig::new(2);
        VisionSection {
            input_hw: v.input_hw,
            in_channels: v.in_channels,
            stages: v.stages,
            feature_dim: v.feature_dim,
            projection_norm: v.projection_norm,
            head_hidden: v.head_hidden,
            dropout: v.dropout,
            n_unfrozen_tensors: v.n_unfrozen_tensors,
        }
    }
}

impl VisionSection {
    pub fn into_branch_config(self, n_classes: usize) -> VisionBranchConfig {
        VisionBranchConfig {
            input_hw: self.input_hw,
            in_channels: self.in_channels,
            stages: self.stages,
            feature_dim: self.feature_dim,
            projection_norm: self.projection_norm,
            head_hidden: self.head_hidden,
            dropout: self.dropout,
            n_unfrozen_tensors: self.n_unfrozen_tensors,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TactileSection {
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub head_hidden: usize,
}

impl Default for TactileSection {
    fn default() -> Self {
        let t = TactileBranchConfig::new(2);
        TactileSection {
            d_model: t.d_model,
            heads: t.heads,
            d_ffn: t.d_ffn,
            dropout: t.dropout,
            head_hidden: t.head_hidden,
        }
    }
}

impl TactileSection {
    pub fn into_branch_config(self, n_classes: usize) -> TactileBranchConfig {
        TactileBranchConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ffn: self.d_ffn,
            dropout: self.dropout,
            head_hidden: self.head_hidden,
            n_classes,
        }
    }
}

/// The config file: every section optional, unknown keys rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub vision: VisionSection,
    pub tactile: TactileSection,
    pub preprocess: Preprocess,
    /// Share of the dataset assigned to the training split.
    pub train_ratio: f64,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            train: TrainConfig::default(),
            vision: VisionSection::default(),
            tactile: TactileSection::default(),
            preprocess: Preprocess::default(),
            train_ratio: 0.8,
        }
    }
}

impl FileConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

/// Fully-resolved settings echoed as `config.resolved.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig<'a> {
    pub command: &'a str,
    pub precision: &'a str,
    pub data: Option<String>,
    pub n_classes: Option<usize>,
    pub config: &'a FileConfig,
    pub extras: serde_json::Value,
}

pub fn write_resolved(
    out_dir: &std::path::Path,
    resolved: &ResolvedConfig<'_>,
) -> std::io::Result<()> {
    let json = serde_json::to_string_pretty(resolved).expect("resolved config serializes");
    std::fs::write(out_dir.join("config.resolved.json"), json)
}
