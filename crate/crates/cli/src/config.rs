//! Pipeline configuration: one TOML file, every field optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qflaw_core::curation::CostModel;
use qflaw_core::features::{FLAW_BACKBONE, RECOGNIZABILITY_BACKBONE};
use qflaw_core::flaws::default_train_config;
use qflaw_core::recognizability::TrainConfig;
use qflaw_core::vqa_reason::ReasonTrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; overrides every per-model seed.
    pub seed: u64,
    /// Decision threshold used by training, prediction, evaluation and filtering.
    pub threshold: f64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub aggregation: AggregationConfig,
    pub recognizability: RecognizabilityConfig,
    pub flaws: FlawsConfig,
    pub vqa: VqaConfig,
    pub curation: CurationConfig,
    pub cost: CostConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threshold: 0.5,
            out: None,
            data: DataConfig::default(),
            aggregation: AggregationConfig::default(),
            recognizability: RecognizabilityConfig::default(),
            flaws: FlawsConfig::default(),
            vqa: VqaConfig::default(),
            curation: CurationConfig::default(),
            cost: CostConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub annotations: Option<PathBuf>,
    pub aggregated: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    /// Base directory for image uris; defaults to the annotation file's directory.
    pub images: Option<PathBuf>,
    /// Directory of `<image_id>.qft` object-feature files for the reason model.
    pub object_features: Option<PathBuf>,
    pub feature_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub quorum: usize,
    /// Annotations required per image; 0 accepts any nonzero count.
    pub redundancy: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig { quorum: 2, redundancy: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizabilityConfig {
    pub backbone: String,
    pub split: Vec<f64>,
    pub stratify: bool,
    pub train: TrainConfig,
}

impl Default for RecognizabilityConfig {
    fn default() -> Self {
        RecognizabilityConfig {
            backbone: RECOGNIZABILITY_BACKBONE.to_string(),
            split: vec![0.525, 0.375, 0.10],
            stratify: true,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlawsConfig {
    pub backbone: String,
    pub split: Vec<f64>,
    pub train: TrainConfig,
}

impl Default for FlawsConfig {
    fn default() -> Self {
        FlawsConfig {
            backbone: FLAW_BACKBONE.to_string(),
            split: vec![0.525, 0.375, 0.10],
            train: default_train_config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqaConfig {
    /// Grid backbone used for regions when no object-feature directory is set.
    pub backbone: String,
    pub split: Vec<f64>,
    pub train: ReasonTrainConfig,
}

impl Default for VqaConfig {
    fn default() -> Self {
        VqaConfig {
            backbone: RECOGNIZABILITY_BACKBONE.to_string(),
            split: vec![0.70, 0.20, 0.10],
            train: ReasonTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    /// Manifest size for the perfect and random baselines when no predicted
    /// manifest fixes it.
    pub n: Option<usize>,
    /// Downstream results CSV for `report`.
    pub results: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub per_image_rate: f64,
    pub per_image_seconds: f64,
    pub redundancy: u32,
}

impl Default for CostConfig {
    fn default() -> Self {
        let d = CostModel::default();
        CostConfig {
            per_image_rate: d.per_image_rate,
            per_image_seconds: d.per_image_seconds,
            redundancy: d.redundancy,
        }
    }
}

impl CostConfig {
    pub fn model(&self) -> CostModel {
        CostModel {
            per_image_rate: self.per_image_rate,
            per_image_seconds: self.per_image_seconds,
            redundancy: self.redundancy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { bins: 20 }
    }
}

impl PipelineConfig {
    /// Reads a TOML file; relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut cfg.out);
        fix(&mut cfg.data.annotations);
        fix(&mut cfg.data.aggregated);
        fix(&mut cfg.data.questions);
        fix(&mut cfg.data.images);
        fix(&mut cfg.data.object_features);
        fix(&mut cfg.data.feature_cache);
        fix(&mut cfg.curation.results);
        Ok(cfg)
    }

    /// Pushes the global seed and threshold into the per-model blocks.
    pub fn propagate(&mut self) {
        for t in [&mut self.recognizability.train, &mut self.flaws.train] {
            t.seed = self.seed;
            t.threshold = self.threshold;
        }
        self.vqa.train.seed = self.seed;
        self.vqa.train.threshold = self.threshold;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            bail!(ConfigError(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.aggregation.quorum == 0 {
            bail!(ConfigError("quorum must be at least 1".into()));
        }
        if self.eval.bins == 0 {
            bail!(ConfigError("eval.bins must be positive".into()));
        }
        self.recognizability.train.validate()?;
        self.flaws.train.validate()?;
        self.cost.model().validate()?;
        for (name, p) in [
            ("data.annotations", &self.data.annotations),
            ("data.aggregated", &self.data.aggregated),
            ("data.questions", &self.data.questions),
            ("data.images", &self.data.images),
            ("data.object_features", &self.data.object_features),
            ("curation.results", &self.curation.results),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!(ConfigError(format!("{name} = {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, independent of paths and the
    /// output directory, truncated to 16 hex chars.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        canonical.data = DataConfig::default();
        canonical.curation.results = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// Config validation failure, reported with kind `config`.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: PipelineConfig = toml::from_str("seed = 7\n[aggregation]\nquorum = 3\n[recognizability.train]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.aggregation.quorum, 3);
        assert_eq!(cfg.aggregation.redundancy, 5);
        assert_eq!(cfg.recognizability.train.epochs, 2);
        assert_eq!(cfg.recognizability.train.hidden, vec![512]);
        assert_eq!(cfg.flaws.train.hidden, vec![512, 512]);
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.out = Some("/elsewhere".into());
        b.data.annotations = Some("x.json".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
