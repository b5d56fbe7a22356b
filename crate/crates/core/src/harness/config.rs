//! TOML experiment configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SyntheticSpec;
use super::HarnessError;
use crate::cafn::{Ablation, CafnConfig};
use crate::graphbuild::FeatureConfig;
use crate::magae::MagaeConfig;
use crate::txclm::TxclmConfig;

pub const SEED_ENV: &str = "TXFUSE_SEED";

/// Where transactions come from. Exactly one source per experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Jsonl { path: PathBuf, labels: PathBuf },
    Csv { path: PathBuf, labels: PathBuf },
    /// `from,to,count,value` edges; no per-transaction history, so the
    /// language branch sees empty sentences.
    EdgeList { path: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitStrategy {
    #[default]
    Random,
    Components,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub strategy: SplitStrategy,
    pub ratios: [f64; 3],
    pub downsample_benign: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { strategy: SplitStrategy::Random, ratios: [0.7, 0.1, 0.2], downsample_benign: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub min_freq: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { min_freq: 1 }
    }
}

/// Whole-pipeline variants. The first five map onto the fusion network;
/// `NoTa` drops the contrastive term from language pretraining and
/// `NoExpert` feeds the graph autoencoder random features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineAblation {
    #[default]
    None,
    Add,
    Linear,
    NoGraph,
    NoLm,
    NoTa,
    NoExpert,
}

impl PipelineAblation {
    pub const ALL: [PipelineAblation; 7] = [
        PipelineAblation::None,
        PipelineAblation::Add,
        PipelineAblation::Linear,
        PipelineAblation::NoGraph,
        PipelineAblation::NoLm,
        PipelineAblation::NoTa,
        PipelineAblation::NoExpert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineAblation::None => "none",
            PipelineAblation::Add => "add",
            PipelineAblation::Linear => "linear",
            PipelineAblation::NoGraph => "no-graph",
            PipelineAblation::NoLm => "no-lm",
            PipelineAblation::NoTa => "no-ta",
            PipelineAblation::NoExpert => "no-expert",
        }
    }

    pub fn fusion(self) -> Ablation {
        match self {
            PipelineAblation::Add => Ablation::Add,
            PipelineAblation::Linear => Ablation::Linear,
            PipelineAblation::NoGraph => Ablation::NoGraph,
            PipelineAblation::NoLm => Ablation::NoLm,
            _ => Ablation::None,
        }
    }

    pub fn uses_lm(self) -> bool {
        self != PipelineAblation::NoLm
    }

    pub fn uses_graph(self) -> bool {
        self != PipelineAblation::NoGraph
    }
}

impl FromStr for PipelineAblation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PipelineAblation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected one of none, add, linear, no-graph, no-lm, no-ta, no-expert"))
    }
}

/// One experiment. Seed fields inside module sections are overwritten by
/// the global `seed`; each module derives its own named streams from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub ablation: PipelineAblation,
    pub data: DataSource,
    pub synthetic: SyntheticSpec,
    pub split: SplitConfig,
    pub corpus: CorpusConfig,
    pub txclm: TxclmConfig,
    pub features: FeatureConfig,
    pub magae: MagaeConfig,
    pub cafn: CafnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            ablation: PipelineAblation::None,
            data: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            split: SplitConfig::default(),
            corpus: CorpusConfig::default(),
            txclm: TxclmConfig::default(),
            features: FeatureConfig::default(),
            magae: MagaeConfig::default(),
            cafn: CafnConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, HarnessError> {
        let mut cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Copies the global seed into every module section.
    pub fn propagate_seed(&mut self) {
        self.txclm.seed = self.seed;
        self.magae.seed = self.seed;
        self.cafn.seed = self.seed;
        self.features.centrality.seed = self.seed;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    /// Applies `TXFUSE_SEED` when set; returns whether it was.
    pub fn apply_env(&mut self) -> Result<bool, HarnessError> {
        self.apply_seed_var(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn apply_seed_var(&mut self, value: Option<&str>) -> Result<bool, HarnessError> {
        match value {
            None => Ok(false),
            Some(v) => {
                let seed = v.trim().parse().map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                self.set_seed(seed);
                Ok(true)
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if let DataSource::Synthetic = self.data {
            self.synthetic.validate()?;
        }
        if self.txclm.max_seq_len < 2 {
            return Err(HarnessError::Config("txclm.max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering, excluding the output directory.
    pub fn hash(&self) -> Result<String, HarnessError> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let s = c.to_toml()?;
        Ok(Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 7\nablation = \"no-ta\"\n[data]\nkind = \"jsonl\"\npath = \"tx.jsonl\"\nlabels = \"l.csv\"\n[cafn]\nk_s = 3\nseed = 99\n",
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.cafn.seed, cfg.magae.seed, cfg.cafn.k_s), (7, 7, 7, 3));
        assert_eq!(cfg.ablation, PipelineAblation::NoTa);
        assert!(matches!(cfg.data, DataSource::Jsonl { .. }));
        assert!(ExperimentConfig::from_toml_str("[data]\nkind = \"ftp\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus_key = 1\nseed = \"x\"").is_err());
    }

    #[test]
    fn env_seed_and_hash() {
        let mut cfg = ExperimentConfig::default();
        let h0 = cfg.hash().unwrap();
        assert!(!cfg.apply_seed_var(None).unwrap());
        assert!(cfg.apply_seed_var(Some("42")).unwrap());
        assert_eq!((cfg.seed, cfg.txclm.seed), (42, 42));
        assert_ne!(cfg.hash().unwrap(), h0);
        assert!(cfg.apply_seed_var(Some("-1")).is_err());
        let mut other = cfg.clone();
        other.output_dir = "elsewhere".into();
        assert_eq!(other.hash().unwrap(), cfg.hash().unwrap());
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in PipelineAblation::ALL {
            assert_eq!(a.name().parse::<PipelineAblation>().unwrap(), a);
        }
    }
}
