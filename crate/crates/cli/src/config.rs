//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use acd_core::generate::{stream_rng, GeneralSbmConfig, GraphFamily, SymmetricSbmConfig};
use acd_core::model::{HeadKind, ModelConfig};
use acd_core::snap::{SnapConstraints, SplitSpec, TupleMode};

use crate::error::{CliError, Result};

/// Where the graphs of one split come from: a dataset file, or `count`
/// graphs generated from `family`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default)]
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<GraphFamily>,
}

impl DataSource {
    pub fn generated(family: GraphFamily, count: usize) -> Self {
        Self {
            count,
            path: None,
            family: Some(family),
        }
    }

    fn validate(&self, split: &str) -> Result<()> {
        match (&self.path, &self.family) {
            (Some(_), Some(_)) => Err(CliError::config(format!("data.{split}: give either `path` or `family`, not both"))),
            (None, None) => Err(CliError::config(format!("data.{split}: needs `path` or `family`"))),
            (None, Some(f)) => {
                if self.count == 0 {
                    return Err(CliError::config(format!("data.{split}: `count` must be positive")));
                }
                f.validate().map_err(|e| CliError::config(format!("data.{split}: {e}")))
            }
            (Some(_), None) => Ok(()),
        }
    }
}

fn general_sbm() -> GraphFamily {
    GraphFamily::GeneralSbm(GeneralSbmConfig::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<DataSource>,
    pub test: DataSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: DataSource::generated(general_sbm(), 20000),
            val: Some(DataSource::generated(general_sbm(), 1000)),
            test: DataSource::generated(general_sbm(), 1000),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    /// Defaults to 1e-4, or 5e-5 for the NCP heads.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Zero disables validation.
    pub validate_every: u64,
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch: 16,
            lr: None,
            checkpoint_every: 1000,
            validate_every: 500,
            val_samples: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub samples: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { samples: 15 }
    }
}

/// A grid of symmetric log-degree SBMs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n: usize,
    pub k: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub reps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n: 300,
            k: 2,
            a: (1..=10).map(|i| 2.0 * i as f64).collect(),
            b: (0..=8).map(f64::from).collect(),
            reps: 5,
        }
    }
}

impl SweepConfig {
    pub fn cell(&self, a: f64, b: f64) -> SymmetricSbmConfig {
        SymmetricSbmConfig { n: self.n, k: self.k, a, b }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub bins: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self { bins: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub samples: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { samples: vec![1, 5, 15, 30] }
    }
}

/// Subgraphs cut from a real network with ground-truth communities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapSource {
    /// Edge list, one whitespace-separated pair of node ids per line.
    pub edges: PathBuf,
    /// One community per line, as whitespace-separated node ids.
    pub communities: PathBuf,
    #[serde(default = "default_snap_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub constraints: SnapConstraints,
    #[serde(default = "default_tuple_mode")]
    pub mode: TupleMode,
}

fn default_snap_split() -> SplitSpec {
    SplitSpec {
        fractions: [0.6, 0.1, 0.3],
        max_graphs: [20000, 1000, 1000],
    }
}

fn default_tuple_mode() -> TupleMode {
    TupleMode::Fixed { k: 2 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub sweep: SweepConfig,
    pub calibrate: CalibrateConfig,
    pub bench: BenchConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snap: Option<SnapSource>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialise")
    }

    /// SHA-256 of the canonical TOML rendering, as lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn learning_rate(&self) -> f64 {
        self.train.lr.unwrap_or(match self.model.head {
            HeadKind::Ncp | HeadKind::NcpAttn => 5e-5,
            _ => 1e-4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| CliError::config(format!("model: {e}")))?;
        self.data.train.validate("train")?;
        if let Some(v) = &self.data.val {
            v.validate("val")?;
        }
        self.data.test.validate("test")?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(CliError::config("train.batch must be positive"));
        }
        if let Some(lr) = t.lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(CliError::config(format!("train.lr = {lr} must be positive")));
            }
        }
        if t.validate_every > 0 && t.val_samples == 0 {
            return Err(CliError::config("train.val_samples must be positive when validating"));
        }
        if self.infer.samples == 0 {
            return Err(CliError::config("infer.samples must be positive"));
        }
        let s = &self.sweep;
        if s.k == 0 || s.n == 0 || s.n % s.k != 0 || s.reps == 0 {
            return Err(CliError::config("sweep: K must divide N and reps must be positive"));
        }
        if s.a.iter().chain(&s.b).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CliError::config("sweep: a and b values must be finite and nonnegative"));
        }
        if self.calibrate.bins == 0 {
            return Err(CliError::config("calibrate.bins must be positive"));
        }
        if self.bench.samples.is_empty() || self.bench.samples.contains(&0) {
            return Err(CliError::config("bench.samples must be a nonempty list of positive counts"));
        }
        if let Some(snap) = &self.snap {
            snap.split.validate().map_err(|e| CliError::config(format!("snap.split: {e}")))?;
            let (lo, hi) = match snap.mode {
                TupleMode::Fixed { k } => (k, k),
                TupleMode::Cliques { min, max } => (min, max),
            };
            if lo == 0 || lo > hi {
                return Err(CliError::config(format!("snap.mode: community counts {lo}..={hi} are empty")));
            }
        }
        Ok(())
    }

    /// Generation seed of a split, derived from the experiment seed.
    pub fn split_seed(&self, split: &str) -> u64 {
        stream_rng(self.seed, &format!("split-{split}"), 0).random()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.seed = 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = ExperimentConfig::from_toml(
            r#"
            seed = 3
            [model]
            head = "ncp"
            encoder = "graphsage"
            hidden = 16
            [train]
            iterations = 10
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.hidden, 16);
        assert_eq!(c.train.batch, 16);
        assert_eq!(c.learning_rate(), 5e-5);
        c.validate().unwrap();
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[model]\nhead = \"gcn\"",
            "[model]\nencoder = \"gin\"",
            "[train]\nbatch = 0",
            "[train]\nlr = -1.0",
            "unknown = 1",
            "[sweep]\nn = 301\nk = 2",
            "[data.test]\ncount = 5",
            "[data.test]\ncount = 0\nfamily = { family = \"planted\", n_min = 5, n_max = 9, k_choices = [2], p = 0.5, q = 0.1 }",
            "[data.train]\ncount = 5\nfamily = { family = \"sym-sbm\", n = 10, k = 2, a = 9.0, b = 1.0 }",
        ] {
            let r = ExperimentConfig::from_toml(text).and_then(|c| c.validate());
            assert!(matches!(r, Err(CliError::Config(_))), "{text}");
        }
    }
}
