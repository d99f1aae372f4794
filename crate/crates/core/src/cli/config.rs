//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Variant;
use crate::data::{self, DomainDataset, Geometry, ShiftSpec};
use crate::error::{Error, Result};
use crate::trainer::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Task label used in reports.
    pub task: String,
    pub geometry: Geometry,
    pub shift: ShiftSpec,
    pub n_per_class: usize,
    pub class_count: usize,
    pub dim: usize,
    /// Read the source domain from this CSV instead of generating it.
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: "synthetic".into(),
            geometry: Geometry::Clusters,
            shift: ShiftSpec::rotation(0.5, 0.0, 0),
            n_per_class: 100,
            class_count: 3,
            dim: 2,
            source: None,
            target: None,
        }
    }
}

impl DataConfig {
    /// Source and target for run seed `seed`. Generated data offsets the
    /// shift seed by the run seed so every seed sees a fresh draw.
    pub fn load(&self, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
        match (&self.source, &self.target) {
            (Some(s), Some(t)) => {
                let source = data::load_dataset(s, Some(self.class_count))?;
                let target = data::load_dataset(t, Some(self.class_count))?;
                Ok((source, target))
            }
            (None, None) => {
                let mut shift = self.shift.clone();
                shift.seed = shift.seed.wrapping_add(seed);
                data::generate_pair_with(self.geometry, &shift, self.n_per_class, self.class_count, self.dim)
            }
            _ => Err(Error::Config("data.source and data.target must be given together".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    /// Method trained by `train`.
    pub name: String,
    /// Methods run by `sweep`; empty means just `name`.
    pub sweep: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for VariantConfig {
    fn default() -> Self {
        Self {
            name: "gvida".into(),
            sweep: Vec::new(),
            seeds: vec![0],
        }
    }
}

impl VariantConfig {
    pub fn variant(&self) -> Result<Variant> {
        self.name.parse()
    }

    pub fn sweep_variants(&self) -> Result<Vec<Variant>> {
        if self.sweep.is_empty() {
            return Ok(vec![self.variant()?]);
        }
        self.sweep.iter().map(|s| s.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub runs_dir: PathBuf,
    pub name: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            runs_dir: PathBuf::from("runs"),
            name: "experiment".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variant: VariantConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })?;
        cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A missing or unreadable file is a
    /// configuration error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.variant.variant()?;
        self.variant.sweep_variants()?;
        if self.variant.seeds.is_empty() {
            return Err(Error::Config("variant.seeds must not be empty".into()));
        }
        if self.output.name.is_empty() || self.output.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("output.name {:?} is not a plain directory name", self.output.name)));
        }
        let d = &self.data;
        if d.source.is_none() && (d.class_count < 2 || d.dim < 2 || d.n_per_class == 0) {
            return Err(Error::Config(format!(
                "data needs class_count >= 2, dim >= 2, n_per_class >= 1 (got {}, {}, {})",
                d.class_count, d.dim, d.n_per_class
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
