//! TOML run configuration.
//!
//! ```toml
//! [sequence]
//! name = "ADA"
//! pad = 1
//! width = 0.5
//! steps = 10
//!
//! [data]
//! response_columns = 1
//!
//! [trainer]
//! n_subset = "all"
//! seed = 7
//!
//! [optimizer]
//! max_iters = 2000
//! ```
//!
//! Every section except `[sequence]` is optional and every unknown key is an
//! error. Relative data paths are resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::optimizer::OptimizerConfig;
use crate::sequence::{check_sequence_name, parse_sequence, AffineCost, SequenceOverrides, SequenceSpec, WidthSchedule};
use crate::trainer::{SubsetSize, TrainConfig};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sequence: SequenceSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSection {
    pub name: String,
    pub pad: Option<usize>,
    pub drop: Option<usize>,
    pub inner_dim: Option<usize>,
    pub width: Option<f64>,
    pub widths: Option<Vec<f64>>,
    pub steps: Option<usize>,
    pub steps_per_module: Option<Vec<usize>>,
    #[serde(default)]
    pub schedule: WidthSchedule,
    pub lambda: Option<f64>,
    pub inner_affine_cost: Option<AffineCost>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Number of trailing CSV columns holding responses.
    #[serde(default = "one")]
    pub response_columns: usize,
    /// Forces header handling; detected from the first row when absent.
    pub header: Option<bool>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

fn one() -> usize {
    1
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            response_columns: 1,
            header: None,
            train: None,
            test: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum SubsetField {
    Count(usize),
    Word(String),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub max_sigma_loops: usize,
    pub sigma_decay: f64,
    pub seed: u64,
    pub n_subset: SubsetField,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainerSection {
            max_sigma_loops: d.max_sigma_loops,
            sigma_decay: d.sigma_decay,
            seed: d.seed,
            n_subset: SubsetField::Word("all".into()),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = RunConfig::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses config text; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string().trim_end()))?;
        cfg.validate().map_err(|e| Error::parse(origin, e.to_string()))?;
        Ok(cfg)
    }

    /// Field checks that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if self.sequence.name.trim().is_empty() {
            return Err(Error::invalid("sequence.name must not be empty"));
        }
        if self.data.response_columns == 0 {
            return Err(Error::invalid("data.response_columns must be at least 1"));
        }
        self.train_config()?.validate().map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::invalid(format!("[trainer]/[optimizer]: {msg}")),
            other => other,
        })?;
        check_sequence_name(&self.sequence.name)?;
        // override conflicts do not depend on the data; dimension checks wait for it
        match parse_sequence(&self.sequence.name, 1, self.data.response_columns, &self.overrides()) {
            Err(Error::Sequence { .. }) | Ok(_) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn subset_size(&self) -> Result<SubsetSize> {
        match &self.trainer.n_subset {
            SubsetField::Count(0) => Err(Error::invalid("trainer.n_subset must be at least 1")),
            SubsetField::Count(k) => Ok(SubsetSize::Count(*k)),
            SubsetField::Word(w) if w == "all" => Ok(SubsetSize::All),
            SubsetField::Word(w) => Err(Error::invalid(format!(
                "trainer.n_subset must be \"all\" or a positive integer, got {w:?}"
            ))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            max_sigma_loops: self.trainer.max_sigma_loops,
            sigma_decay: self.trainer.sigma_decay,
            optimizer: self.optimizer.clone(),
            seed: self.trainer.seed,
            n_subset: self.subset_size()?,
        })
    }

    pub fn overrides(&self) -> SequenceOverrides {
        let s = &self.sequence;
        SequenceOverrides {
            pad: s.pad,
            drop: s.drop,
            inner_dim: s.inner_dim,
            width: s.width,
            widths: s.widths.clone(),
            steps: s.steps,
            steps_per_module: s.steps_per_module.clone(),
            schedule: s.schedule,
            lambda: s.lambda,
            inner_affine_cost: s.inner_affine_cost,
        }
    }

    /// Builds the sequence for data with `x_dim` predictors.
    pub fn spec(&self, x_dim: usize) -> Result<SequenceSpec> {
        parse_sequence(&self.sequence.name, x_dim, self.data.response_columns, &self.overrides())
    }
}
