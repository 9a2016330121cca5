//! Experiment configuration read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use owr_core::backbone::{Activation, ExtractorConfig};
use owr_core::datasets::{
    gen_synthetic, load_feature_csv, CsvSchema, Dataset, Generator, SyntheticSpec,
};
use owr_core::protocol::{MethodConfig, RejectionRule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        generator: Generator,
        n_classes: usize,
        dim: usize,
        samples_per_class: usize,
        variance_range: (f64, f64),
        spacing: f64,
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "yes")]
        has_header: bool,
        #[serde(default)]
        label_column: usize,
        #[serde(default)]
        split_column: Option<usize>,
        #[serde(default)]
        split_seed: u64,
    },
}

fn yes() -> bool {
    true
}

impl DatasetConfig {
    /// Relative CSV paths resolve against `base`, normally the config's directory.
    pub fn load(&self, base: &Path) -> Result<Dataset, CliError> {
        match self {
            DatasetConfig::Synthetic {
                generator,
                n_classes,
                dim,
                samples_per_class,
                variance_range,
                spacing,
                seed,
            } => {
                let spec = SyntheticSpec {
                    generator: *generator,
                    n_classes: *n_classes,
                    dim: *dim,
                    samples_per_class: *samples_per_class,
                    variance_range: *variance_range,
                    spacing: *spacing,
                    seed: *seed,
                };
                gen_synthetic(&spec).map_err(CliError::config)
            }
            DatasetConfig::Csv {
                path,
                has_header,
                label_column,
                split_column,
                split_seed,
            } => {
                let schema = CsvSchema {
                    has_header: *has_header,
                    label_column: *label_column,
                    split_column: *split_column,
                    split_seed: *split_seed,
                };
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base.join(path)
                };
                if !full.exists() {
                    return Err(CliError::Config(format!(
                        "dataset file {} does not exist",
                        full.display()
                    )));
                }
                load_feature_csv(&full, &schema).map_err(CliError::config)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSection {
    /// Output width of each dense layer; the last one is the feature size.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        ExtractorSection {
            layer_dims: vec![32, 16],
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

impl ExtractorSection {
    pub fn resolve(&self, input_dim: usize, init_seed: u64) -> ExtractorConfig {
        ExtractorConfig {
            input_dim,
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            init_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub n_known: usize,
    pub initial: usize,
    pub step: usize,
    pub order_seeds: Vec<u64>,
    #[serde(default = "one")]
    pub runs: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Rules reported by `run`; empty means the method's own rule.
    pub rules: Vec<RejectionRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Relative directories resolve against the output root.
    pub dir: PathBuf,
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("experiment"),
            checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub extractor: ExtractorSection,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// A small blobs experiment with every field spelled out.
    pub fn example() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                generator: Generator::GaussianBlobs,
                n_classes: 10,
                dim: 16,
                samples_per_class: 150,
                variance_range: (0.5, 1.0),
                spacing: 12.0,
                seed: 0,
            },
            extractor: ExtractorSection::default(),
            schedule: ScheduleConfig {
                n_known: 6,
                initial: 2,
                step: 2,
                order_seeds: vec![0],
                runs: 1,
            },
            method: MethodConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; a relative CSV path becomes relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let DatasetConfig::Csv { path: csv, .. } = &mut config.dataset {
            if csv.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *csv = base.join(&*csv);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.training.validate().map_err(CliError::config)?;
        let s = &self.schedule;
        if s.order_seeds.is_empty() || s.runs == 0 {
            return Err(CliError::Config(
                "schedule.order_seeds must be non-empty and schedule.runs positive".into(),
            ));
        }
        if self.extractor.layer_dims.is_empty() || self.extractor.layer_dims.contains(&0) {
            return Err(CliError::Config(
                "extractor.layer_dims must list positive widths".into(),
            ));
        }
        if self.extractor.activation == Activation::Identity && self.extractor.layer_dims.len() > 1
        {
            return Err(CliError::Config(
                "extractor.activation = \"identity\" requires a single layer".into(),
            ));
        }
        let m = &self.method;
        if m.nno_z.is_nan() || m.nno_z <= 0.0 || !(0.0..=1.0).contains(&m.nno_quantile) {
            return Err(CliError::Config(
                "method.nno_z must be positive and method.nno_quantile in [0, 1]".into(),
            ));
        }
        if !(m.deepnno_initial_tau > 0.0 && m.deepnno_initial_tau < 1.0) {
            return Err(CliError::Config(
                "method.deepnno_initial_tau must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn rules(&self) -> Vec<RejectionRule> {
        if self.evaluation.rules.is_empty() {
            vec![default_rule(&self.method)]
        } else {
            self.evaluation.rules.clone()
        }
    }
}

pub fn default_rule(method: &MethodConfig) -> RejectionRule {
    use owr_core::protocol::Method;
    match method.kind {
        Method::Ours => RejectionRule::ClassSpecific,
        Method::Nno => RejectionRule::Nno,
        Method::Deepnno => RejectionRule::DeepnnoHeuristic,
    }
}
