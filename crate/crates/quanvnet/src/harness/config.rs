//! TOML run configuration with strict validation: unknown keys are rejected
//! and every value is range-checked before any compute starts.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::HarnessError;
use crate::qsim::MAX_QUBITS;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub task: TaskConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub search: SearchConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Mean-pool factor applied after loading: 1 (off), 2, or 4.
    #[serde(default = "one")]
    pub downsample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Binary tasks only: the two source classes, remapped to 0 and 1.
    pub class_a: Option<u8>,
    pub class_b: Option<u8>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_conv1_channels")]
    pub conv1_channels: usize,
    #[serde(default = "default_conv_kernel")]
    pub conv1_kernel: usize,
    /// Present: a second conv stage collapsing to 1 channel. Absent:
    /// conv1_channels must already be 1, since the quantum filter reads a
    /// single-channel map.
    pub conv2_kernel: Option<usize>,
    /// Quantum filter window [rows, cols]; rows*cols = qubit count.
    #[serde(default = "default_window")]
    pub window: [usize; 2],
    #[serde(default = "one")]
    pub stride: usize,
    /// Layer count when generating a random genome; ignored when `genome`
    /// points at a genome file.
    #[serde(default = "default_pqc_layers")]
    pub pqc_layers: usize,
    #[serde(default)]
    pub readout: usize,
    /// Present: two fully connected layers with this hidden width. Absent:
    /// a single fully connected layer.
    pub fc_hidden: Option<usize>,
    /// Optional genome file; absent means a random genome derived from the
    /// run seed.
    pub genome: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_model_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: default_model_lr(),
            batch: default_batch(),
            epochs: default_epochs(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default = "default_controller_lr")]
    pub lr: f64,
    #[serde(default = "default_genome_batch")]
    pub genome_batch: usize,
    #[serde(default = "default_inner_epochs")]
    pub inner_epochs: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Fraction of the training set held out as the reward validation split.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lr: default_controller_lr(),
            genome_batch: default_genome_batch(),
            inner_epochs: default_inner_epochs(),
            iterations: default_iterations(),
            validation_fraction: default_validation_fraction(),
        }
    }
}

fn one() -> usize {
    1
}
fn default_n_train() -> usize {
    1000
}
fn default_n_test() -> usize {
    200
}
fn default_conv1_channels() -> usize {
    4
}
fn default_conv_kernel() -> usize {
    3
}
fn default_window() -> [usize; 2] {
    [3, 3]
}
fn default_pqc_layers() -> usize {
    5
}
fn default_model_lr() -> f64 {
    0.005
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    30
}
fn default_controller_lr() -> f64 {
    0.001
}
fn default_genome_batch() -> usize {
    8
}
fn default_inner_epochs() -> usize {
    5
}
fn default_iterations() -> usize {
    20
}
fn default_validation_fraction() -> f64 {
    0.1
}

fn bad(key: &str, detail: String) -> HarnessError {
    HarnessError::Config(format!("{key}: {detail}"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Qubit count implied by the quantum filter window.
    pub fn n_qubits(&self) -> usize {
        self.model.window[0] * self.model.window[1]
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if ![1, 2, 4].contains(&self.data.downsample) {
            return Err(bad(
                "data.downsample",
                format!("{} not one of 1, 2, 4", self.data.downsample),
            ));
        }

        match self.task.kind {
            TaskKind::Binary => {
                let (a, b) = match (self.task.class_a, self.task.class_b) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(bad(
                            "task.class_a/class_b",
                            "binary tasks need both classes".into(),
                        ))
                    }
                };
                if a == b {
                    return Err(bad("task.class_b", format!("equals class_a ({a})")));
                }
            }
            TaskKind::Multiclass => {
                if self.task.class_a.is_some() || self.task.class_b.is_some() {
                    return Err(bad(
                        "task.class_a/class_b",
                        "not used by multiclass tasks".into(),
                    ));
                }
            }
        }
        for (key, n) in [
            ("task.n_train", self.task.n_train),
            ("task.n_test", self.task.n_test),
        ] {
            if n == 0 {
                return Err(bad(key, "must be positive".into()));
            }
        }

        let m = &self.model;
        for (key, v) in [
            ("model.conv1_channels", m.conv1_channels),
            ("model.conv1_kernel", m.conv1_kernel),
            ("model.stride", m.stride),
            ("model.pqc_layers", m.pqc_layers),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive".into()));
            }
        }
        if let Some(k) = m.conv2_kernel {
            if k == 0 {
                return Err(bad("model.conv2_kernel", "must be positive".into()));
            }
        } else if m.conv1_channels != 1 {
            return Err(bad(
                "model.conv1_channels",
                format!(
                    "{} channels reach the quantum filter, which reads one; add conv2_kernel or set conv1_channels = 1",
                    m.conv1_channels
                ),
            ));
        }
        let cells = self.n_qubits();
        if m.window[0] == 0 || m.window[1] == 0 {
            return Err(bad("model.window", "entries must be positive".into()));
        }
        if !(2..=MAX_QUBITS).contains(&cells) {
            return Err(bad(
                "model.window",
                format!(
                    "{}x{} window needs {cells} qubits, supported range is 2..={MAX_QUBITS}",
                    m.window[0], m.window[1]
                ),
            ));
        }
        if m.readout >= cells {
            return Err(bad(
                "model.readout",
                format!("{} out of range for {cells} qubits", m.readout),
            ));
        }
        if let Some(h) = m.fc_hidden {
            if h == 0 {
                return Err(bad("model.fc_hidden", "must be positive".into()));
            }
        }

        if !self.optim.lr.is_finite() || self.optim.lr < 0.0 {
            return Err(bad("optim.lr", format!("{} invalid", self.optim.lr)));
        }
        for (key, v) in [
            ("optim.batch", self.optim.batch),
            ("optim.epochs", self.optim.epochs),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive".into()));
            }
        }

        let s = &self.search;
        if !s.lr.is_finite() || s.lr < 0.0 {
            return Err(bad("search.lr", format!("{} invalid", s.lr)));
        }
        for (key, v) in [
            ("search.genome_batch", s.genome_batch),
            ("search.inner_epochs", s.inner_epochs),
            ("search.iterations", s.iterations),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive".into()));
            }
        }
        if !(s.validation_fraction > 0.0 && s.validation_fraction < 1.0) {
            return Err(bad(
                "search.validation_fraction",
                format!("{} outside (0, 1)", s.validation_fraction),
            ));
        }
        Ok(())
    }

    /// Human-readable task tag used in run ids and metrics records.
    pub fn task_name(&self) -> String {
        match self.task.kind {
            TaskKind::Binary => format!(
                "binary-{}-vs-{}",
                self.task.class_a.unwrap_or(0),
                self.task.class_b.unwrap_or(0)
            ),
            TaskKind::Multiclass => "multiclass".to_string(),
        }
    }
}
