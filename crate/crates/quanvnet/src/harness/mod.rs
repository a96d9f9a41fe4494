//! Experiment orchestration: run configuration, the hybrid model, the
//! training loop, checkpointing, and architecture search.
//!
//! Everything is single-threaded and deterministic: a config plus its seed
//! fully determines every logged number. Random state is split into
//! independent ChaCha streams per concern (initialization, batch shuffling,
//! controller dropout, genome sampling, validation split) so adding draws to
//! one concern never perturbs another.

mod config;
mod model;
mod search;
mod trainer;

pub use config::{
    DataConfig, ModelConfig, OptimConfig, RunConfig, SearchConfig, TaskConfig, TaskKind,
};
pub use model::{HybridModel, ModelDims, ModelGrads};
pub use search::{architecture_search, architecture_search_with, SearchIteration, SearchReport};
pub use trainer::{
    continue_training, load_checkpoint, load_task, metrics_record_for, resolve_genome,
    save_checkpoint, train_model, Checkpoint, Trainer,
};

use thiserror::Error;

use crate::controller::ControllerError;
use crate::data::DataError;
use crate::genome::GenomeError;
use crate::metrics::MetricsError;
use crate::nn::NnError;
use crate::quanv::QuanvError;
use crate::qsim::QsimError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl HarnessError {
    /// Process exit code category: 2 config, 3 data, 4 checkpoint,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Checkpoint(_) => 4,
            HarnessError::Internal(_) => 1,
        }
    }
}

impl From<GenomeError> for HarnessError {
    fn from(e: GenomeError) -> Self {
        HarnessError::Config(format!("genome: {e}"))
    }
}

// Simulator, layer, and metric failures past config validation indicate a
// wiring bug, not a user mistake.
impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

impl From<QuanvError> for HarnessError {
    fn from(e: QuanvError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

impl From<QsimError> for HarnessError {
    fn from(e: QsimError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

impl From<ControllerError> for HarnessError {
    fn from(e: ControllerError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

impl From<MetricsError> for HarnessError {
    fn from(e: MetricsError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

/// ChaCha stream ids, one per random concern.
pub(crate) mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const SPLIT: u64 = 4;
}

/// Stateless seed mixer for deriving independent sub-run seeds (splitmix64
/// finalizer over seed and two indices).
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
