//! Mini-batch training, evaluation, and checkpointing for the hybrid model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TaskKind};
use super::model::{HybridModel, ModelGrads};
use super::{streams, HarnessError};
use crate::controller::NamedArray;
use crate::data::{
    downsample, load_idx, make_binary_task, make_multiclass_task, LabeledImageSet,
};
use crate::genome::{random_genome, CircuitGenome};
use crate::metrics::{accuracy, auc_binary, recall_f1, EvalRecord, MetricsRecord};
use crate::nn::{adam_step, AdamState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Loads the configured IDX pair, applies downsampling, and builds the
/// train/test subsets for the configured task.
pub fn load_task(cfg: &RunConfig) -> Result<(LabeledImageSet, LabeledImageSet), HarnessError> {
    let set = load_idx(&cfg.data.images, &cfg.data.labels)?;
    let set = if cfg.data.downsample > 1 {
        downsample(&set, cfg.data.downsample)?
    } else {
        set
    };
    let pair = match cfg.task.kind {
        TaskKind::Binary => make_binary_task(
            &set,
            cfg.task.class_a.expect("validated"),
            cfg.task.class_b.expect("validated"),
            cfg.task.n_train,
            cfg.task.n_test,
            cfg.seed,
        )?,
        TaskKind::Multiclass => {
            make_multiclass_task(&set, cfg.task.n_train, cfg.task.n_test, cfg.seed)?
        }
    };
    Ok(pair)
}

/// Resolves the circuit genome: an explicit file (CLI override first, then
/// the config key), otherwise a random genome derived from the run seed.
pub fn resolve_genome(
    cfg: &RunConfig,
    override_path: Option<&Path>,
) -> Result<CircuitGenome, HarnessError> {
    let cells = cfg.n_qubits();
    let path = override_path.or(cfg.model.genome.as_deref());
    let genome = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            CircuitGenome::from_text(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
        }
        None => random_genome(cells, cfg.model.pqc_layers, super::mix_seed(cfg.seed, 2, 0))?,
    };
    if genome.n_qubits != cells {
        return Err(HarnessError::Config(format!(
            "genome has {} qubits, the {}x{} window needs {cells}",
            genome.n_qubits, cfg.model.window[0], cfg.model.window[1]
        )));
    }
    Ok(genome)
}

/// Training state: the model, one Adam state per parameter array, and the
/// batch-shuffling generator. Checkpoints capture all of it, so a resumed
/// run continues the exact uninterrupted trajectory.
pub struct Trainer {
    pub model: HybridModel,
    pub epoch: usize,
    adam: Vec<AdamState>,
    shuffle_rng: ChaCha8Rng,
    batch_size: usize,
}

impl Trainer {
    pub fn new(
        cfg: &RunConfig,
        genome: CircuitGenome,
        input: (usize, usize),
        n_classes: usize,
    ) -> Result<Self, HarnessError> {
        Self::with_seed(cfg, genome, input, n_classes, cfg.seed)
    }

    /// Like `new` with an explicit seed; architecture search uses this to
    /// give every inner training run its own derived seed.
    pub fn with_seed(
        cfg: &RunConfig,
        genome: CircuitGenome,
        input: (usize, usize),
        n_classes: usize,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(streams::INIT);
        let model = HybridModel::build(&cfg.model, genome, input, n_classes, &mut init_rng)?;
        let adam = model
            .param_arrays()
            .iter()
            .map(|(_, a)| AdamState::new(cfg.optim.lr, a.len()))
            .collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(streams::SHUFFLE);
        Ok(Trainer {
            model,
            epoch: 0,
            adam,
            shuffle_rng,
            batch_size: cfg.optim.batch,
        })
    }

    /// One pass over the training set in seeded-shuffled batches; Adam steps
    /// on the batch-mean gradients. Returns the mean sample loss.
    pub fn train_epoch(&mut self, train: &LabeledImageSet) -> Result<f64, HarnessError> {
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut self.shuffle_rng);
        let mut total = 0.0;
        for chunk in indices.chunks(self.batch_size) {
            let mut grads = ModelGrads::zeros_like(&self.model);
            for &i in chunk {
                total +=
                    self.model
                        .loss_and_grads(train.image(i), train.label(i) as usize, &mut grads)?;
            }
            grads.scale(1.0 / chunk.len() as f64);
            for ((_, params), (grad, state)) in self
                .model
                .param_arrays_mut()
                .into_iter()
                .zip(grads.arrays().iter().zip(&mut self.adam))
            {
                adam_step(params, grad, state)?;
            }
        }
        self.epoch += 1;
        Ok(total / train.len() as f64)
    }

    /// Class probabilities over a whole set.
    pub fn evaluate(&self, set: &LabeledImageSet) -> Result<EvalRecord, HarnessError> {
        let mut scores = Vec::with_capacity(set.len());
        for i in 0..set.len() {
            scores.push(self.model.probabilities(set.image(i))?);
        }
        Ok(EvalRecord::new(scores, set.labels().to_vec())?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let shapes = self.model.param_shapes();
        let tensors = self
            .model
            .param_arrays()
            .into_iter()
            .zip(shapes)
            .map(|((name, data), (_, shape))| NamedArray {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        let adam = self
            .model
            .param_arrays()
            .into_iter()
            .zip(&self.adam)
            .map(|((name, _), state)| AdamSnapshot {
                name: name.to_string(),
                learning_rate: state.learning_rate,
                t: state.t,
                m: state.m.clone(),
                v: state.v.clone(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_FORMAT_VERSION,
            epoch: self.epoch,
            n_classes: self.model.dims.n_classes,
            input_height: self.model.dims.input.0,
            input_width: self.model.dims.input.1,
            batch_size: self.batch_size,
            genome: self.model.genome.to_text(),
            tensors,
            adam,
            shuffle_rng: self.shuffle_rng.clone(),
        }
    }

    /// Rebuilds a trainer from a checkpoint under the given config. Any
    /// disagreement between the config's topology and the stored tensor
    /// shapes is a checkpoint error.
    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self, HarnessError> {
        let bad = |detail: String| HarnessError::Checkpoint(detail);
        if ck.version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!(
                "version {} unsupported (supported: {CHECKPOINT_FORMAT_VERSION})",
                ck.version
            )));
        }
        let genome = CircuitGenome::from_text(&ck.genome)
            .map_err(|e| bad(format!("stored genome: {e}")))?;
        let mut trainer = Trainer::with_seed(
            cfg,
            genome,
            (ck.input_height, ck.input_width),
            ck.n_classes,
            0,
        )
        .map_err(|e| bad(format!("config does not rebuild this model: {e}")))?;

        let shapes = trainer.model.param_shapes();
        if ck.tensors.len() != shapes.len() {
            return Err(bad(format!(
                "{} tensors stored, model has {}",
                ck.tensors.len(),
                shapes.len()
            )));
        }
        for (((name, shape), (_, dest)), stored) in shapes
            .iter()
            .zip(trainer.model.param_arrays_mut())
            .zip(&ck.tensors)
        {
            if stored.name != *name || &stored.shape != shape {
                return Err(bad(format!(
                    "tensor {:?} {:?} does not match expected {name:?} {shape:?}",
                    stored.name, stored.shape
                )));
            }
            if stored.data.len() != dest.len() {
                return Err(bad(format!(
                    "tensor {name:?} holds {} values, expected {}",
                    stored.data.len(),
                    dest.len()
                )));
            }
            dest.copy_from_slice(&stored.data);
        }

        if ck.adam.len() != trainer.adam.len() {
            return Err(bad(format!(
                "{} optimizer slots stored, model has {}",
                ck.adam.len(),
                trainer.adam.len()
            )));
        }
        for ((state, stored), (name, _)) in trainer
            .adam
            .iter_mut()
            .zip(&ck.adam)
            .zip(trainer.model.param_arrays())
        {
            if stored.name != name {
                return Err(bad(format!(
                    "optimizer slot {:?}, expected {name:?}",
                    stored.name
                )));
            }
            if stored.m.len() != state.m.len() || stored.v.len() != state.v.len() {
                return Err(bad(format!("optimizer slot {name:?} has wrong length")));
            }
            state.learning_rate = stored.learning_rate;
            state.t = stored.t;
            state.m = stored.m.clone();
            state.v = stored.v.clone();
        }

        trainer.epoch = ck.epoch;
        trainer.batch_size = ck.batch_size;
        trainer.shuffle_rng = ck.shuffle_rng.clone();
        Ok(trainer)
    }
}

/// Everything needed to resume training exactly where it stopped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub n_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub batch_size: usize,
    /// Genome in its text format.
    pub genome: String,
    pub tensors: Vec<NamedArray>,
    pub adam: Vec<AdamSnapshot>,
    pub shuffle_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub name: String,
    pub learning_rate: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(ck)
        .map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text)
        .map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Builds one metrics record from an evaluation; AUC is attached for
/// two-class records.
pub fn metrics_record_for(
    cfg: &RunConfig,
    epoch: usize,
    train_loss: Option<f64>,
    record: &EvalRecord,
) -> Result<MetricsRecord, HarnessError> {
    let auc = if record.n_classes() == 2 {
        Some(auc_binary(&record.class_scores(1), record.labels())?)
    } else {
        None
    };
    let (macro_recall, macro_f1) = recall_f1(record);
    Ok(MetricsRecord {
        run_id: format!("run-s{}", cfg.seed),
        task: cfg.task_name(),
        epoch,
        train_loss,
        accuracy: accuracy(record),
        macro_recall,
        macro_f1,
        auc,
    })
}

/// Runs epochs until the trainer reaches `optim.epochs`, each followed by a
/// test-set evaluation appended to the history (and to the results log, if
/// given). A freshly resumed trainer picks up mid-count and produces the
/// same remaining records as the uninterrupted run.
pub fn continue_training(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    log_path: Option<&Path>,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Data(crate::data::DataError::EmptySet));
    }
    let mut history = Vec::new();
    while trainer.epoch < cfg.optim.epochs {
        let loss = trainer.train_epoch(train)?;
        let record = trainer.evaluate(test)?;
        let row = metrics_record_for(cfg, trainer.epoch, Some(loss), &record)?;
        if let Some(path) = log_path {
            crate::metrics::append_record(path, &row)?;
        }
        history.push(row);
    }
    Ok(history)
}

/// Full training loop from a fresh model: `optim.epochs` passes over the
/// training set.
pub fn train_model(
    cfg: &RunConfig,
    genome: CircuitGenome,
    train: &LabeledImageSet,
    test: &LabeledImageSet,
    log_path: Option<&Path>,
) -> Result<(Trainer, Vec<MetricsRecord>), HarnessError> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Data(crate::data::DataError::EmptySet));
    }
    let n_classes = match cfg.task.kind {
        TaskKind::Binary => 2,
        TaskKind::Multiclass => train.class_count(),
    };
    let mut trainer = Trainer::new(cfg, genome, (train.height(), train.width()), n_classes)?;
    let history = continue_training(cfg, &mut trainer, train, test, log_path)?;
    Ok((trainer, history))
}
