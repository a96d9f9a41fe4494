//! Architecture search: a recurrent policy samples circuit genomes, each is
//! scored by a short training run, and the policy is updated by gradient on
//! the advantage-weighted log-probability of the sampled genomes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TaskKind};
use super::trainer::Trainer;
use super::{mix_seed, streams, HarnessError};
use crate::controller::{
    reinforce_update, sample_genome, ControllerOptimizer, ControllerParams, RewardBaseline,
};
use crate::data::LabeledImageSet;
use crate::genome::CircuitGenome;
use crate::metrics::accuracy;

/// One controller update: the batch of rewards, the baseline used for the
/// advantage (its value before this batch was folded in), and the policy
/// loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchIteration {
    pub iteration: usize,
    pub rewards: Vec<f64>,
    pub baseline: f64,
    pub loss: f64,
    pub mean_parameterized_fraction: f64,
    pub best_reward_so_far: f64,
}

/// Search outcome: the per-iteration trace and the best genome seen across
/// all sampled candidates (ties keep the earliest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub iterations: Vec<SearchIteration>,
    pub best_iteration: usize,
    pub best_index: usize,
    pub best_reward: f64,
    /// Best genome in its text format.
    pub best_genome: String,
}

/// Runs the search loop against an arbitrary reward function. The function
/// sees the iteration index, the position within the batch, and the sampled
/// genome; it returns the reward in any scale (higher is better).
pub fn architecture_search_with<F>(
    cfg: &RunConfig,
    mut reward_fn: F,
) -> Result<SearchReport, HarnessError>
where
    F: FnMut(usize, usize, &CircuitGenome) -> Result<f64, HarnessError>,
{
    cfg.validate()?;
    let n_qubits = cfg.n_qubits();
    let mut params = ControllerParams::new(n_qubits, mix_seed(cfg.seed, 1, 0))?;
    let mut opt = ControllerOptimizer::new(&params, cfg.search.lr);
    let mut baseline = RewardBaseline::new();
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(streams::SAMPLING);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(streams::DROPOUT);

    let mut iterations = Vec::with_capacity(cfg.search.iterations);
    let mut best: Option<(usize, usize, f64, CircuitGenome)> = None;
    for it in 0..cfg.search.iterations {
        let mut traces = Vec::with_capacity(cfg.search.genome_batch);
        let mut rewards = Vec::with_capacity(cfg.search.genome_batch);
        let mut fraction_sum = 0.0;
        for idx in 0..cfg.search.genome_batch {
            let (genome, trace) =
                sample_genome(&params, n_qubits, cfg.model.pqc_layers, &mut sample_rng)?;
            let reward = reward_fn(it, idx, &genome)?;
            if !reward.is_finite() {
                return Err(HarnessError::Internal(format!(
                    "reward for iteration {it} sample {idx} is {reward}"
                )));
            }
            fraction_sum += genome.parameterized_fraction();
            if best.as_ref().is_none_or(|(_, _, r, _)| reward > *r) {
                best = Some((it, idx, reward, genome));
            }
            traces.push(trace);
            rewards.push(reward);
        }
        let pre_update_baseline = baseline.value();
        let loss = reinforce_update(
            &mut params,
            &traces,
            &rewards,
            &mut baseline,
            &mut opt,
            &mut dropout_rng,
        )?;
        iterations.push(SearchIteration {
            iteration: it,
            rewards,
            baseline: pre_update_baseline,
            loss,
            mean_parameterized_fraction: fraction_sum / cfg.search.genome_batch as f64,
            best_reward_so_far: best.as_ref().map(|(_, _, r, _)| *r).unwrap_or(0.0),
        });
    }

    let (best_iteration, best_index, best_reward, best_genome) =
        best.ok_or_else(|| HarnessError::Internal("search produced no candidates".into()))?;
    Ok(SearchReport {
        iterations,
        best_iteration,
        best_index,
        best_reward,
        best_genome: best_genome.to_text(),
    })
}

/// Full search: carves a validation split off the training set, then scores
/// each sampled genome by training a fresh model for a few epochs and reading
/// validation accuracy (as a 0..1 reward). Every inner run gets its own seed
/// derived from the run seed and the sample's position.
pub fn architecture_search(
    cfg: &RunConfig,
    train: &LabeledImageSet,
) -> Result<SearchReport, HarnessError> {
    cfg.validate()?;
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(streams::SPLIT);
    indices.shuffle(&mut split_rng);
    let n_val = ((train.len() as f64 * cfg.search.validation_fraction).round() as usize)
        .clamp(1, train.len() - 1);
    let val = train.subset(&indices[..n_val]);
    let inner = train.subset(&indices[n_val..]);

    let n_classes = match cfg.task.kind {
        TaskKind::Binary => 2,
        TaskKind::Multiclass => train.class_count(),
    };
    let input = (train.height(), train.width());

    architecture_search_with(cfg, |it, idx, genome| {
        let mut trainer = Trainer::with_seed(
            cfg,
            genome.clone(),
            input,
            n_classes,
            mix_seed(cfg.seed, 1000 + it as u64, idx as u64),
        )?;
        for _ in 0..cfg.search.inner_epochs {
            trainer.train_epoch(&inner)?;
        }
        let record = trainer.evaluate(&val)?;
        Ok(accuracy(&record) / 100.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn search_config(body: &str) -> RunConfig {
        RunConfig::from_toml_str(&format!(
            r#"
seed = 7

[data]
images = "unused"
labels = "unused"

[task]
kind = "binary"
class_a = 0
class_b = 1
n_train = 4
n_test = 2

[model]
conv1_channels = 1
window = [2, 2]
pqc_layers = 2

[search]
{body}
"#
        ))
        .unwrap()
    }

    #[test]
    fn single_sample_search_reports_that_sample_as_best() {
        let cfg = search_config("iterations = 1\ngenome_batch = 1");
        let report = architecture_search_with(&cfg, |_, _, g| {
            Ok(g.count_params() as f64)
        })
        .unwrap();
        assert_eq!(report.iterations.len(), 1);
        assert_eq!(report.iterations[0].rewards.len(), 1);
        assert_eq!(report.best_iteration, 0);
        assert_eq!(report.best_index, 0);
        assert_eq!(report.best_reward, report.iterations[0].rewards[0]);
        let genome = CircuitGenome::from_text(&report.best_genome).unwrap();
        assert_eq!(genome.count_params() as f64, report.best_reward);
        // First iteration's advantage is computed against a zero baseline.
        assert_eq!(report.iterations[0].baseline, 0.0);
    }

    #[test]
    fn stub_reward_search_is_deterministic() {
        let cfg = search_config("iterations = 4\ngenome_batch = 3");
        let run = || {
            architecture_search_with(&cfg, |_, _, g| Ok(g.parameterized_fraction())).unwrap()
        };
        let a = serde_json::to_string(&run()).unwrap();
        let b = serde_json::to_string(&run()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ties_keep_the_earliest_candidate() {
        let cfg = search_config("iterations = 2\ngenome_batch = 2");
        let report = architecture_search_with(&cfg, |_, _, _| Ok(1.0)).unwrap();
        assert_eq!(report.best_iteration, 0);
        assert_eq!(report.best_index, 0);
        assert_eq!(report.best_reward, 1.0);
        assert!(report
            .iterations
            .iter()
            .all(|i| i.best_reward_so_far == 1.0));
    }

    #[test]
    fn non_finite_rewards_are_rejected() {
        let cfg = search_config("iterations = 1\ngenome_batch = 1");
        let err = architecture_search_with(&cfg, |_, _, _| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, HarnessError::Internal(_)));
    }

    #[test]
    fn full_search_improves_nothing_but_runs_end_to_end() {
        // Smallest viable end-to-end search: 6x6 inputs, 4 train samples.
        let cfg = search_config(
            "iterations = 2\ngenome_batch = 2\ninner_epochs = 1\nvalidation_fraction = 0.25",
        );
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..4u8 {
            let v = if i % 2 == 0 { 0.1 } else { 0.9 };
            pixels.extend(std::iter::repeat_n(v, 36));
            labels.push(i % 2);
        }
        let set = crate::data::LabeledImageSet::new(pixels, labels, 6, 6, 2).unwrap();
        let report = architecture_search(&cfg, &set).unwrap();
        assert_eq!(report.iterations.len(), 2);
        assert!(report.best_reward >= 0.0 && report.best_reward <= 1.0);
        CircuitGenome::from_text(&report.best_genome).unwrap();
    }
}
