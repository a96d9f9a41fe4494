//! `quanvnet`: train, search, and inspect hybrid quantum-classical image
//! classifiers described by TOML run configs.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use quanvnet::genome::CircuitGenome;
use quanvnet::harness::{
    architecture_search, continue_training, load_checkpoint, load_task, metrics_record_for,
    resolve_genome, save_checkpoint, train_model, HarnessError, RunConfig, Trainer,
};
use quanvnet::metrics::{aggregate, append_record};
use quanvnet::qsim::{GateKind, ParamSource};

#[derive(Parser)]
#[command(name = "quanvnet", version, about = "Hybrid quantum-classical image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a config file.
    Train {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Genome file overriding the config's genome settings.
        #[arg(long)]
        genome: Option<PathBuf>,
        /// Resume from a saved training state instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the final training state here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Append one JSON metrics line per epoch here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Search circuit architectures with the recurrent controller.
    Search {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Write the full search report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the best genome found (genome text format) here.
        #[arg(long)]
        genome_out: Option<PathBuf>,
    },
    /// Evaluate saved training states on the configured test set.
    Eval {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Saved training states; several are aggregated as mean +/- std.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Append one JSON metrics line per checkpoint here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Write the genome a run would use, or the one stored in a checkpoint.
    ExportGenome {
        /// Run config (TOML); the genome is resolved the way `train` would.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Take the genome stored in this training state instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Genome file overriding the config's genome settings.
        #[arg(long)]
        genome: Option<PathBuf>,
        /// Output path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the compiled gate list of a genome.
    InspectCircuit {
        /// Run config (TOML); the genome is resolved the way `train` would.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Genome file to inspect directly.
        #[arg(long)]
        genome: Option<PathBuf>,
        /// Inspect the genome stored in this training state.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Train {
            config,
            genome,
            resume,
            checkpoint,
            log,
        } => cmd_train(
            &config,
            genome.as_deref(),
            resume.as_deref(),
            checkpoint.as_deref(),
            log.as_deref(),
        ),
        Command::Search {
            config,
            report,
            genome_out,
        } => cmd_search(&config, report.as_deref(), genome_out.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            log,
        } => cmd_eval(&config, &checkpoint, log.as_deref()),
        Command::ExportGenome {
            config,
            checkpoint,
            genome,
            out,
        } => cmd_export_genome(
            config.as_deref(),
            checkpoint.as_deref(),
            genome.as_deref(),
            out.as_deref(),
        ),
        Command::InspectCircuit {
            config,
            genome,
            checkpoint,
        } => cmd_inspect_circuit(config.as_deref(), genome.as_deref(), checkpoint.as_deref()),
    }
}

fn cmd_train(
    config: &Path,
    genome_override: Option<&Path>,
    resume: Option<&Path>,
    checkpoint_out: Option<&Path>,
    log: Option<&Path>,
) -> Result<(), HarnessError> {
    let cfg = RunConfig::load(config)?;
    let (train, test) = load_task(&cfg)?;
    println!(
        "task {}: {} train / {} test images at {}x{}",
        cfg.task_name(),
        train.len(),
        test.len(),
        train.height(),
        train.width()
    );

    let (trainer, history) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut trainer = Trainer::from_checkpoint(&cfg, &ck)?;
            check_input_dims(&trainer, &train)?;
            println!("resumed at epoch {} from {}", trainer.epoch, path.display());
            let history = continue_training(&cfg, &mut trainer, &train, &test, log)?;
            (trainer, history)
        }
        None => {
            let genome = resolve_genome(&cfg, genome_override)?;
            println!(
                "genome: {} qubits, {} layers, {} trainable angles",
                genome.n_qubits,
                genome.n_layers,
                genome.count_params()
            );
            train_model(&cfg, genome, &train, &test, log)?
        }
    };
    for row in &history {
        match row.auc {
            Some(auc) => println!(
                "epoch {}/{} loss {:.4} accuracy {:.2} macro_f1 {:.4} auc {:.4}",
                row.epoch, cfg.optim.epochs, row.train_loss.unwrap_or(f64::NAN), row.accuracy,
                row.macro_f1, auc
            ),
            None => println!(
                "epoch {}/{} loss {:.4} accuracy {:.2} macro_f1 {:.4}",
                row.epoch, cfg.optim.epochs, row.train_loss.unwrap_or(f64::NAN), row.accuracy,
                row.macro_f1
            ),
        }
    }
    if history.is_empty() {
        println!("nothing to do: trainer already at epoch {}", trainer.epoch);
    }
    if let Some(path) = checkpoint_out {
        save_checkpoint(path, &trainer.checkpoint())?;
        println!("checkpoint written to {}", path.display());
    }
    Ok(())
}

fn cmd_search(
    config: &Path,
    report_out: Option<&Path>,
    genome_out: Option<&Path>,
) -> Result<(), HarnessError> {
    let cfg = RunConfig::load(config)?;
    let (train, _) = load_task(&cfg)?;
    println!(
        "searching {} iterations x {} genomes, {} inner epochs each",
        cfg.search.iterations, cfg.search.genome_batch, cfg.search.inner_epochs
    );
    let report = architecture_search(&cfg, &train)?;
    for it in &report.iterations {
        let mean = it.rewards.iter().sum::<f64>() / it.rewards.len() as f64;
        println!(
            "iteration {}/{} mean_reward {:.4} best_so_far {:.4} baseline {:.4} loss {:.4}",
            it.iteration + 1,
            cfg.search.iterations,
            mean,
            it.best_reward_so_far,
            it.baseline,
            it.loss
        );
    }
    println!(
        "best reward {:.4} from iteration {} sample {}",
        report.best_reward, report.best_iteration, report.best_index
    );
    if let Some(path) = report_out {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| HarnessError::Internal(e.to_string()))?;
        std::fs::write(path, text)
            .map_err(|e| HarnessError::Internal(format!("{}: {e}", path.display())))?;
        println!("report written to {}", path.display());
    }
    if let Some(path) = genome_out {
        std::fs::write(path, &report.best_genome)
            .map_err(|e| HarnessError::Internal(format!("{}: {e}", path.display())))?;
        println!("best genome written to {}", path.display());
    }
    Ok(())
}

fn cmd_eval(
    config: &Path,
    checkpoints: &[PathBuf],
    log: Option<&Path>,
) -> Result<(), HarnessError> {
    let cfg = RunConfig::load(config)?;
    let (_, test) = load_task(&cfg)?;
    let mut accuracies = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let ck = load_checkpoint(path)?;
        let trainer = Trainer::from_checkpoint(&cfg, &ck)?;
        check_input_dims(&trainer, &test)?;
        let record = trainer.evaluate(&test)?;
        let row = metrics_record_for(&cfg, trainer.epoch, None, &record)?;
        let line = serde_json::to_string(&row)
            .map_err(|e| HarnessError::Internal(e.to_string()))?;
        println!("{line}");
        if let Some(log_path) = log {
            append_record(log_path, &row)?;
        }
        accuracies.push(row.accuracy);
    }
    if accuracies.len() > 1 {
        let (mean, std) = aggregate(&accuracies);
        println!(
            "accuracy over {} checkpoints: {mean:.3}\u{b1}{std:.3}",
            accuracies.len()
        );
    }
    Ok(())
}

fn load_genome_for(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    genome: Option<&Path>,
) -> Result<CircuitGenome, HarnessError> {
    match (config, checkpoint, genome) {
        (_, Some(path), _) => {
            let ck = load_checkpoint(path)?;
            CircuitGenome::from_text(&ck.genome)
                .map_err(|e| HarnessError::Checkpoint(format!("stored genome: {e}")))
        }
        (Some(config), None, genome_override) => {
            let cfg = RunConfig::load(config)?;
            resolve_genome(&cfg, genome_override)
        }
        (None, None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
            CircuitGenome::from_text(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
        }
        (None, None, None) => Err(HarnessError::Config(
            "pass one of --config, --genome, or --checkpoint".into(),
        )),
    }
}

fn cmd_export_genome(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    genome: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), HarnessError> {
    let genome = load_genome_for(config, checkpoint, genome)?;
    let text = genome.to_text();
    match out {
        Some(path) => {
            std::fs::write(path, &text)
                .map_err(|e| HarnessError::Internal(format!("{}: {e}", path.display())))?;
            println!("genome written to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_inspect_circuit(
    config: Option<&Path>,
    genome: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<(), HarnessError> {
    let genome = load_genome_for(config, checkpoint, genome)?;
    let pqc = genome.compile()?;
    println!(
        "genome: {} qubits, {} layers, {} of {} decisions parameterized",
        genome.n_qubits,
        genome.n_layers,
        genome.count_params(),
        genome.decisions.len()
    );
    println!(
        "circuit: {} input slots, {} trainable angles, {} gates",
        pqc.n_inputs,
        pqc.n_thetas,
        pqc.gates.len()
    );
    for (i, gate) in pqc.gates.iter().enumerate() {
        let operands = match gate.qubits.as_slice() {
            [q] => format!("q{q}"),
            [a, b] if gate.kind == GateKind::Swap => format!("q{a} <-> q{b}"),
            [a, b] => format!("q{a} -> q{b}"),
            [a, b, c] => format!("q{a}, q{b} -> q{c}"),
            other => format!("{other:?}"),
        };
        let angle = match gate.param {
            Some(ParamSource::Theta(t)) => format!("  angle = theta[{t}]"),
            Some(ParamSource::Input(s)) => format!("  angle = encoded input[{s}]"),
            Some(ParamSource::Constant(c)) => format!("  angle = {c}"),
            None => String::new(),
        };
        println!("{i:>4}: {:<8} {operands}{angle}", gate.kind.name());
    }
    Ok(())
}

fn check_input_dims(trainer: &Trainer, set: &quanvnet::data::LabeledImageSet) -> Result<(), HarnessError> {
    let expected = trainer.model.dims.input;
    if (set.height(), set.width()) != expected {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint expects {}x{} inputs, configured data is {}x{}",
            expected.0,
            expected.1,
            set.height(),
            set.width()
        )));
    }
    Ok(())
}
