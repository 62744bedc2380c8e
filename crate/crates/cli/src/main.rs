//! `tldpo`: batch entry points for data generation, span diffing, training,
//! evaluation and the verification suites.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data validation
//! failure, 4 an asserted bound failed, 5 internal error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tldpo::checkpoint::{load_checkpoint, save_checkpoint, Provenance};
use tldpo::data::{generate_synthetic, read_dataset, validate_example, write_dataset, PreferenceExample, SyntheticTaskConfig, Vocab};
use tldpo::losses::LossConfig;
use tldpo::model::{snapshot_reference, ModelConfig, PolicyModel};
use tldpo::targeting::{extract_target_spans, whitespace_tokens};
use tldpo::training::{train, RunConfig};
use tldpo::verification::{
    efficiency_suite, equivalence_suite, evaluate, gradient_suite, EfficiencyExperimentConfig,
    EquivalenceSweepConfig, GradientSweepConfig, SuiteReport,
};
use tldpo::Error;

#[derive(Parser, Debug)]
#[command(name = "tldpo", version, about = "Target-restricted preference optimization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic preference dataset as JSON Lines.
    GenData {
        /// TOML task configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the target spans separating two whitespace-tokenized responses.
    DiffTargets {
        /// Hallucinated response.
        #[arg(long)]
        hyp: String,
        /// Revised response.
        #[arg(long = "ref")]
        reference: String,
    },
    /// Train a policy and write a checkpoint plus per-step metrics.
    Train {
        /// TOML run configuration with `[train]` and `[model]` tables.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Seed for the noise of the masked-dependency margin.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON-Lines report here instead of to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run verification suites; exits 4 if any asserted bound fails.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        /// TOML configuration for the efficiency ladder.
        #[arg(long)]
        efficiency_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Machine-readable report path.
        #[arg(long, default_value = "verify-report.jsonl")]
        report: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Suite {
    Gradients,
    Equivalence,
    Efficiency,
    All,
}

/// A failure and the exit status it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::Io(_) => 2,
            Error::Validation { .. }
            | Error::Parse { .. }
            | Error::Input(_)
            | Error::DegenerateTarget(_)
            | Error::Checkpoint(_)
            | Error::Checksum { .. } => 3,
            _ => 5,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn validation(message: String) -> Failure {
    Failure { code: 3, message }
}

type CliResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::DiffTargets { hyp, reference } => diff_targets(&hyp, &reference),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            seed,
            report,
        } => eval_cmd(&checkpoint, &data, seed, report.as_deref()),
        Command::Verify {
            suite,
            efficiency_config,
            seed,
            report,
        } => verify(suite, efficiency_config.as_deref(), seed, &report),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_dataset(path: &Path) -> Result<Vec<PreferenceExample>, Failure> {
    let data = read_dataset(path)?;
    for ex in &data {
        if let Err(violations) = validate_example(ex) {
            let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(validation(format!("example {}: {}", ex.id, list.join("; "))));
        }
    }
    if data.is_empty() {
        return Err(validation(format!("{}: dataset is empty", path.display())));
    }
    Ok(data)
}

/// Checks that every example fits the model's image grid, classes,
/// attributes and vocabulary.
fn check_compatible(model: &ModelConfig, data: &[PreferenceExample]) -> Result<(), Failure> {
    for ex in data {
        if ex.image.g != model.grid_size {
            return Err(validation(format!(
                "example {}: grid size {} but the model expects {}",
                ex.id, ex.image.g, model.grid_size
            )));
        }
        ex.image.validate(model.object_classes, model.attributes)?;
        let too_big = ex
            .question
            .iter()
            .chain(&ex.y_h)
            .chain(&ex.y_r)
            .find(|&&t| t as usize >= model.vocab_size);
        if let Some(t) = too_big {
            return Err(validation(format!(
                "example {}: token {t} outside the model vocabulary of {}",
                ex.id, model.vocab_size
            )));
        }
    }
    Ok(())
}

fn gen_data(config: Option<&Path>, out: &Path) -> CliResult {
    let cfg = match config {
        Some(p) => SyntheticTaskConfig::load(p)?,
        None => SyntheticTaskConfig::default(),
    };
    cfg.validate()?;
    let data = generate_synthetic(&cfg)?;
    for ex in &data {
        if let Err(v) = validate_example(ex) {
            return Err(Failure {
                code: 5,
                message: format!("generator produced an invalid example {}: {:?}", ex.id, v),
            });
        }
    }
    write_dataset(out, &data)?;
    println!("wrote {} examples to {} (seed {})", data.len(), out.display(), cfg.seed);
    Ok(0)
}

fn diff_targets(hyp: &str, reference: &str) -> CliResult {
    let h = whitespace_tokens(hyp);
    let r = whitespace_tokens(reference);
    if h.is_empty() || r.is_empty() {
        return Err(Failure {
            code: 2,
            message: "both --hyp and --ref need at least one token".into(),
        });
    }
    let spans = extract_target_spans(&h, &r)?;
    if spans.is_empty() {
        eprintln!("warning: responses are identical; no target spans");
    }
    println!("{}", serde_json::to_string(&spans).map_err(Error::from)?);
    Ok(0)
}

fn train_cmd(config: &Path, data: &Path, out: &Path) -> CliResult {
    let run = RunConfig::load(config)?;
    let dataset = load_dataset(data)?;
    check_compatible(&run.model, &dataset)?;
    let init = PolicyModel::new(run.model.clone())?;
    let reference = snapshot_reference(&init);
    println!(
        "training on {} examples, seed {}, model seed {}",
        dataset.len(),
        run.train.seed,
        run.model.seed
    );
    let (trained, report) = train(init, &reference, &dataset, &run.train)?;
    fs::create_dir_all(out)?;
    let provenance = Provenance {
        steps: report.steps.len() as u64,
        train: Some(run.train.clone()),
    };
    save_checkpoint(&trained, &provenance, &out.join("checkpoint.json"))?;
    report.write_metrics_jsonl(&out.join("metrics.jsonl"))?;
    fs::write(out.join("config.toml"), run.to_toml_string())?;
    println!("{}", report.summary());
    println!("checkpoint written to {}", out.join("checkpoint.json").display());
    Ok(0)
}

fn eval_cmd(checkpoint: &Path, data: &Path, seed: u64, report_path: Option<&Path>) -> CliResult {
    let (policy, provenance) = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    let cfg = policy.config().clone();
    check_compatible(&cfg, &dataset)?;
    // The reference is the model's deterministic initialization.
    let reference = snapshot_reference(&PolicyModel::new(cfg.clone())?);
    let loss = provenance.train.map(|t| t.loss).unwrap_or_else(LossConfig::default);
    let vocab = Vocab::new(cfg.object_classes, cfg.attributes, cfg.grid_size);
    let report = evaluate(&policy, &reference, &vocab, &dataset, &loss, seed)?;
    print!("{}", report.to_table());
    let jsonl = report.to_jsonl()?;
    match report_path {
        Some(p) => fs::write(p, jsonl)?,
        None => {
            println!();
            print!("{jsonl}");
        }
    }
    Ok(0)
}

fn verify(suite: Suite, efficiency_config: Option<&Path>, seed: u64, report_path: &Path) -> CliResult {
    let mut reports: Vec<SuiteReport> = Vec::new();
    if matches!(suite, Suite::Gradients | Suite::All) {
        reports.push(gradient_suite(&GradientSweepConfig {
            seed,
            ..Default::default()
        })?);
    }
    if matches!(suite, Suite::Equivalence | Suite::All) {
        reports.push(equivalence_suite(&EquivalenceSweepConfig {
            seed,
            ..Default::default()
        })?);
    }
    if matches!(suite, Suite::Efficiency | Suite::All) {
        let cfg: EfficiencyExperimentConfig = match efficiency_config {
            Some(p) => toml::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config {
                    field: p.display().to_string(),
                    reason: e.to_string(),
                })?,
            None => EfficiencyExperimentConfig::default(),
        };
        reports.push(efficiency_suite(&cfg)?.0);
    }
    let mut file = fs::File::create(report_path)?;
    for r in &reports {
        print!("{}", r.to_text());
        writeln!(file, "{}", serde_json::to_string(r).map_err(Error::from)?)?;
    }
    let passed = reports.iter().all(SuiteReport::passed);
    println!("{}", if passed { "all bounds pass" } else { "some bounds FAIL" });
    println!("report written to {}", report_path.display());
    Ok(if passed { 0 } else { 4 })
}
