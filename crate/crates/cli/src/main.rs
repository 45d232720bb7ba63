use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use dgmlab_cli::{parse_config, pipeline, Command, Dirs, ExperimentConfig, LabError};

#[derive(Parser)]
#[command(name = "dgmlab", version, about = "Backdoor attacks and defenses on small generative models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config in `section.key = value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed except the dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; models are also read from here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides one config key, e.g. `--budget defense.closest_n=1000`.
    #[arg(long = "budget", value_name = "KEY=VALUE")]
    budgets: Vec<String>,
}

#[derive(Subcommand)]
enum Sub {
    /// Train the benign generator.
    Train(Common),
    /// Corrupt the benign generator (or train a corrupted one).
    Attack(Common),
    /// Inspect models in the output directory.
    Defend(Common),
    /// Prune or distill a corrupted generator.
    Sanitize(Common),
    /// Summarize all records in the output directory.
    Report(Common),
    /// Write generated images as PGM files.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Model file inside the output directory.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Re-run a record and compare its metric table.
    Replay {
        record: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf), LabError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|_| LabError::MissingArtifact(path.clone()))?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for b in &common.budgets {
        let (k, v) = b
            .split_once('=')
            .ok_or_else(|| LabError::Invalid(format!("--budget expects KEY=VALUE, got `{b}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn execute(sub: Sub) -> anyhow::Result<()> {
    let (cmd, common) = match sub {
        Sub::Train(c) => (Command::Train, c),
        Sub::Attack(c) => (Command::Attack, c),
        Sub::Defend(c) => (Command::Defend, c),
        Sub::Sanitize(c) => (Command::Sanitize, c),
        Sub::Report(c) => (Command::Report, c),
        Sub::Sample { common, model, count } => (Command::Sample { model, count }, common),
        Sub::Replay { record } => {
            let original = dgmlab_cli::ExperimentRecord::load(&record)?;
            let scratch = record.parent().unwrap_or(&PathBuf::from(".")).join("replay");
            let fresh = pipeline::replay(&record, &scratch)?;
            if fresh.table == original.table {
                println!("replay matches: {}", record.display());
                return Ok(());
            }
            anyhow::bail!("replayed metric table differs from {}", record.display());
        }
    };
    let (cfg, out) = resolve(&common)?;
    let record = pipeline::run(&cmd, &cfg, &Dirs::same(&out))
        .with_context(|| format!("{} in {}", cmd.name(), out.display()))?;
    if !record.table.rows.is_empty() {
        print!("{}", record.table.to_text());
    }
    for r in &record.reports {
        print!("{}", r.to_text());
    }
    for n in &record.notes {
        println!("{n}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<LabError>().map_or(1, LabError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
