use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use kgtransfer::fixtures::{generate_with, ScenarioConfig};
use kgtransfer::pipeline::{load_config, run, write_config_echo, Command, LogRecord, RunConfig};

/// Knowledge transfer between knowledge graphs: pre-training, subgraph
/// distillation and link-prediction evaluation.
#[derive(Parser)]
#[command(name = "kgtransfer", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the configured seed of every module.
    #[arg(long)]
    seed: Option<u64>,
    /// Human-readable logs instead of key=value records.
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct FixtureArgs {
    /// Output directory for the scenario files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    entities: usize,
    #[arg(long, default_value_t = 1.0)]
    alignment_fraction: f64,
    #[arg(long, default_value_t = 0.9)]
    planted_confidence: f64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a configuration and write its resolved echo.
    Validate(RunArgs),
    /// Load, leakage-filter and snapshot the datasets.
    Ingest(RunArgs),
    /// Sample relational paths of every graph.
    SamplePaths(RunArgs),
    /// Pre-train the teacher on the background graph.
    Pretrain(RunArgs),
    /// Sample the linked subgraph under the budget.
    BuildSubgraph(RunArgs),
    /// Re-train the student on the target (plus subgraph and teacher).
    Retrain(RunArgs),
    /// Filtered MRR and Hits@k of the student.
    Eval(RunArgs),
    /// Mine cross-graph Horn rules.
    MineRules(RunArgs),
    /// 2-D projection of entity embeddings.
    Project(RunArgs),
    /// Every stage the configured setting needs, ending with eval.
    All(RunArgs),
    /// Write the synthetic two-graph transfer scenario.
    Fixture(FixtureArgs),
}

fn exit_code(e: &anyhow::Error) -> i32 {
    e.chain()
        .find_map(|c| {
            c.downcast_ref::<kgtransfer::Error>()
                .map(kgtransfer::Error::exit_code)
        })
        .unwrap_or(2)
}

fn configure(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut config = load_config(&args.config).map_err(|issues| {
        for i in &issues {
            eprintln!("config error: {i}");
        }
        kgtransfer::Error::Config(format!(
            "{} issue(s) in {}",
            issues.len(),
            args.config.display()
        ))
    })?;
    if let Some(seed) = args.seed {
        config.apply_seed(seed);
    }
    Ok(config)
}

fn execute(cmd: Cmd) -> anyhow::Result<()> {
    let (command, args) = match cmd {
        Cmd::Fixture(f) => {
            let scenario = generate_with(&ScenarioConfig {
                n_entities: f.entities,
                alignment_fraction: f.alignment_fraction,
                planted_confidence: f.planted_confidence,
                seed: f.seed,
                ..Default::default()
            })?;
            scenario.save(&f.out)?;
            let a = &scenario.audit;
            println!(
                "scenario written to {}: {} test triplets, {} derivable, {} leaked",
                f.out.display(),
                scenario.split.test.len(),
                a.derivable.len(),
                a.leaked
            );
            return Ok(());
        }
        Cmd::Validate(a) => {
            let config = configure(&a)?;
            let echo = write_config_echo(&config)?;
            println!("configuration valid; resolved echo at {}", echo.display());
            return Ok(());
        }
        Cmd::Ingest(a) => (Command::Ingest, a),
        Cmd::SamplePaths(a) => (Command::SamplePaths, a),
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::BuildSubgraph(a) => (Command::BuildSubgraph, a),
        Cmd::Retrain(a) => (Command::Retrain, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::MineRules(a) => (Command::MineRules, a),
        Cmd::Project(a) => (Command::Project, a),
        Cmd::All(a) => (Command::All, a),
    };
    let config = configure(&args)?;
    let pretty = args.pretty;
    let outcome = run(&config, command, &mut |r: &LogRecord| {
        // A closed stderr must not abort the run.
        let line = if pretty { r.to_pretty() } else { r.to_line() };
        let _ = writeln!(std::io::stderr(), "{line}");
    })
    .with_context(|| format!("`{}` failed", command.as_str()))?;
    if let Some(report) = outcome.report {
        print!("{report}");
    }
    eprintln!("artifacts in {}", outcome.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors share the configuration exit code.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
