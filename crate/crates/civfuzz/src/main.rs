use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use civfuzz::campaign::{Campaign, CampaignConfig, CampaignError};
use civfuzz::load::{read_scenario, scenario_files, shipped_scenario_dir};
use civfuzz::report::{emit_table, load_reports, Format};
use civfuzz::AdapterKind;
use civfuzz_core::iface::Direction;
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_CONFIG: u8 = 2;
const EXIT_ADAPTER: u8 = 3;

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Sandbox,
    Safebox,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Direction {
        match d {
            DirectionArg::Sandbox => Direction::Sandbox,
            DirectionArg::Safebox => Direction::Safebox,
        }
    }
}

#[derive(Parser)]
#[command(name = "civfuzz", version, about = "Fuzzer for compartment interfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a fuzzing campaign.
    Run(RunArgs),
    /// Summarize the reports under a campaign output directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Work with scenario files for the simulated target.
    Scenarios {
        #[command(subcommand)]
        action: ScenarioAction,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Interface spec (native shim) or scenario file (simulated target).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, value_enum, default_value = "sim")]
    adapter: AdapterKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_runs: Option<u64>,
    /// Seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target command for the shim; repeat count for the simulated target.
    #[arg(long)]
    workload: Option<String>,
    /// Overrides the direction declared by the interface.
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
    /// Campaign settings as JSON; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed the corpus from an earlier campaign's corpus.json.
    #[arg(long)]
    resume_corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ScenarioAction {
    /// List scenarios with their planted bugs.
    List {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Check scenario files.
    Validate { files: Vec<PathBuf> },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(args),
        Command::Report { dir, format, out } => finish(report(&dir, format, out.as_deref())),
        Command::Scenarios { action } => finish(scenarios(action)),
    }
}

fn finish(r: anyhow::Result<()>) -> ExitCode {
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn config_from(args: RunArgs) -> anyhow::Result<CampaignConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let mut cfg: CampaignConfig =
                serde_json::from_str(&text).with_context(|| format!("malformed config {}", p.display()))?;
            cfg.spec_path = args.spec.clone();
            cfg.adapter = args.adapter;
            cfg
        }
        None => CampaignConfig::new(args.spec.clone(), args.adapter, args.seed),
    };
    cfg.seed = args.seed;
    if args.max_runs.is_some() {
        cfg.max_runs = args.max_runs;
    }
    if let Some(t) = args.time_budget {
        cfg.time_budget = Some(Duration::try_from_secs_f64(t).context("invalid --time-budget")?);
    }
    if args.workload.is_some() {
        cfg.workload = args.workload;
    }
    if let Some(d) = args.direction {
        cfg.direction = Some(d.into());
    }
    if args.resume_corpus.is_some() {
        cfg.resume_corpus = args.resume_corpus;
    }
    if args.out.is_some() {
        cfg.out_dir = args.out;
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> ExitCode {
    let cfg = match config_from(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut campaign = match Campaign::new(cfg) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match campaign.run() {
        Ok(outcome) => {
            let r = &outcome.report;
            println!(
                "{}: {} runs ({:?}), {} raw, {} unique, {} false positives, coverage {}",
                r.scenario, r.runs, outcome.stop, r.raw, r.dedup, r.false_positives, r.coverage
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CampaignError::Adapter(_) => ExitCode::from(EXIT_ADAPTER),
                CampaignError::Config(_) | CampaignError::Io(_) => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}

fn report(dir: &Path, format: Format, out: Option<&Path>) -> anyhow::Result<()> {
    let reports = load_reports(dir)?;
    let text = emit_table(&reports, format);
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn scenarios(action: ScenarioAction) -> anyhow::Result<()> {
    match action {
        ScenarioAction::List { dir } => {
            let dir = dir.unwrap_or_else(shipped_scenario_dir);
            for path in scenario_files(&dir).with_context(|| format!("cannot list {}", dir.display()))? {
                let sc = read_scenario(&path).with_context(|| path.display().to_string())?;
                let ids: Vec<&str> = sc.planted.iter().map(|p| p.id.as_str()).collect();
                println!(
                    "{}\t{:?}\t{} functions\t{}",
                    sc.name,
                    sc.spec.direction,
                    sc.spec.api_functions().count(),
                    ids.join(",")
                );
            }
            Ok(())
        }
        ScenarioAction::Validate { files } => {
            anyhow::ensure!(!files.is_empty(), "no scenario files given");
            let mut failed = 0;
            for path in &files {
                match read_scenario(path) {
                    Ok(sc) => println!("ok\t{}\t{}", path.display(), sc.name),
                    Err(e) => {
                        failed += 1;
                        println!("invalid\t{}\t{e}", path.display());
                    }
                }
            }
            anyhow::ensure!(failed == 0, "{failed} invalid scenario file(s)");
            Ok(())
        }
    }
}
