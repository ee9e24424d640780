use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};

use chronoexplain_core::config::{BackendKind, RunConfig};
use chronoexplain_core::pipeline::{self, Pipeline, DATASET_DIR};

#[derive(Parser, Debug)]
#[command(name = "chronoexplain", version, about = "Build explainable event-forecasting data from a temporal knowledge graph")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    window_days: Option<u32>,
    /// LLM backend: live, mock or replay.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Audit log served by the replay backend.
    #[arg(long, global = true)]
    replay_log: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse the raw graph into the output directory.
    Ingest {
        /// Overrides `input.graph`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Entity, relation and quadruple counts.
    Stats {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Mine temporal rules from the ingested graph.
    Mine,
    /// Select queries and score their reasoning paths.
    Paths {
        /// Overrides `input.queries`.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Generate, split and write the dataset.
    Gen,
    /// Score predictions against gold records.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Two `{id, label}` files for inter-annotator agreement.
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        annotators: Option<Vec<PathBuf>>,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Check a dataset file or directory.
    Validate {
        /// Defaults to the dataset under `--out`.
        path: Option<PathBuf>,
    },
}

fn load_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut c = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        c.seed = seed;
    }
    if let Some(w) = g.window_days {
        c.window_days = w;
    }
    if let Some(b) = g.backend {
        c.backend.kind = b;
    }
    if let Some(log) = &g.replay_log {
        c.backend.replay_log = Some(log.clone());
    }
    if let Some(out) = &g.out {
        c.out = out.clone();
    }
    c.check()?;
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = load_config(&cli.global)?;
    match cli.command {
        Command::Ingest { input } => {
            if input.is_some() {
                config.input.graph = input;
            }
            let p = Pipeline::new(config)?;
            let stats = p.ingest()?;
            print!("{stats}");
        }
        Command::Stats { input } => {
            if input.is_some() {
                config.input.graph = input;
            }
            print!("{}", Pipeline::new(config)?.stats()?);
        }
        Command::Mine => {
            let p = Pipeline::new(config)?;
            let rules = p.mine()?;
            println!("{} rules -> {}", rules.len(), p.out().join(pipeline::RULES_FILE).display());
        }
        Command::Paths { queries } => {
            if queries.is_some() {
                config.input.queries = queries;
            }
            let p = Pipeline::new(config)?;
            let found = p.paths()?;
            println!("{} queries with paths -> {}", found.len(), p.out().join(pipeline::PATHS_FILE).display());
        }
        Command::Gen => {
            let p = Pipeline::new(config)?;
            let m = p.gen()?;
            println!("train: {}", m.train);
            println!("test: {}", m.test);
            if let Some(gold) = &m.test_gold {
                println!("test (gold): {gold}");
            }
            if !m.skipped.is_empty() {
                println!("skipped: {}", m.skipped.len());
            }
            println!("-> {}", p.out().join(DATASET_DIR).display());
        }
        Command::Evaluate { gold, pred, annotators, report_dir } => {
            let pair = annotators.as_deref().map(|a| (a[0].as_path(), a[1].as_path()));
            let report = pipeline::evaluate_files(&gold, &pred, pair)?;
            print!("{report}");
            if let Some(dir) = report_dir {
                let path = pipeline::write_report(&dir, &report, &config.hash())?;
                println!("-> {}", path.display());
            }
        }
        Command::Validate { path } => {
            let path = path.unwrap_or_else(|| config.out.join(DATASET_DIR));
            let report = pipeline::validate_dataset(&path)?;
            print!("{report}");
            if !report.is_clean() {
                bail!("{} failed validation", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
