//! `cpfas`: generate data, run smoother chains, distil the drift network,
//! sample it and score the results, all driven by one JSON config.

pub mod config;
pub mod eval;
pub mod layout;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use cpfas_core::datasets::ExperimentName;
use cpfas_core::rng::derive_seed;

use crate::config::{Against, DataParams, Stage};
use crate::eval::MissingArtifact;
use crate::pipeline::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "cpfas", version, about = "CPF-AS smoothing and drift distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the stages listed in a config file.
    Run { config: PathBuf },
    /// Score the newest outputs of a run directory.
    Eval {
        run_dir: PathBuf,
        #[arg(long, value_enum, required = true, num_args = 1..)]
        against: Vec<Against>,
        /// Cap on the points per side of an EMD.
        #[arg(long)]
        max_points: Option<usize>,
    },
    /// Write an experiment's default dataset to `<root>/data/<experiment>/`.
    Gen {
        experiment: String,
        #[arg(long)]
        seed: u64,
        /// Output root; defaults to `CPFAS_OUTPUT_ROOT`, then the working
        /// directory.
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

/// Parse `args` (including the program name) and run; returns the exit
/// status: 0 success, 1 runtime failure, 2 invalid input.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Eval { run_dir, against, max_points } => cmd_eval(&run_dir, &against, max_points),
        Command::Gen { experiment, seed, root } => cmd_gen(&experiment, seed, root),
    }
}

fn cmd_run(config: &std::path::Path) -> i32 {
    let cfg = match config::load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cpfas: {e}");
            return 2;
        }
    };
    match pipeline::run(&cfg) {
        Ok(outcome) => {
            for r in &outcome.manifest.stages {
                println!("{:<9} {}  ({:.1}s)", r.stage, outcome.out_dir.join(&r.dir).display(), r.wall_time_s);
            }
            if let Some(table) = outcome.eval_table {
                print!("{table}");
            }
            0
        }
        Err(e) => {
            eprintln!("cpfas: {e}");
            e.exit_code()
        }
    }
}

fn cmd_eval(run_dir: &std::path::Path, against: &[Against], max_points: Option<usize>) -> i32 {
    // seed and cap follow the run's own config when it left a manifest
    let manifest: Option<RunManifest> = layout::read_json(&run_dir.join("manifest.json")).ok();
    let master = manifest.as_ref().map_or(0, |m| m.seed);
    let cap = max_points
        .or_else(|| manifest.as_ref()?.config.get("eval")?.get("max_points")?.as_u64().map(|v| v as usize))
        .unwrap_or(cpfas_core::metrics::DEFAULT_MAX_POINTS);
    if cap == 0 {
        eprintln!("cpfas: --max-points must be >= 1");
        return 2;
    }
    let result = (|| {
        let rows = eval::evaluate_run_dir(run_dir, against, cap, derive_seed(master, &[pipeline::tag::EVAL]))?;
        let dir = layout::next_version(run_dir, Stage::Eval)?;
        layout::write_json(&dir.join("metrics.json"), &rows)?;
        let record = layout::StageRecord {
            stage: Stage::Eval,
            dir: layout::relative(&dir, run_dir),
            config_hash: manifest.as_ref().map_or_else(String::new, |m| m.config_hash.clone()),
            seed: master,
            inputs: Default::default(),
            outputs: layout::hash_dir(&dir, run_dir)?,
            wall_time_s: 0.0,
        };
        record.write(&dir)?;
        Ok::<_, anyhow::Error>(eval::format_table(&rows))
    })();
    match result {
        Ok(table) => {
            print!("{table}");
            0
        }
        Err(e) if e.downcast_ref::<MissingArtifact>().is_some() => {
            eprintln!("cpfas: {e:#}");
            2
        }
        Err(e) => {
            eprintln!("cpfas: eval failed: {e:#}");
            1
        }
    }
}

fn cmd_gen(experiment: &str, seed: u64, root: Option<PathBuf>) -> i32 {
    let exp: ExperimentName = match experiment.parse() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("cpfas: {e}");
            return 2;
        }
    };
    let root = root.unwrap_or_else(|| pipeline::resolve_out_dir(std::path::Path::new("")));
    let dir = root.join("data").join(exp.as_str());
    let cwd = std::path::Path::new(".");
    match pipeline::generate_dataset(&DataParams::defaults(exp), cwd, seed).and_then(|ds| Ok(ds.write(&dir)?)) {
        Ok(()) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("cpfas: gen failed: {e:#}");
            1
        }
    }
}
