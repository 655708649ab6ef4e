use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecodiv::runner::{self, RunConfig, RunOptions, RunnerError};

#[derive(Parser)]
#[command(name = "ecodiv", version, about = "Recursive-training simulator for n-gram model ecosystems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one ecosystem from a config file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run every (M, seed) combination of a sweep spec.
    Sweep {
        spec: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Write plot data and a text summary for a run or sweep directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct RunFlags {
    /// Override the seed (a sweep then uses this single seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: out/<config name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Persist generated shards and model snapshots.
    #[arg(long)]
    persist_shards: bool,
    /// Also record the t = -1 baseline model.
    #[arg(long)]
    baseline: bool,
}

impl RunFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.ecosystem.seed = seed;
            if let Some(s) = cfg.sweep.as_mut() {
                s.seeds = vec![seed];
            }
        }
        if self.baseline {
            cfg.ecosystem.baseline = true;
        }
        if let (Some(w), Some(s)) = (self.workers, cfg.sweep.as_mut()) {
            s.workers = Some(w);
        }
    }

    fn out_dir(&self, config: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let stem = config.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "run".into());
            Path::new("out").join(stem)
        })
    }

    fn init_pool(&self) {
        if let Some(w) = self.workers {
            // fails only if a global pool already exists
            let _ = rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build_global();
        }
    }
}

fn execute(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::Run { config, flags } => {
            flags.init_pool();
            let mut cfg = RunConfig::load(&config)?;
            flags.apply(&mut cfg);
            let out = flags.out_dir(&config);
            let opts = RunOptions { persist_shards: flags.persist_shards };
            let output = runner::execute_run(&cfg, &out, opts)?;
            println!("{} records written to {}", output.records.len() + output.baseline.iter().count(), out.display());
        }
        Command::Sweep { spec, flags } => {
            flags.init_pool();
            let mut cfg = RunConfig::load(&spec)?;
            if cfg.sweep.is_none() {
                return Err(RunnerError::Config(format!("{}: missing [sweep] section", spec.display())));
            }
            flags.apply(&mut cfg);
            let out = flags.out_dir(&spec);
            let opts = RunOptions { persist_shards: flags.persist_shards };
            let rows = runner::execute_sweep(&cfg, &out, opts)?;
            print!("{}", runner::sweep_csv(&rows));
            if rows.iter().any(|r| r.status != "ok") {
                return Err(RunnerError::Runtime("some sweep runs failed".into()));
            }
        }
        Command::Report { dir } => {
            let report = runner::report(&dir)?;
            print!("{}", report.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
