use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use genmove::data::{load_dataset, save_dataset, synthesize_epr, EprParams};
use genmove::harness::train::{prepare_embeddings, read_loss_log, EMBED_FILE};
use genmove::harness::{run_baseline, run_task, sweep_mask_ratio, train, Artifacts, Baseline, ExperimentConfig, Task, TaskSpec};
use genmove::metrics::EvalReport;
use genmove::Result;

#[derive(Parser)]
#[command(name = "genmove", version, about = "Masked conditional diffusion for mobility trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic EPR dataset.
    Synth {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long, default_value_t = 7)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train location embeddings only.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train embeddings, denoiser and flow; writes checkpoints and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one task with trained checkpoints.
    Run {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding ckpt_*.bin; defaults to --out.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a comparator on a task.
    Baseline {
        #[arg(long)]
        name: Baseline,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per mask mixture in `sweep_grid`.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize every report.json under a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_report(r: &EvalReport) {
    println!("{}", r.task);
    for (k, v) in &r.metrics {
        println!("  {k:<18} {v:.6}");
    }
}

fn collect_reports(dir: &Path, found: &mut Vec<(PathBuf, EvalReport)>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_reports(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "report.json") {
            found.push((path.clone(), EvalReport::load(&path)?));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { users, grid, days, seed, out } => {
            let params = EprParams {
                n_users: users,
                grid_side: grid,
                days,
                seed,
                ..EprParams::default()
            };
            let ds = synthesize_epr(&params)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} users on a {grid}x{grid} grid to {}", ds.trajectories.len(), out.display());
        }
        Command::Embed { data, cfg, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            let table = prepare_embeddings(&cfg, &ds)?;
            table.save(out.join(EMBED_FILE))?;
            println!("wrote {}x{} embeddings to {}", table.n_locations(), table.dim(), out.join(EMBED_FILE).display());
        }
        Command::Train { data, cfg, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data)?;
            let outcome = train(&cfg, &ds, Some(&out))?;
            for (epoch, tl, vl) in read_loss_log(out.join("loss.csv"))? {
                println!("epoch {epoch:>4}  train {tl:.5}  valid {vl:.5}");
            }
            println!("{} parameters; checkpoints in {}", outcome.artifacts.model.n_parameters(), out.display());
        }
        Command::Run { task, data, ckpt, cfg, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data)?;
            let art = Artifacts::load(ckpt.as_deref().unwrap_or(&out))?;
            let outcome = run_task(&TaskSpec::from_config(task, &cfg), &cfg, &art, &ds)?;
            outcome.write(&out)?;
            print_report(&outcome.report);
        }
        Command::Baseline { name, task, data, cfg, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data)?;
            let outcome = run_baseline(name, &TaskSpec::from_config(task, &cfg), &cfg, &ds)?;
            outcome.write(&out)?;
            print_report(&outcome.report);
        }
        Command::Sweep { data, cfg, out } => {
            let cfg = cfg.load()?;
            let ds = load_dataset(&data)?;
            let rows = sweep_mask_ratio(&cfg, &ds, Some(&out))?;
            println!("{} grid points; table in {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::Report { out } => {
            let mut found = Vec::new();
            collect_reports(&out, &mut found)?;
            if found.is_empty() {
                println!("no reports under {}", out.display());
            }
            for (path, r) in &found {
                println!("# {}", path.display());
                print_report(r);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
