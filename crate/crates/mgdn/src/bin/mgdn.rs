//! Thin command-line front end; all logic lives in `mgdn::cli`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mgdn::cli::{self, RunConfig};
use mgdn::error::MgdnError;
use mgdn::model::Task;

#[derive(Parser)]
#[command(name = "mgdn", version, about = "Mutual-guided dynamic image fusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Train a model; settings come from --config overridden by flags.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Option<Task>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset manifest (same as the data.manifest config key).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Ablation switches: mgca, dynfilter, maskmi (repeatable).
        #[arg(long)]
        ablate: Vec<String>,
        /// Resume from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fuse input rasters with a trained checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-stage kernel grids (one raster per stream).
        #[arg(long)]
        dump_kernels: bool,
        /// Write per-stage similarity masks.
        #[arg(long)]
        dump_masks: bool,
        /// Input rasters, one per model stream.
        inputs: Vec<PathBuf>,
    },
    /// Evaluate a checkpoint over a dataset manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify gradients of every block against finite differences.
    Gradcheck,
}

fn parse_task(s: &str) -> Result<Task, String> {
    Task::parse(s).map_err(|e| e.to_string())
}

fn run(cmd: Cmd) -> mgdn::Result<()> {
    match cmd {
        Cmd::Synth { task, count, seed, out, height, width } => {
            cli::cmd_synth(task, count, seed, &out, height, width)
        }
        Cmd::Train { config, task, seed, steps, out, manifest, ablate, resume } => {
            let mut pairs = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| MgdnError::io(path, e))?;
                    RunConfig::parse_pairs(&text)?
                }
                None => Vec::new(),
            };
            if let Some(t) = task {
                pairs.push(("model.task".into(), t.as_str().into()));
            }
            if let Some(s) = seed {
                pairs.push(("train.seed".into(), s.to_string()));
            }
            if let Some(n) = steps {
                pairs.push(("train.steps".into(), n.to_string()));
            }
            if let Some(o) = out {
                pairs.push(("run.out".into(), o.display().to_string()));
            }
            if let Some(m) = manifest {
                pairs.push(("data.manifest".into(), m.display().to_string()));
            }
            for a in ablate {
                let key = match a.as_str() {
                    "mgca" => "model.disable_mgca",
                    "dynfilter" => "model.disable_dynfilter",
                    "maskmi" => "model.disable_maskmi",
                    other => {
                        return Err(MgdnError::Config(format!(
                            "unknown ablation '{other}' (expected mgca|dynfilter|maskmi)"
                        )))
                    }
                };
                pairs.push((key.into(), "true".into()));
            }
            let cfg = RunConfig::from_pairs(&pairs)?;
            cli::cmd_train(&cfg, resume.as_deref()).map(|_| ())
        }
        Cmd::Fuse { checkpoint, out, dump_kernels, dump_masks, inputs } => {
            cli::cmd_fuse(&checkpoint, &inputs, &out, dump_kernels, dump_masks).map(|_| ())
        }
        Cmd::Eval { checkpoint, manifest, out } => {
            cli::cmd_eval(&checkpoint, &manifest, &out).map(|_| ())
        }
        Cmd::Gradcheck => {
            if cli::cmd_gradcheck()? {
                Ok(())
            } else {
                Err(MgdnError::NonFinite("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    mgdn::init_threads();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successes; anything else is a
            // usage error.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (MgdnError::Config(_) | MgdnError::Contract(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
