use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtkd::config::ExperimentConfig;
use mtkd::pipeline::{average_dir, Experiment, PipelineError};
use mtkd::task::{parse_task_list, Task};
use mtkd::trainer::TrainState;

#[derive(Parser)]
#[command(name = "mtkd", version, about = "Two-stage multi-teacher distillation on synthetic speech corpora")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize every configured corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Experiment directory (default: out_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-compute teacher labels.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated teachers to run (asr,at,sv).
        #[arg(long, default_value = "asr,at,sv")]
        tasks: String,
        /// Label only this corpus.
        #[arg(long)]
        corpus: Option<String>,
    },
    /// Stage 1: multi-teacher distillation.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (default: <experiment>/pretrain).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: multi-task fine-tuning; without --init, trains from scratch.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint directory (default: <experiment>/finetune).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Average the last k checkpoints of a directory.
    AvgCkpt {
        /// Directory holding ckpt-*.mtkd files.
        dir: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test corpora.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: PathBuf,
        /// Metrics to report: asr (WER), at (mAP), sv (EER), kd (ASR KD L1).
        #[arg(long, default_value = "asr,at,sv")]
        tasks: String,
        /// Report path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Experiment directory (default: out_dir from the config).
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

fn experiment(common: &Common, root: Option<&Path>) -> Result<Experiment, PipelineError> {
    let (mut cfg, default_root) = ExperimentConfig::load(&common.config).map_err(PipelineError::Config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Experiment::new(cfg, root.map_or(default_root, Path::to_path_buf))
}

fn tasks(list: &str) -> Result<Vec<Task>, PipelineError> {
    parse_task_list(list).map_err(PipelineError::Config)
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| mtkd::datapipe::DataError::io(p, e).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.cmd {
        Cmd::GenData { common, out } => {
            let exp = experiment(&common, out.as_deref())?;
            for p in exp.gen_data()? {
                eprintln!("wrote {}", p.display());
            }
        }
        Cmd::Extract { common, out, tasks: t, corpus } => {
            let exp = experiment(&common, out.as_deref())?;
            for task in tasks(&t)? {
                for p in exp.extract(task, corpus.as_deref())? {
                    eprintln!("wrote {}", p.display());
                }
            }
        }
        Cmd::Pretrain { common, out, resume } => {
            let exp = experiment(&common, None)?;
            let st = exp.pretrain(out.as_deref(), resume.as_deref(), &mut |_, _| true)?;
            eprintln!("pre-training finished at step {}", st.step);
        }
        Cmd::Finetune {
            common,
            init,
            out,
            resume,
        } => {
            let exp = experiment(&common, None)?;
            let st = exp.finetune(init.as_deref(), out.as_deref(), resume.as_deref(), &mut |_, _| true)?;
            eprintln!("fine-tuning finished at step {}", st.step);
        }
        Cmd::AvgCkpt { dir, k, out } => {
            let st = average_dir(&dir, k, &out)?;
            eprintln!("averaged {k} checkpoints (newest step {}) into {}", st.step, out.display());
        }
        Cmd::Eval {
            common,
            init,
            tasks: t,
            out,
            root,
        } => {
            let exp = experiment(&common, root.as_deref())?;
            let mut wanted = Vec::new();
            let mut kd = false;
            for name in t.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if name == "kd" {
                    kd = true;
                } else {
                    wanted.push(name.to_string());
                }
            }
            let task_list = if wanted.is_empty() { Vec::new() } else { tasks(&wanted.join(","))? };
            let st = TrainState::load(&init)?;
            let report = exp.evaluate(&st.store, &task_list, kd)?;
            write_json(out.as_deref(), &report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors share exit code 1 with config errors
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
