use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chunkstream::pipeline::Case;
use chunkstream::Result;
use chunkstream_cli::{commands, exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "chunkstream", version, about = "Streaming talking-head diffusion at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set distill.steps=500`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the puppet dataset.
    Datagen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the bidirectional teacher with flow matching.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a teacher checkpoint into a few-step causal student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint stem, e.g. `runs/teacher/teacher`.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a student through one server topology.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Topology: case1..case4 or its name.
        #[arg(long)]
        topology: Option<Case>,
        #[arg(long)]
        n_chunks: Option<usize>,
        #[arg(long)]
        fps: Option<f64>,
        /// Scripted turn-taking, e.g. `0:speak,40:silence,80:speak`.
        #[arg(long)]
        mode_script: Option<String>,
        /// Also write the per-chunk CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Compare all four topologies.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill and score the chunk-size by step-count grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { common, out, force } => {
            let m = commands::datagen(&common.load()?, &out, force)?;
            println!("wrote {} clips to {} (checksum {})", m.clips.len(), out.display(), m.checksum());
        }
        Command::TrainTeacher { common, data, out } => {
            let s = commands::train_teacher(&common.load()?, &data, &out)?;
            println!("teacher: {} steps, loss {:.4} -> {:.4}", s.steps, s.initial_loss, s.final_loss);
        }
        Command::Distill {
            common,
            data,
            teacher,
            out,
        } => {
            let s = commands::distill(&common.load()?, &data, &teacher, &out)?;
            println!(
                "student: {} steps, sync speaking {:.3} silence {:.3}, latent mse {:.4}",
                s.steps, s.eval.speaking, s.eval.silence, s.eval.latent_mse
            );
        }
        Command::Stream {
            common,
            student,
            out,
            topology,
            n_chunks,
            fps,
            mode_script,
            csv,
        } => {
            let mut cfg = common.load()?;
            let p = &mut cfg.pipeline;
            p.case = topology.unwrap_or(p.case);
            p.n_chunks = n_chunks.unwrap_or(p.n_chunks);
            p.fps = fps.unwrap_or(p.fps);
            if mode_script.is_some() {
                p.mode_script = mode_script;
            }
            cfg.validate()?;
            let s = commands::stream(&cfg, &student, &out, csv)?;
            println!(
                "{:?}: mean {:.1} ms, p95 {:.1} ms, realtime {} (predicted {})",
                s.report.case, s.report.mean_ms, s.report.p95_ms, s.realtime, s.predicted_realtime
            );
        }
        Command::Bench { common, student, out } => {
            let t = commands::bench(&common.load()?, &student, &out)?;
            for r in &t.rows {
                println!(
                    "{:<18} mean {:>7.1} ms  p95 {:>7.1} ms  realtime {}",
                    format!("{:?}", r.case),
                    r.mean_ms,
                    r.p95_ms,
                    r.realtime
                );
            }
        }
        Command::Ablate {
            common,
            data,
            teacher,
            out,
        } => {
            for c in commands::ablate(&common.load()?, &data, &teacher, &out)? {
                println!(
                    "chunk {} steps {}: sync {:.3}, latent mse {:.4}",
                    c.frames_per_chunk, c.steps, c.sync_speaking, c.latent_mse
                );
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
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
