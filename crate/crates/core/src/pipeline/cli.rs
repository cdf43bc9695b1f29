//! Command-line front end. Exit codes: 0 success, 1 configuration or input
//! format error, 2 runtime or numerical failure.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::{generate, run_ablation, write_ablation, write_run, write_scene, RunConfig, VideoDump};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "diagq", version, about = "Long video generation with a diagonal latent queue")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a video dump and its metrics row.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Number of frames to emit.
        #[arg(long)]
        frames: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the four-row component ablation and write a CSV table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a dump header and per-frame statistics.
    Inspect { dump: PathBuf },
    /// Write the ground-truth scene video.
    DemoScene {
        #[arg(long)]
        config: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_user_error() {
        1
    } else {
        2
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            frames,
            out,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(n) = frames {
                cfg.n_frames = n;
            }
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let run = generate(&cfg)?;
            let files = write_run(&cfg, &run)?;
            println!("wrote {} ({} frames)", files.dump.display(), run.frames.len());
            if let Some(m) = files.metrics {
                println!("wrote {}", m.display());
            }
            Ok(())
        }
        Command::Ablate { config } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let rows = run_ablation(&cfg)?;
            for r in &rows {
                let m = &r.metrics;
                println!(
                    "{}  subject {:.4}  background {:.4}  smoothness {:.4}  flicker {:.4}  lowfreq {:.4}",
                    r.label,
                    m.subject_consistency,
                    m.background_consistency,
                    m.motion_smoothness,
                    m.temporal_flicker,
                    m.lowfreq_coherence
                );
            }
            println!("wrote {}", write_ablation(&cfg, &rows)?.display());
            Ok(())
        }
        Command::Inspect { dump } => {
            let d = VideoDump::read(&dump)?;
            let mut out = std::io::stdout().lock();
            let printed = (|| -> std::io::Result<()> {
                writeln!(out, "{}", serde_json::to_string(&d.header).expect("header serialises"))?;
                writeln!(out, "frame,min,max,mean,std")?;
                for (i, s) in d.frame_stats().iter().enumerate() {
                    writeln!(out, "{i},{:.6},{:.6},{:.6},{:.6}", s.min, s.max, s.mean, s.std)?;
                }
                out.flush()
            })();
            match printed {
                // a closed pipe (`inspect … | head`) is not a failure
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                other => Ok(other?),
            }
        }
        Command::DemoScene { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("wrote {}", write_scene(&cfg)?.display());
            Ok(())
        }
    }
}
