//! Run orchestration: configuration, warm-up and the queue loop, binary
//! dumps, metrics CSV, the component ablation and the command-line front end.

mod ablation;
pub mod cli;
mod config;
mod dump;
mod generate;

pub use ablation::{ablation_configs, run_ablation, AblationRow};
pub use config::{
    AnalyticConfig, DenoiserKind, RunConfig, SacfaConfig, ScheduleConfig, TailConfig, TailMode,
};
pub use dump::{DumpHeader, FrameStats, VideoDump, MAGIC};
pub use generate::{generate, generate_with, CycleReport, Denoiser, RunOutput};

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::metrics::MetricsReport;
use crate::scene::render_frame;
use crate::Result;

pub fn csv_header() -> Vec<&'static str> {
    let mut h = vec!["run_id", "config_hash"];
    h.extend(MetricsReport::CSV_FIELDS);
    h
}

/// Writes a metrics table with the fixed header row.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(&str, &str, &MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fail = |e: csv::Error| std::io::Error::other(e);
    w.write_record(csv_header()).map_err(fail)?;
    for (run_id, hash, m) in rows {
        let mut rec = vec![run_id.to_string(), hash.to_string()];
        rec.extend(m.csv_values());
        w.write_record(&rec).map_err(fail)?;
    }
    w.flush()?;
    Ok(())
}

/// Files written by a `generate` run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFiles {
    pub dump: PathBuf,
    pub metrics: Option<PathBuf>,
}

pub fn dump_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.ouro"))
}

pub fn write_run(cfg: &RunConfig, out: &RunOutput) -> Result<RunFiles> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let dump = dump_path(&cfg.output_dir, &cfg.run_id);
    VideoDump::from_frames(&out.frames, &out.config_hash, cfg.seed)?.write(&dump)?;
    let metrics = match &out.metrics {
        Some(m) => {
            let path = cfg.output_dir.join(format!("{}.metrics.csv", cfg.run_id));
            let file = std::fs::File::create(&path)?;
            write_metrics_csv(file, &[(&cfg.run_id, &out.config_hash, m)])?;
            Some(path)
        }
        None => None,
    };
    Ok(RunFiles { dump, metrics })
}

pub fn write_ablation(cfg: &RunConfig, rows: &[AblationRow]) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("{}.ablation.csv", cfg.run_id));
    let table: Vec<_> = rows
        .iter()
        .map(|r| (r.label, r.config_hash.as_str(), &r.metrics))
        .collect();
    write_metrics_csv(std::fs::File::create(&path)?, &table)?;
    Ok(path)
}

/// Renders `cfg.n_frames` ground-truth scene frames and writes them as a dump.
pub fn write_scene(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let frames: Vec<_> = (0..cfg.n_frames)
        .map(|k| render_frame(&cfg.scene, k, cfg.toy.width).0)
        .collect();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("{}.scene.ouro", cfg.run_id));
    VideoDump::from_frames(&frames, &cfg.hash(), cfg.scene.seed)?.write(&path)?;
    Ok(path)
}
