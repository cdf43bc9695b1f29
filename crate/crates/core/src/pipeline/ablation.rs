use super::config::{RunConfig, TailMode};
use super::generate::generate;
use crate::metrics::MetricsReport;
use crate::{Error, Result};

/// One row of the component ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub config: RunConfig,
    pub config_hash: String,
    pub metrics: MetricsReport,
}

/// The four component settings: A plain queue, B adds the coherent tail,
/// C adds cross-frame attention, D adds guidance.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let settings = [
        ("A", TailMode::Gaussian, false, false),
        ("B", TailMode::Coherent, false, false),
        ("C", TailMode::Coherent, true, false),
        ("D", TailMode::Coherent, true, true),
    ];
    settings
        .into_iter()
        .map(|(label, mode, sacfa, guidance)| {
            let mut cfg = base.clone();
            cfg.run_id = format!("{}-{label}", base.run_id);
            cfg.tail.mode = mode;
            cfg.sacfa.enabled = sacfa;
            cfg.guidance.enabled = guidance;
            (label, cfg)
        })
        .collect()
}

pub fn run_ablation(base: &RunConfig) -> Result<Vec<AblationRow>> {
    ablation_configs(base)
        .into_iter()
        .map(|(label, cfg)| {
            let out = generate(&cfg)?;
            let metrics = out
                .metrics
                .ok_or_else(|| Error::config("n_frames", "ablation needs at least 3 frames"))?;
            Ok(AblationRow {
                label,
                config_hash: out.config_hash,
                config: cfg,
                metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_toggle_one_component_each() {
        let rows = ablation_configs(&RunConfig::default());
        let flags: Vec<_> = rows
            .iter()
            .map(|(_, c)| (c.tail.mode, c.sacfa.enabled, c.guidance.enabled))
            .collect();
        assert_eq!(
            flags,
            vec![
                (TailMode::Gaussian, false, false),
                (TailMode::Coherent, false, false),
                (TailMode::Coherent, true, false),
                (TailMode::Coherent, true, true),
            ]
        );
        assert!(rows.iter().all(|(_, c)| c.seed == 0));
    }
}
