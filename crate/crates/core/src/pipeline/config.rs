use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::guidance::GuidanceConfig;
use crate::scene::{SceneSpec, ToyConfig};
use crate::schedule::{build_schedule, NoiseSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Toy,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// Low band of the re-noised second-to-last latent plus high band of fresh noise.
    Coherent,
    /// Plain fresh noise, as in vanilla diagonal denoising.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailConfig {
    pub low_pass_threshold: f64,
    pub mode: TailMode,
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            low_pass_threshold: 0.25,
            mode: TailMode::Coherent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacfaConfig {
    pub enabled: bool,
    /// Number of queue frames, counted from the tail, whose masked keys and
    /// values are shared with every window.
    pub frame_span: usize,
}

impl Default for SacfaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            frame_span: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticConfig {
    pub sigma_d: f64,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self { sigma_d: 0.5 }
    }
}

/// Everything a run depends on. Serialised field order is fixed, so the JSON
/// form doubles as the input of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(rename = "T")]
    pub queue_len: usize,
    #[serde(rename = "f")]
    pub window_len: usize,
    pub seed: u64,
    pub n_frames: usize,
    pub denoiser: DenoiserKind,
    pub output_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub tail: TailConfig,
    pub sacfa: SacfaConfig,
    pub guidance: GuidanceConfig,
    pub toy: ToyConfig,
    pub analytic: AnalyticConfig,
    pub scene: SceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            queue_len: 64,
            window_len: 16,
            seed: 0,
            n_frames: 128,
            denoiser: DenoiserKind::Toy,
            output_dir: PathBuf::from("out"),
            schedule: ScheduleConfig::default(),
            tail: TailConfig::default(),
            sacfa: SacfaConfig::default(),
            guidance: GuidanceConfig::default(),
            toy: ToyConfig::default(),
            analytic: AnalyticConfig::default(),
            scene: SceneSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| {
            let key = unknown_field(&e.to_string()).unwrap_or_else(|| "config".into());
            Error::config(key, format!("{}: {e}", path.display()))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (t, f) = (self.queue_len, self.window_len);
        if t == 0 {
            return Err(Error::config("T", "must be positive"));
        }
        if f == 0 {
            return Err(Error::config("f", "must be positive"));
        }
        if t % f != 0 {
            return Err(Error::config("T", format!("T = {t} is not a multiple of f = {f}")));
        }
        if t < 2 {
            return Err(Error::config("T", "tail sampling needs T >= 2"));
        }
        if self.n_frames == 0 {
            return Err(Error::config("n_frames", "must be at least 1"));
        }
        if !(self.tail.low_pass_threshold >= 0.0) || !self.tail.low_pass_threshold.is_finite() {
            return Err(Error::config("tail.low_pass_threshold", "must be a finite value >= 0"));
        }
        if self.sacfa.frame_span == 0 || self.sacfa.frame_span > t {
            return Err(Error::config("sacfa.frame_span", format!("must be in 1..={t}")));
        }
        self.guidance.validate(t)?;
        self.scene.validate()?;
        self.schedule()?;
        match self.denoiser {
            DenoiserKind::Analytic => {
                if !(self.analytic.sigma_d > 0.0) {
                    return Err(Error::config("analytic.sigma_d", "must be positive"));
                }
            }
            DenoiserKind::Toy => {
                let p = self.toy.patch;
                if p == 0 || self.scene.height % p != 0 || self.scene.width % p != 0 {
                    return Err(Error::config(
                        "toy.patch",
                        format!("{}x{} latents do not tile into {p}x{p} patches", self.scene.height, self.scene.width),
                    ));
                }
                if !(self.toy.sigma_d > 0.0) {
                    return Err(Error::config("toy.sigma_d", "must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.queue_len, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 over the compact JSON form, hex encoded. The output directory
    /// does not affect results and is left out.
    pub fn hash(&self) -> String {
        let keyed = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_vec(&keyed).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}
