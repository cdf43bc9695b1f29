//! Proxy consistency metrics over latent videos.
//!
//! These are masked-mean latent descriptors and frame-difference statistics,
//! used for directional comparisons between runs only.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::freq::low_pass;
use crate::{Error, Grid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject_consistency: f64,
    pub background_consistency: f64,
    /// Mean norm of the second temporal difference; lower is smoother.
    pub motion_smoothness: f64,
    /// Mean absolute consecutive-frame difference; lower is steadier.
    pub temporal_flicker: f64,
    pub lowfreq_coherence: f64,
    pub n_frames: usize,
}

impl MetricsReport {
    pub const CSV_FIELDS: [&'static str; 6] = [
        "subject_consistency",
        "background_consistency",
        "motion_smoothness",
        "temporal_flicker",
        "lowfreq_coherence",
        "n_frames",
    ];

    pub fn csv_values(&self) -> Vec<String> {
        vec![
            format!("{:.8}", self.subject_consistency),
            format!("{:.8}", self.background_consistency),
            format!("{:.8}", self.motion_smoothness),
            format!("{:.8}", self.temporal_flicker),
            format!("{:.8}", self.lowfreq_coherence),
            self.n_frames.to_string(),
        ]
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Per-channel mean over the cells where `mask == 1`; `None` for an empty mask.
pub fn masked_descriptor(frame: &Grid, mask: &Array2<u8>) -> Result<Option<Array1<f64>>> {
    let (c, h, w) = frame.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Dimension(format!("mask {:?} for frame {:?}", mask.dim(), frame.dim())));
    }
    let n = mask.iter().filter(|&&m| m == 1).count();
    if n == 0 {
        return Ok(None);
    }
    let mut d = Array1::zeros(c);
    for ch in 0..c {
        d[ch] = frame
            .index_axis(Axis(0), ch)
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m == 1)
            .map(|(v, _)| v)
            .sum::<f64>()
            / n as f64;
    }
    Ok(Some(d))
}

/// Mean cosine between descriptors of consecutive frames; pairs involving an
/// empty mask are skipped.
pub fn subject_consistency(frames: &[Grid], masks: &[Array2<u8>]) -> Result<f64> {
    if frames.len() != masks.len() {
        return Err(Error::Dimension(format!("{} frames, {} masks", frames.len(), masks.len())));
    }
    let descs = frames
        .iter()
        .zip(masks)
        .map(|(f, m)| masked_descriptor(f, m))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = descs
        .windows(2)
        .filter_map(|p| match (&p[0], &p[1]) {
            (Some(a), Some(b)) => Some(cosine(a.as_slice().unwrap(), b.as_slice().unwrap())),
            _ => None,
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::InsufficientData(
            "subject consistency needs two consecutive frames with non-empty masks".into(),
        ));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Subject consistency on the mask complement.
pub fn background_consistency(frames: &[Grid], masks: &[Array2<u8>]) -> Result<f64> {
    let inv: Vec<Array2<u8>> = masks.iter().map(|m| m.mapv(|v| 1 - v.min(1))).collect();
    subject_consistency(frames, &inv)
}

fn need(frames: &[Grid], n: usize, what: &str) -> Result<()> {
    if frames.len() < n {
        return Err(Error::InsufficientData(format!("{what} needs {n} frames, got {}", frames.len())));
    }
    if let Some(f) = frames.iter().find(|f| f.dim() != frames[0].dim()) {
        return Err(Error::Dimension(format!("frame {:?} vs {:?}", f.dim(), frames[0].dim())));
    }
    Ok(())
}

pub fn temporal_flicker(frames: &[Grid]) -> Result<f64> {
    need(frames, 2, "temporal flicker")?;
    let total: f64 = frames
        .windows(2)
        .map(|p| (&p[1] - &p[0]).mapv(f64::abs).mean().unwrap_or(0.0))
        .sum();
    Ok(total / (frames.len() - 1) as f64)
}

pub fn motion_smoothness(frames: &[Grid]) -> Result<f64> {
    need(frames, 3, "motion smoothness")?;
    let total: f64 = frames
        .windows(3)
        .map(|p| {
            let second = &p[2] - &(&p[1] * 2.0) + &p[0];
            second.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / (frames.len() - 2) as f64)
}

pub fn lowfreq_coherence(frames: &[Grid], r: f64) -> Result<f64> {
    need(frames, 2, "low-frequency coherence")?;
    let low = frames.iter().map(|f| low_pass(f, r)).collect::<Result<Vec<_>>>()?;
    let total: f64 = low
        .windows(2)
        .map(|p| cosine(p[0].as_slice().unwrap(), p[1].as_slice().unwrap()))
        .sum();
    Ok(total / (frames.len() - 1) as f64)
}

/// Computes every metric. When fewer than two consecutive frames have a
/// non-empty subject mask, the subject and background scores fall back to
/// whole-frame descriptors.
pub fn evaluate(frames: &[Grid], masks: &[Array2<u8>], r: f64) -> Result<MetricsReport> {
    need(frames, 3, "metrics report")?;
    let (subject, background) = match subject_consistency(frames, masks) {
        Ok(s) => (s, background_consistency(frames, masks).unwrap_or(s)),
        Err(Error::InsufficientData(_)) => {
            let full: Vec<Array2<u8>> = frames
                .iter()
                .map(|f| Array2::ones((f.dim().1, f.dim().2)))
                .collect();
            let s = subject_consistency(frames, &full)?;
            (s, s)
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        subject_consistency: subject,
        background_consistency: background,
        motion_smoothness: motion_smoothness(frames)?,
        temporal_flicker: temporal_flicker(frames)?,
        lowfreq_coherence: lowfreq_coherence(frames, r)?,
        n_frames: frames.len(),
    })
}
