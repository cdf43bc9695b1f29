//! Subject feature bank and self-recurrent guidance.
//!
//! The bank keeps `m` rows of subject keys. Masked key sets vary in size from
//! frame to frame, so every set is first mapped onto the bank's row layout by
//! [`RowReduce`]: a fixed linear operator that averages rows within `m`
//! equal-occupancy groups in raster order.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCapture, SubjectMask};
use crate::scene::ToyDenoiser;
use crate::schedule::{FrameLatent, NoiseSchedule};
use crate::{Error, Grid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub gamma0: f64,
    pub lambda: f64,
    pub head_span: usize,
    pub tail_span: usize,
    pub bank_rows: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gamma0: 0.05,
            lambda: 0.98,
            head_span: 16,
            tail_span: 16,
            bank_rows: 16,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, queue_len: usize) -> Result<()> {
        if !(self.gamma0 >= 0.0) {
            return Err(Error::config("guidance.gamma0", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("guidance.lambda", format!("{} not in [0,1]", self.lambda)));
        }
        if self.head_span == 0 || self.head_span > queue_len {
            return Err(Error::config("guidance.head_span", format!("must be in 1..={queue_len}")));
        }
        if self.tail_span > queue_len {
            return Err(Error::config("guidance.tail_span", format!("must be at most {queue_len}")));
        }
        if self.bank_rows == 0 {
            return Err(Error::config("guidance.bank_rows", "must be positive"));
        }
        Ok(())
    }
}

/// Linear map from `n` key rows onto `m` bank rows.
///
/// With `n ≥ m`, output row `g` averages input rows `⌊g·n/m⌋..⌊(g+1)·n/m⌋`.
/// With `n < m`, the first `n` output rows copy the input and the rest repeat
/// the mean row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowReduce {
    weights: Array2<f64>,
}

impl RowReduce {
    pub fn new(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Degenerate(format!("cannot reduce {n} rows onto {m}")));
        }
        let mut weights = Array2::zeros((m, n));
        if n >= m {
            for g in 0..m {
                let (lo, hi) = (g * n / m, (g + 1) * n / m);
                let w = 1.0 / (hi - lo) as f64;
                for r in lo..hi {
                    weights[[g, r]] = w;
                }
            }
        } else {
            for r in 0..n {
                weights[[r, r]] = 1.0;
            }
            for g in n..m {
                weights.row_mut(g).fill(1.0 / n as f64);
            }
        }
        Ok(Self { weights })
    }

    pub fn apply(&self, rows: &Array2<f64>) -> Array2<f64> {
        self.weights.dot(rows)
    }

    /// Adjoint: pulls a bank-layout gradient back onto the input rows.
    pub fn adjoint(&self, grad: &Array2<f64>) -> Array2<f64> {
        self.weights.t().dot(grad)
    }
}

pub fn reduce_rows(rows: &Array2<f64>, m: usize) -> Result<Array2<f64>> {
    Ok(RowReduce::new(rows.nrows(), m)?.apply(rows))
}

/// Long-term memory of subject keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBank {
    pub k_ltm: Array2<f64>,
    pub lambda: f64,
    pub initialized: bool,
}

impl SubjectBank {
    pub fn uninitialized(rows: usize, width: usize, lambda: f64) -> Self {
        Self {
            k_ltm: Array2::zeros((rows, width)),
            lambda,
            initialized: false,
        }
    }

    pub fn rows(&self) -> usize {
        self.k_ltm.nrows()
    }
}

/// Pools all masked keys of the given captures and reduces them to `m` rows.
/// With no masked keys at all the bank stays uninitialised.
pub fn init_bank(captures: &[&AttentionCapture], m: usize, width: usize, lambda: f64) -> Result<SubjectBank> {
    let parts: Vec<_> = captures
        .iter()
        .filter(|c| !c.masked_keys.is_empty())
        .map(|c| c.masked_keys.tokens.view())
        .collect();
    if parts.is_empty() {
        return Ok(SubjectBank::uninitialized(m, width, lambda));
    }
    let pooled = ndarray::concatenate(Axis(0), &parts)
        .map_err(|e| Error::Dimension(format!("masked key widths differ: {e}")))?;
    Ok(SubjectBank {
        k_ltm: reduce_rows(&pooled, m)?,
        lambda,
        initialized: true,
    })
}

/// EMA update: `k ← λ·k + (1−λ)·mean_t reduce(masked_keys_t)`.
///
/// Captures without masked keys are left out of the mean; if none remain the
/// bank is returned unchanged.
pub fn update_bank(bank: &SubjectBank, current: &[&AttentionCapture]) -> Result<SubjectBank> {
    if !bank.initialized {
        return Err(Error::State("update on an uninitialised subject bank".into()));
    }
    let reduced = current
        .iter()
        .filter(|c| !c.masked_keys.is_empty())
        .map(|c| reduce_rows(&c.masked_keys.tokens, bank.rows()))
        .collect::<Result<Vec<_>>>()?;
    if reduced.is_empty() {
        return Ok(bank.clone());
    }
    let mut mean = Array2::zeros(bank.k_ltm.dim());
    for r in &reduced {
        if r.dim() != mean.dim() {
            return Err(Error::Dimension(format!("bank {:?} vs keys {:?}", mean.dim(), r.dim())));
        }
        mean += r;
    }
    mean /= reduced.len() as f64;
    let lambda = bank.lambda;
    let k_ltm = if lambda == 1.0 {
        bank.k_ltm.clone()
    } else if lambda == 0.0 {
        mean
    } else {
        &bank.k_ltm * lambda + &(mean * (1.0 - lambda))
    };
    Ok(SubjectBank {
        k_ltm,
        lambda,
        initialized: true,
    })
}

/// `‖K_ltm − reduce(K′(z))‖²_F` for a fixed mask.
pub fn subject_key_loss(
    z: &FrameLatent,
    mask: &SubjectMask,
    bank: &SubjectBank,
    model: &ToyDenoiser,
) -> Result<f64> {
    let idx = mask.indices();
    if idx.is_empty() || !bank.initialized {
        return Ok(0.0);
    }
    let keys = model.keys(&z.data, z.noise_level.max(1))?.select(Axis(0), &idx);
    let diff = reduce_rows(&keys, bank.rows())? - &bank.k_ltm;
    Ok(diff.iter().map(|v| v * v).sum())
}

/// Exact gradient of [`subject_key_loss`] with respect to the latent data.
///
/// The key map is affine in the latent, so the gradient is
/// `pullback(Sᵀ·Rᵀ·2(R·S·K − K_ltm))`, with `S` the mask row selection and `R`
/// the row reduction.
pub fn guidance_gradient(
    z: &FrameLatent,
    mask: &SubjectMask,
    bank: &SubjectBank,
    model: &ToyDenoiser,
) -> Result<Grid> {
    let idx = mask.indices();
    if idx.is_empty() || !bank.initialized {
        return Ok(Grid::zeros(z.data.dim()));
    }
    let all_keys = model.keys(&z.data, z.noise_level.max(1))?;
    if mask.mask.len() != all_keys.nrows() {
        return Err(Error::Dimension(format!(
            "mask of {} cells for {} tokens",
            mask.mask.len(),
            all_keys.nrows()
        )));
    }
    let keys = all_keys.select(Axis(0), &idx);
    let reduce = RowReduce::new(keys.nrows(), bank.rows())?;
    let diff = reduce.apply(&keys) - &bank.k_ltm;
    let grad_masked = reduce.adjoint(&(diff * 2.0));
    let mut grad_keys = Array2::zeros(all_keys.dim());
    for (row, &i) in idx.iter().enumerate() {
        grad_keys.row_mut(i).assign(&grad_masked.row(row));
    }
    Ok(model.key_pullback(&grad_keys, z.data.dim()))
}

/// Guidance strength `γ_t = γ0·sqrt(1 − ᾱ_t)`.
pub fn guidance_strength(t: usize, cfg: &GuidanceConfig, sched: &NoiseSchedule) -> f64 {
    cfg.gamma0 * (1.0 - sched.alpha_bar(t)).sqrt()
}

pub fn apply_guidance(
    z: &FrameLatent,
    grad: &Grid,
    t: usize,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<FrameLatent> {
    if grad.dim() != z.data.dim() {
        return Err(Error::Dimension(format!(
            "gradient {:?} vs latent {:?}",
            grad.dim(),
            z.data.dim()
        )));
    }
    let gamma = guidance_strength(t, cfg, sched);
    if gamma == 0.0 {
        return Ok(z.clone());
    }
    let data = ndarray::Zip::from(&z.data).and(grad).map_collect(|&x, &g| x - gamma * g);
    Ok(FrameLatent::new(data, z.noise_level, z.frame_index))
}
