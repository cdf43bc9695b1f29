use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gaussian_posterior_mean, ConditionEmbedding};
use crate::attention::{
    attention_weights, build_subject_mask, cross_attention_maps_in_context, pool_tokens,
    sacfa_attention, select_rows, AttentionCapture, SubjectMask, TokenMatrix,
};
use crate::rng::{stream, Stream};
use crate::schedule::NoiseSchedule;
use crate::{Error, Grid, Result};

/// Where cross-attention subject maps are read out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureSite {
    /// Queries from the block input, before self-attention.
    SelfAttn,
    /// Queries of the cross-attention block.
    CrossAttn,
    /// Cross-attention queries mean-pooled 2×2.
    CrossAttnDown2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub patch: usize,
    pub width: usize,
    /// Prior scale of the skip path's Gaussian posterior mean.
    pub sigma_d: f64,
    /// Gain of the self-attention residual.
    pub self_attn_gain: f64,
    /// Gain of the subject value path in cross-attention.
    pub cross_attn_gain: f64,
    pub capture_sites: Vec<CaptureSite>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            width: 32,
            sigma_d: 1.0,
            self_attn_gain: 0.5,
            cross_attn_gain: 1.0,
            capture_sites: vec![CaptureSite::SelfAttn, CaptureSite::CrossAttn, CaptureSite::CrossAttnDown2],
        }
    }
}

// content channels are carried in the first `channels` token dims at this scale
const CONTENT_SCALE: f64 = 4.0;
const QUERY_SCALE: f64 = 4.0;
const TEXT_KEY_SCALE: f64 = 4.0;
const HEAD_TEXTURE: f64 = 0.02;

/// Untrained, seeded single-head attention ε-predictor.
///
/// Per frame: patchify → linear embed + sinusoidal timestep embedding →
/// residual self-attention (optionally SACFA) → residual cross-attention over
/// `[null; condition]` → linear head. The head output is an x0 correction
/// added to a Gaussian posterior-mean skip path, then converted to ε.
///
/// The first `channels` token dims hold per-channel patch means; the text key
/// and value paths read and write those dims, so a subject embedding attends
/// to patches painted in its appearance colour.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: ToyConfig,
    channels: usize,
    embed: Array2<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
    w_qc: Array2<f64>,
    w_kc: Array2<f64>,
    w_vc: Array2<f64>,
    head: Array2<f64>,
}

/// Per-window forward result.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub eps: Vec<Grid>,
    pub captures: Vec<AttentionCapture>,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

impl ToyDenoiser {
    pub fn new(cfg: ToyConfig, channels: usize, seed: u64) -> Result<Self> {
        let (p, d, c) = (cfg.patch, cfg.width, channels);
        if p == 0 {
            return Err(Error::config("toy.patch", "patch size must be positive"));
        }
        if d <= c || (d - c) % 2 != 0 {
            return Err(Error::config(
                "toy.width",
                format!("width {d} must exceed the channel count {c} by an even number"),
            ));
        }
        let pd = c * p * p;
        let mut rng = stream(seed, Stream::ToyWeights);

        let mut embed = gaussian_matrix(&mut rng, (pd, d), 1.0 / (pd as f64).sqrt());
        embed.slice_mut(s![.., ..c]).fill(0.0);
        for ch in 0..c {
            embed
                .slice_mut(s![ch * p * p..(ch + 1) * p * p, ch])
                .fill(CONTENT_SCALE / (p * p) as f64);
        }

        let w_q = gaussian_matrix(&mut rng, (d, d), 1.0 / (d as f64).sqrt());
        let w_k = gaussian_matrix(&mut rng, (d, d), 1.0 / (d as f64).sqrt());
        let w_v = Array2::eye(d);
        let w_o = Array2::eye(d) * cfg.self_attn_gain;

        let mut w_qc = Array2::zeros((d, d));
        let mut w_kc = Array2::zeros((d, d));
        let mut w_vc = Array2::zeros((d, d));
        for ch in 0..c {
            w_qc[[ch, ch]] = QUERY_SCALE;
            w_kc[[ch, ch]] = TEXT_KEY_SCALE;
            w_vc[[ch, ch]] = cfg.cross_attn_gain * CONTENT_SCALE;
        }

        let mut head = gaussian_matrix(&mut rng, (d, pd), HEAD_TEXTURE);
        head.slice_mut(s![..c, ..]).fill(0.0);
        for ch in 0..c {
            head.slice_mut(s![ch, ch * p * p..(ch + 1) * p * p])
                .fill(1.0 / CONTENT_SCALE);
        }

        Ok(Self {
            cfg,
            channels,
            embed,
            w_q,
            w_k,
            w_v,
            w_o,
            w_qc,
            w_kc,
            w_vc,
            head,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    pub fn token_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.cfg.patch, w / self.cfg.patch)
    }

    fn check_shape(&self, z: &Grid) -> Result<(usize, usize)> {
        let (c, h, w) = z.dim();
        let p = self.cfg.patch;
        if c != self.channels || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "latent {:?} incompatible with {} channels and patch {p}",
                z.dim(),
                self.channels
            )));
        }
        Ok((h / p, w / p))
    }

    /// `[tokens, c·p·p]`, tokens in raster order, features as `(channel, row, col)`.
    pub fn patchify(&self, z: &Grid) -> Result<Array2<f64>> {
        let (th, tw) = self.check_shape(z)?;
        let p = self.cfg.patch;
        let c = self.channels;
        let mut out = Array2::zeros((th * tw, c * p * p));
        for ti in 0..th {
            for tj in 0..tw {
                let mut row = out.row_mut(ti * tw + tj);
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            row[ch * p * p + py * p + px] = z[[ch, ti * p + py, tj * p + px]];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn unpatchify(&self, patches: &Array2<f64>, dims: (usize, usize, usize)) -> Grid {
        let (c, h, w) = dims;
        let p = self.cfg.patch;
        let tw = w / p;
        let mut out = Grid::zeros((c, h, w));
        for (t, row) in patches.rows().into_iter().enumerate() {
            let (ti, tj) = (t / tw, t % tw);
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[[ch, ti * p + py, tj * p + px]] = row[ch * p * p + py * p + px];
                    }
                }
            }
        }
        out
    }

    /// Sinusoidal embedding of `t` in the non-content dims.
    pub fn timestep_embedding(&self, t: usize) -> Array1<f64> {
        let (d, c) = (self.cfg.width, self.channels);
        let half = (d - c) / 2;
        let mut e = Array1::zeros(d);
        for i in 0..half {
            let freq = 1.0 / 10_000f64.powf(i as f64 / half as f64);
            e[c + 2 * i] = (t as f64 * freq).sin();
            e[c + 2 * i + 1] = (t as f64 * freq).cos();
        }
        e
    }

    /// Block-input tokens `patchify(z)·E + temb(t)`.
    pub fn input_tokens(&self, z: &Grid, t: usize) -> Result<TokenMatrix> {
        let dims = self.check_shape(z)?;
        let h0 = self.patchify(z)?.dot(&self.embed) + &self.timestep_embedding(t);
        TokenMatrix::spatial(h0, dims)
    }

    /// Self-attention keys for a latent, the quantity guidance matches.
    pub fn keys(&self, z: &Grid, t: usize) -> Result<Array2<f64>> {
        Ok(self.input_tokens(z, t)?.tokens.dot(&self.w_k))
    }

    /// Pulls a key-space gradient back to latent space through the linear key
    /// path (`z ↦ patchify(z)·E·W_k`).
    pub fn key_pullback(&self, grad_keys: &Array2<f64>, dims: (usize, usize, usize)) -> Grid {
        let grad_patches = grad_keys.dot(&self.w_k.t()).dot(&self.embed.t());
        self.unpatchify(&grad_patches, dims)
    }

    fn text_keys_and_values(&self, cond: &ConditionEmbedding) -> (TokenMatrix, Array2<f64>) {
        let d = self.cfg.width;
        let n = cond.tokens.nrows();
        let mut keys = Array2::zeros((n + 1, d));
        let mut vals = Array2::zeros((n + 1, d));
        if n > 0 {
            keys.slice_mut(s![1.., ..]).assign(&cond.tokens.dot(&self.w_kc));
            vals.slice_mut(s![1.., ..]).assign(&cond.tokens.dot(&self.w_vc));
        }
        (TokenMatrix::new(keys), vals)
    }

    /// Denoises one frame. Returns ε̂ and the capture record.
    pub fn forward_frame(
        &self,
        z: &Grid,
        t: usize,
        frame_index: usize,
        cond: &ConditionEmbedding,
        refs: Option<(&TokenMatrix, &TokenMatrix)>,
        sched: &NoiseSchedule,
    ) -> Result<(Grid, AttentionCapture)> {
        if cond.tokens.nrows() > 0 && cond.width() != self.cfg.width {
            return Err(Error::Dimension(format!(
                "condition width {} vs model width {}",
                cond.width(),
                self.cfg.width
            )));
        }
        if t == 0 || t > sched.num_steps {
            return Err(Error::Timestep {
                t,
                lo: 1,
                hi: sched.num_steps,
            });
        }
        let h0 = self.input_tokens(z, t)?;
        let dims = h0.grid_dims.expect("spatial");
        let q = TokenMatrix::spatial(h0.tokens.dot(&self.w_q), dims)?;
        let k = TokenMatrix::spatial(h0.tokens.dot(&self.w_k), dims)?;
        let v = TokenMatrix::spatial(h0.tokens.dot(&self.w_v), dims)?;

        let attn = match refs {
            Some((kr, vr)) if !kr.is_empty() => sacfa_attention(&q, &k, &v, kr, vr)?,
            _ => sacfa_attention(&q, &k, &v, &TokenMatrix::empty(k.width()), &TokenMatrix::empty(v.width()))?,
        };
        let h1 = TokenMatrix::spatial(&h0.tokens + &attn.tokens.dot(&self.w_o), dims)?;

        let (text_keys, text_vals) = self.text_keys_and_values(cond);
        let qc = TokenMatrix::spatial(h1.tokens.dot(&self.w_qc), dims)?;
        let cross = attention_weights(qc.tokens.view(), text_keys.tokens.view()).dot(&text_vals);
        let delta = &h1.tokens - &h0.tokens + &cross;

        let subject_cols: Vec<usize> = cond.subject_token_rows.iter().map(|r| r + 1).collect();
        let mut cross_maps = Vec::new();
        if !subject_cols.is_empty() {
            for site in &self.cfg.capture_sites {
                let site_q = match site {
                    CaptureSite::SelfAttn => TokenMatrix::spatial(h0.tokens.dot(&self.w_qc), dims)?,
                    CaptureSite::CrossAttn => qc.clone(),
                    CaptureSite::CrossAttnDown2 => {
                        if dims.0 % 2 != 0 || dims.1 % 2 != 0 {
                            continue;
                        }
                        let pooled = pool_tokens(&h1, 2)?;
                        TokenMatrix::spatial(pooled.tokens.dot(&self.w_qc), pooled.grid_dims.expect("spatial"))?
                    }
                };
                cross_maps.push(cross_attention_maps_in_context(&site_q, &text_keys, &subject_cols)?);
            }
        }
        let subject_mask = if cross_maps.is_empty() {
            SubjectMask::empty(dims)
        } else {
            build_subject_mask(&cross_maps)?
        };
        let masked_keys = select_rows(&k, &subject_mask.indices());

        let prior = Grid::zeros(z.dim());
        let skip = gaussian_posterior_mean(z, t, &prior, self.cfg.sigma_d, sched)?;
        let x0 = skip + self.unpatchify(&delta.dot(&self.head), z.dim());
        let ab = sched.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eps = ndarray::Zip::from(z).and(&x0).map_collect(|&zi, &xi| (zi - sa * xi) / sn);

        Ok((
            eps,
            AttentionCapture {
                frame_index,
                q,
                k,
                v,
                cross_maps,
                subject_mask,
                masked_keys,
            },
        ))
    }

    /// Denoises a window of frames with heterogeneous timesteps. Frames are
    /// independent except through the shared SACFA references.
    pub fn forward(
        &self,
        latents: &[&Grid],
        timesteps: &[usize],
        frame_indices: &[usize],
        cond: &ConditionEmbedding,
        refs: Option<(&TokenMatrix, &TokenMatrix)>,
        sched: &NoiseSchedule,
    ) -> Result<ForwardOutput> {
        if latents.len() != timesteps.len() || latents.len() != frame_indices.len() {
            return Err(Error::Dimension(format!(
                "{} latents, {} timesteps, {} indices",
                latents.len(),
                timesteps.len(),
                frame_indices.len()
            )));
        }
        let results: Vec<(Grid, AttentionCapture)> = latents
            .par_iter()
            .zip(timesteps.par_iter())
            .zip(frame_indices.par_iter())
            .map(|((z, &t), &idx)| self.forward_frame(z, t, idx, cond, refs, sched))
            .collect::<Result<_>>()?;
        let (eps, captures) = results.into_iter().unzip();
        Ok(ForwardOutput { eps, captures })
    }
}

/// Ground-truth subject mask on the token grid: a token counts as subject when
/// at least half of its cells do.
pub fn token_mask_from_cells(cells: &Array2<u8>, patch: usize) -> Array2<u8> {
    let (h, w) = cells.dim();
    let (th, tw) = (h / patch, w / patch);
    Array2::from_shape_fn((th, tw), |(i, j)| {
        let block = cells.slice(s![i * patch..(i + 1) * patch, j * patch..(j + 1) * patch]);
        let on = block.iter().filter(|&&v| v == 1).count();
        u8::from(2 * on >= patch * patch)
    })
}

/// Averages a capture mask's tokens back to latent cells (nearest patch).
pub fn cell_mask_from_tokens(mask: &Array2<u8>, patch: usize) -> Array2<u8> {
    let (th, tw) = mask.dim();
    Array2::from_shape_fn((th * patch, tw * patch), |(i, j)| mask[[i / patch, j / patch]])
}
