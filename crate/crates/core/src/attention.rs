//! Attention primitives, subject-mask extraction and subject-aware
//! cross-frame attention (SACFA).

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::{Error, Result};

/// `n` tokens of width `d`, optionally tied to an `h′ × w′` spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Array2<f64>,
    pub grid_dims: Option<(usize, usize)>,
}

impl TokenMatrix {
    pub fn new(tokens: Array2<f64>) -> Self {
        Self {
            tokens,
            grid_dims: None,
        }
    }

    pub fn spatial(tokens: Array2<f64>, grid_dims: (usize, usize)) -> Result<Self> {
        if grid_dims.0 * grid_dims.1 != tokens.nrows() {
            return Err(Error::Dimension(format!(
                "{} tokens do not fill a {}x{} grid",
                tokens.nrows(),
                grid_dims.0,
                grid_dims.1
            )));
        }
        Ok(Self {
            tokens,
            grid_dims: Some(grid_dims),
        })
    }

    pub fn empty(width: usize) -> Self {
        Self::new(Array2::zeros((0, width)))
    }

    pub fn rows(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Binary subject mask on a token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub mask: Array2<u8>,
    /// Set when every capture site was degenerate and the mask fell back to empty.
    pub degenerate: bool,
}

impl SubjectMask {
    pub fn empty(dims: (usize, usize)) -> Self {
        Self {
            mask: Array2::zeros(dims),
            degenerate: true,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Raster-order token indices where the mask is set.
    pub fn indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m == 1).then_some(i))
            .collect()
    }
}

/// Everything one denoiser forward pass records for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub frame_index: usize,
    pub q: TokenMatrix,
    pub k: TokenMatrix,
    pub v: TokenMatrix,
    /// One subject-averaged cross-attention map per capture site.
    pub cross_maps: Vec<Array2<f64>>,
    pub subject_mask: SubjectMask,
    pub masked_keys: TokenMatrix,
}

impl AttentionCapture {
    pub fn footprint(&self) -> usize {
        self.q.tokens.len()
            + self.k.tokens.len()
            + self.v.tokens.len()
            + self.cross_maps.iter().map(|m| m.len()).sum::<usize>()
            + self.subject_mask.mask.len()
            + self.masked_keys.tokens.len()
    }
}

fn check_width(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: width {a} vs {b}")));
    }
    Ok(())
}

/// Numerically stable softmax along each row, in place.
pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Row-softmax of `q·kᵀ / sqrt(d)`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    softmax_rows(&mut scores);
    scores
}

/// Subject map when the softmax runs over the subject keys only.
pub fn cross_attention_maps(q: &TokenMatrix, k_subj: &TokenMatrix) -> Result<Array2<f64>> {
    let cols: Vec<usize> = (0..k_subj.rows()).collect();
    cross_attention_maps_in_context(q, k_subj, &cols)
}

/// Subject map when the softmax runs over a full key set and the subject map
/// averages only the `subject_cols` columns.
pub fn cross_attention_maps_in_context(
    q: &TokenMatrix,
    keys: &TokenMatrix,
    subject_cols: &[usize],
) -> Result<Array2<f64>> {
    check_width(q.width(), keys.width(), "cross-attention")?;
    let dims = q
        .grid_dims
        .ok_or_else(|| Error::Dimension("cross-attention query has no spatial grid".into()))?;
    if subject_cols.is_empty() || subject_cols.iter().any(|&c| c >= keys.rows()) {
        return Err(Error::Dimension(format!(
            "subject columns {subject_cols:?} invalid for {} keys",
            keys.rows()
        )));
    }
    let w = attention_weights(q.tokens.view(), keys.tokens.view());
    let n = subject_cols.len() as f64;
    let avg: Vec<f64> = w
        .rows()
        .into_iter()
        .map(|row| subject_cols.iter().map(|&c| row[c]).sum::<f64>() / n)
        .collect();
    Ok(Array2::from_shape_vec(dims, avg).expect("grid dims checked at construction"))
}

pub const OTSU_BINS: usize = 256;

/// Histogram layout shared by the Otsu search and binarisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuSplit {
    pub min: f64,
    pub width: f64,
    /// Values in bins `>= edge_bin` form the upper class.
    pub edge_bin: usize,
}

impl OtsuSplit {
    pub fn threshold(&self) -> f64 {
        self.min + self.width * self.edge_bin as f64
    }

    pub fn bin(&self, v: f64) -> usize {
        bin_of(v, self.min, self.width)
    }

    pub fn is_upper(&self, v: f64) -> bool {
        self.bin(v) >= self.edge_bin
    }
}

fn bin_of(v: f64, min: f64, width: f64) -> usize {
    (((v - min) / width).floor().max(0.0) as usize).min(OTSU_BINS - 1)
}

/// 256-bin histogram over `[min, max]`; `None` when every value is equal.
pub fn otsu_histogram(values: &[f64]) -> Option<(f64, f64, [u64; OTSU_BINS])> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(max > min) {
        return None;
    }
    let width = (max - min) / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[bin_of(v, min, width)] += 1;
    }
    Some((min, width, hist))
}

/// Otsu split on bin indices with exact integer arithmetic.
///
/// For a cut at edge `k` the between-class variance is proportional to
/// `(s0·n1 − s1·n0)² / (n0·n1)`, with `n` counts and `s` sums of bin indices.
/// Candidates are compared by cross-multiplication so ties are exact and
/// resolve to the lowest edge.
pub fn otsu_split(values: &[f64]) -> Result<OtsuSplit> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("otsu input".into()));
    }
    let (min, width, hist) = otsu_histogram(values)
        .ok_or_else(|| Error::Degenerate("all values equal; no Otsu split".into()))?;
    let n_total: u64 = hist.iter().sum();
    let s_total: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let n1 = n_total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = s_total - s0;
        let diff = (s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    let (edge_bin, _, _) = best.expect("max > min guarantees two non-empty classes");
    Ok(OtsuSplit {
        min,
        width,
        edge_bin,
    })
}

pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    otsu_split(values).map(|s| s.threshold())
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(src: &Array2<f64>, dims: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == dims {
        return src.clone();
    }
    let coord = |dst: usize, n_dst: usize, n_src: usize| {
        let x = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_src - 1);
        (lo, hi, x - lo as f64)
    };
    Array2::from_shape_fn(dims, |(i, j)| {
        let (y0, y1, fy) = coord(i, dims.0, sh);
        let (x0, x1, fx) = coord(j, dims.1, sw);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Fuses per-site cross-attention maps into one binary subject mask.
///
/// Each map is Otsu-binarised, resampled to the largest site resolution,
/// averaged over sites and re-binarised at 0.5 (ties go to the subject).
/// Sites whose map is constant are skipped; if all are, the mask is empty
/// and flagged degenerate.
pub fn build_subject_mask(maps: &[Array2<f64>]) -> Result<SubjectMask> {
    let target = maps
        .iter()
        .map(|m| m.dim())
        .max_by_key(|&(h, w)| (h * w, h, w))
        .ok_or_else(|| Error::Dimension("no cross-attention maps to fuse".into()))?;
    let mut resampled = Vec::with_capacity(maps.len());
    for map in maps {
        let values: Vec<f64> = map.iter().copied().collect();
        let split = match otsu_split(&values) {
            Ok(s) => s,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        let binary = map.mapv(|v| if split.is_upper(v) { 1.0 } else { 0.0 });
        resampled.push(resize_bilinear(&binary, target));
    }
    if resampled.is_empty() {
        return Ok(SubjectMask::empty(target));
    }
    let n = resampled.len() as f64;
    let mask = Array2::from_shape_fn(target, |idx| {
        let mut vals: Vec<f64> = resampled.iter().map(|m| m[idx]).collect();
        // summation order fixed so the result does not depend on site order
        vals.sort_by(f64::total_cmp);
        u8::from(vals.iter().sum::<f64>() >= 0.5 * n)
    });
    Ok(SubjectMask {
        mask,
        degenerate: false,
    })
}

/// Stacks rows of `tm` at the given raster indices.
pub fn select_rows(tm: &TokenMatrix, rows: &[usize]) -> TokenMatrix {
    TokenMatrix::new(tm.tokens.select(Axis(0), rows))
}

/// Concatenates subject-masked keys and values across frames, in frame order
/// then raster order.
pub fn collect_masked_kv(
    frames: &[(&TokenMatrix, &TokenMatrix, &SubjectMask)],
) -> Result<(TokenMatrix, TokenMatrix)> {
    let width = match frames.first() {
        Some((k, _, _)) => k.width(),
        None => return Ok((TokenMatrix::empty(0), TokenMatrix::empty(0))),
    };
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for (k, v, m) in frames {
        check_width(k.width(), width, "masked keys")?;
        check_width(v.width(), width, "masked values")?;
        if m.mask.len() != k.rows() || k.rows() != v.rows() {
            return Err(Error::Dimension(format!(
                "mask of {} cells for {} keys and {} values",
                m.mask.len(),
                k.rows(),
                v.rows()
            )));
        }
        let idx = m.indices();
        ks.push(k.tokens.select(Axis(0), &idx));
        vs.push(v.tokens.select(Axis(0), &idx));
    }
    let cat = |parts: &[Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).expect("widths checked")
    };
    Ok((TokenMatrix::new(cat(&ks)), TokenMatrix::new(cat(&vs))))
}

/// `softmax(q·[k; k′]ᵀ/sqrt(d))·[v; v′]`. With empty references this is plain
/// self-attention and runs the exact same arithmetic.
pub fn sacfa_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    k_ref: &TokenMatrix,
    v_ref: &TokenMatrix,
) -> Result<TokenMatrix> {
    let d = q.width();
    check_width(k.width(), d, "keys")?;
    check_width(v.width(), d, "values")?;
    if k.rows() != v.rows() || k_ref.rows() != v_ref.rows() {
        return Err(Error::Dimension("key/value row counts differ".into()));
    }
    let out = if k_ref.is_empty() {
        attention_weights(q.tokens.view(), k.tokens.view()).dot(&v.tokens)
    } else {
        check_width(k_ref.width(), d, "reference keys")?;
        check_width(v_ref.width(), d, "reference values")?;
        let keys = concatenate(Axis(0), &[k.tokens.view(), k_ref.tokens.view()]).expect("widths checked");
        let vals = concatenate(Axis(0), &[v.tokens.view(), v_ref.tokens.view()]).expect("widths checked");
        attention_weights(q.tokens.view(), keys.view()).dot(&vals)
    };
    Ok(TokenMatrix {
        tokens: out,
        grid_dims: q.grid_dims,
    })
}

pub fn self_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    let empty = TokenMatrix::empty(q.width());
    sacfa_attention(q, k, v, &empty, &empty)
}

/// Mean-pools a spatial token matrix by `factor` along both grid axes.
pub fn pool_tokens(tm: &TokenMatrix, factor: usize) -> Result<TokenMatrix> {
    let (h, w) = tm
        .grid_dims
        .ok_or_else(|| Error::Dimension("pooling needs a spatial grid".into()))?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!("{h}x{w} grid not divisible by {factor}")));
    }
    let (ph, pw) = (h / factor, w / factor);
    let d = tm.width();
    let grid = tm.tokens.view().into_shape_with_order((h, w, d)).expect("rows match grid");
    let mut out = Array2::zeros((ph * pw, d));
    for i in 0..ph {
        for j in 0..pw {
            let block = grid.slice(s![i * factor..(i + 1) * factor, j * factor..(j + 1) * factor, ..]);
            let mut mean = Array1::<f64>::zeros(d);
            for cell in block.outer_iter() {
                for tok in cell.outer_iter() {
                    mean += &tok;
                }
            }
            mean /= (factor * factor) as f64;
            out.row_mut(i * pw + j).assign(&mean);
        }
    }
    TokenMatrix::spatial(out, (ph, pw))
}
