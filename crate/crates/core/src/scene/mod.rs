//! Synthetic scenes of moving blobs, seeded condition embeddings and the two
//! ε-predictors (analytic Gaussian posterior and a seeded toy attention net).

mod toy;

pub use toy::{cell_mask_from_tokens, token_mask_from_cells, CaptureSite, ForwardOutput, ToyConfig, ToyDenoiser};

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{keyed_stream, Stream};
use crate::schedule::NoiseSchedule;
use crate::{Error, Grid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub subject_id: u64,
    pub radius: f64,
    /// Cells per frame, `[row, col]`.
    pub velocity: [f64; 2],
    pub position: [f64; 2],
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub subjects: Vec<SubjectSpec>,
    pub background: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 32,
            width: 32,
            subjects: vec![SubjectSpec {
                subject_id: 7,
                radius: 6.0,
                velocity: [0.0, 1.0],
                position: [16.0, 8.0],
                amplitude: 1.5,
            }],
            background: 0.0,
            seed: 11,
        }
    }
}

impl SceneSpec {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn subject_ids(&self) -> Vec<u64> {
        self.subjects.iter().map(|s| s.subject_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("scene", "grid dimensions must be positive"));
        }
        for s in &self.subjects {
            if !(s.radius >= 1.0) {
                return Err(Error::config(
                    "scene.subjects.radius",
                    format!("subject {} has radius {} < 1", s.subject_id, s.radius),
                ));
            }
        }
        Ok(())
    }
}

/// Signed toroidal offset from `center` to `x` on a ring of length `n`.
fn wrap_offset(x: f64, center: f64, n: usize) -> f64 {
    let n = n as f64;
    let d = (x - center).rem_euclid(n);
    if d > n / 2.0 {
        d - n
    } else {
        d
    }
}

/// Latent-space colour of a subject: the first `channels` coordinates of its
/// condition embedding, renormalised. Tying appearance to the embedding gives
/// the toy denoiser's text keys something to find.
pub fn subject_appearance(subject_id: u64, seed: u64, channels: usize, width: usize) -> Array1<f64> {
    let row = condition_row(subject_id, seed, width.max(channels));
    let head = row.slice(ndarray::s![..channels]).to_owned();
    let norm = head.dot(&head).sqrt();
    if norm > 1e-12 {
        head / norm
    } else {
        Array1::from_elem(channels, 1.0 / (channels as f64).sqrt())
    }
}

/// Renders frame `frame_index` and its ground-truth subject mask.
pub fn render_frame(spec: &SceneSpec, frame_index: usize, embed_width: usize) -> (Grid, Array2<u8>) {
    let (c, h, w) = spec.shape();
    let mut latent = Grid::from_elem((c, h, w), spec.background);
    let mut mask = Array2::zeros((h, w));
    let k = frame_index as f64;
    for s in &spec.subjects {
        let cy = (s.position[0] + s.velocity[0] * k).rem_euclid(h as f64);
        let cx = (s.position[1] + s.velocity[1] * k).rem_euclid(w as f64);
        let look = subject_appearance(s.subject_id, spec.seed, c, embed_width);
        for i in 0..h {
            for j in 0..w {
                let dy = wrap_offset(i as f64, cy, h);
                let dx = wrap_offset(j as f64, cx, w);
                let dist = (dy * dy + dx * dx).sqrt();
                if dist < s.radius {
                    let bump = s.amplitude * 0.5 * (1.0 + (std::f64::consts::PI * dist / s.radius).cos());
                    for ch in 0..c {
                        latent[[ch, i, j]] += bump * look[ch];
                    }
                    mask[[i, j]] = 1;
                }
            }
        }
    }
    (latent, mask)
}

/// Seeded stand-in for text-encoder output: one unit-norm row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Array2<f64>,
    pub subject_token_rows: Vec<usize>,
}

impl ConditionEmbedding {
    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn has_subjects(&self) -> bool {
        !self.subject_token_rows.is_empty()
    }
}

fn condition_row(subject_id: u64, seed: u64, d: usize) -> Array1<f64> {
    let mut rng = keyed_stream(seed, Stream::Condition, subject_id);
    let v: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

pub fn make_condition(subject_ids: &[u64], seed: u64, d: usize) -> Result<ConditionEmbedding> {
    if d == 0 {
        return Err(Error::config("toy.width", "embedding width must be positive"));
    }
    let mut tokens = Array2::zeros((subject_ids.len(), d));
    for (row, &id) in subject_ids.iter().enumerate() {
        tokens.row_mut(row).assign(&condition_row(id, seed, d));
    }
    Ok(ConditionEmbedding {
        tokens,
        subject_token_rows: (0..subject_ids.len()).collect(),
    })
}

/// Posterior mean of `x0 ~ N(mu, sigma_d²·I)` given `z_t`.
pub fn gaussian_posterior_mean(z_t: &Grid, t: usize, mu: &Grid, sigma_d: f64, sched: &NoiseSchedule) -> Result<Grid> {
    if !(sigma_d > 0.0) {
        return Err(Error::config("analytic.sigma_d", format!("{sigma_d} must be positive")));
    }
    if z_t.dim() != mu.dim() {
        return Err(Error::Dimension(format!("latent {:?} vs prior mean {:?}", z_t.dim(), mu.dim())));
    }
    if t == 0 || t > sched.num_steps {
        return Err(Error::Timestep {
            t,
            lo: 1,
            hi: sched.num_steps,
        });
    }
    let ab = sched.alpha_bar(t);
    let var = sigma_d * sigma_d;
    let gain = ab.sqrt() * var / (ab * var + 1.0 - ab);
    Ok(ndarray::Zip::from(z_t).and(mu).map_collect(|&z, &m| m + gain * (z - ab.sqrt() * m)))
}

/// Exact ε-prediction for a Gaussian data prior.
pub fn analytic_gaussian_epsilon(z_t: &Grid, t: usize, mu: &Grid, sigma_d: f64, sched: &NoiseSchedule) -> Result<Grid> {
    let m = gaussian_posterior_mean(z_t, t, mu, sigma_d, sched)?;
    let ab = sched.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(z_t).and(&m).map_collect(|&z, &x0| (z - sa * x0) / sn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_grid, stream};
    use crate::schedule::build_schedule;
    use ndarray::Array3;

    fn one_blob(velocity: [f64; 2]) -> SceneSpec {
        SceneSpec {
            channels: 2,
            height: 16,
            width: 12,
            subjects: vec![SubjectSpec {
                subject_id: 3,
                radius: 3.5,
                velocity,
                position: [5.0, 4.0],
                amplitude: 1.0,
            }],
            background: 0.2,
            seed: 9,
        }
    }

    #[test]
    fn static_scene_is_constant() {
        let spec = one_blob([0.0, 0.0]);
        let (a, ma) = render_frame(&spec, 0, 32);
        for k in [1, 5, 40] {
            let (b, mb) = render_frame(&spec, k, 32);
            assert_eq!(a, b);
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn integer_motion_is_a_toroidal_shift() {
        let spec = one_blob([2.0, -3.0]);
        let (f0, m0) = render_frame(&spec, 0, 32);
        for k in [1usize, 4, 9] {
            let (fk, mk) = render_frame(&spec, k, 32);
            let (dy, dx) = (2 * k as i64, -3 * k as i64);
            for ch in 0..2 {
                for i in 0..16i64 {
                    for j in 0..12i64 {
                        let si = (i - dy).rem_euclid(16) as usize;
                        let sj = (j - dx).rem_euclid(12) as usize;
                        assert_eq!(fk[[ch, i as usize, j as usize]], f0[[ch, si, sj]]);
                        assert_eq!(mk[[i as usize, j as usize]], m0[[si, sj]]);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_area_matches_lattice_count() {
        let spec = one_blob([0.0, 0.0]);
        let (_, m) = render_frame(&spec, 0, 32);
        let r: f64 = 3.5;
        let mut count = 0;
        for dy in -4i32..=4 {
            for dx in -4i32..=4 {
                if ((dy * dy + dx * dx) as f64) < r * r {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 37);
        assert_eq!(m.iter().filter(|&&v| v == 1).count(), count);
    }

    #[test]
    fn conditions_are_deterministic_and_distinct() {
        let a = make_condition(&[1, 2, 3, 40], 5, 32).unwrap();
        let b = make_condition(&[1, 2, 3, 40], 5, 32).unwrap();
        assert_eq!(a, b);
        for i in 0..4 {
            assert!((a.tokens.row(i).dot(&a.tokens.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(a.tokens.row(i).dot(&a.tokens.row(j)) < 0.9);
            }
        }
        let e = make_condition(&[], 5, 32).unwrap();
        assert_eq!(e.tokens.nrows(), 0);
        assert!(!e.has_subjects());
    }

    #[test]
    fn analytic_epsilon_limits() {
        let s = build_schedule(16, 1e-3, 0.05).unwrap();
        let mut rng = stream(1, Stream::Test);
        let mu = gaussian_grid(&mut rng, (1, 3, 3));
        let z = gaussian_grid(&mut rng, (1, 3, 3));
        let t = 9;
        let ab = s.alpha_bar(t);

        let tiny = analytic_gaussian_epsilon(&z, t, &mu, 1e-9, &s).unwrap();
        for ((e, zi), m) in tiny.iter().zip(z.iter()).zip(mu.iter()) {
            assert!((e - (zi - ab.sqrt() * m) / (1.0 - ab).sqrt()).abs() < 1e-9);
        }

        let at_mean = mu.mapv(|m| ab.sqrt() * m);
        let eps = analytic_gaussian_epsilon(&at_mean, t, &mu, 0.7, &s).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-12));

        assert!(analytic_gaussian_epsilon(&z, t, &mu, 0.0, &s).is_err());
    }

    #[test]
    fn analytic_epsilon_is_scaled_marginal_score() {
        // ε̂ = −sqrt(1−ᾱ)·∇log p_t(z) with p_t = N(sqrt(ᾱ)mu, (ᾱσ²+1−ᾱ)I);
        // the score is taken by central differences of the log-density.
        let s = build_schedule(16, 1e-3, 0.05).unwrap();
        let sigma_d: f64 = 0.5;
        let mu = 0.3;
        for t in [1usize, 6, 16] {
            let ab = s.alpha_bar(t);
            let var = ab * sigma_d.powi(2) + 1.0 - ab;
            let logp = |z: f64| -0.5 * (z - ab.sqrt() * mu).powi(2) / var;
            for z in [-1.2, 0.0, 0.9] {
                let h = 1e-5;
                let score = (logp(z + h) - logp(z - h)) / (2.0 * h);
                let expect = -(1.0 - ab).sqrt() * score;
                let got = analytic_gaussian_epsilon(
                    &Array3::from_elem((1, 1, 1), z),
                    t,
                    &Array3::from_elem((1, 1, 1), mu),
                    sigma_d,
                    &s,
                )
                .unwrap()[[0, 0, 0]];
                assert!((got - expect).abs() < 1e-7, "t={t} z={z}: {got} vs {expect}");
            }
        }
    }
}
