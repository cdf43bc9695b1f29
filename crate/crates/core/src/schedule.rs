//! Noise schedule, forward diffusion and deterministic DDIM stepping.

use serde::{Deserialize, Serialize};

use crate::{Error, Grid, Result};

/// Linear β ladder with its cumulative products.
///
/// Timesteps are 1-based: `betas[t - 1]` is β_t. ᾱ_0 is defined as 1 and is
/// reachable through [`NoiseSchedule::alpha_bar`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// One frame's latent tagged with its noise level and global frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLatent {
    pub data: Grid,
    pub noise_level: usize,
    pub frame_index: usize,
}

impl FrameLatent {
    pub fn new(data: Grid, noise_level: usize, frame_index: usize) -> Self {
        Self {
            data,
            noise_level,
            frame_index,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn build_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_steps < 2 {
        return Err(Error::config("T", format!("need at least 2 timesteps, got {num_steps}")));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::config("schedule.beta_start", format!("{beta_start} not in (0,1)")));
    }
    if !(beta_end < 1.0 && beta_end >= beta_start) {
        return Err(Error::config(
            "schedule.beta_end",
            format!("{beta_end} must satisfy beta_start <= beta_end < 1"),
        ));
    }
    let step = (beta_end - beta_start) / (num_steps - 1) as f64;
    let betas: Vec<f64> = (0..num_steps)
        .map(|i| if i + 1 == num_steps { beta_end } else { beta_start + step * i as f64 })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        num_steps,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    /// ᾱ_t for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.num_steps {
            return Err(Error::Timestep {
                t,
                lo,
                hi: self.num_steps,
            });
        }
        Ok(())
    }
}

fn same_shape(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`
pub fn forward_diffuse(x0: &Grid, t: usize, eps: &Grid, sched: &NoiseSchedule) -> Result<Grid> {
    same_shape(x0, eps, "forward_diffuse")?;
    sched.check(t, 1)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// One deterministic DDIM step (η = 0) from level `t` to `t − 1`.
pub fn ddim_step(z_t: &Grid, eps_hat: &Grid, t: usize, sched: &NoiseSchedule) -> Result<Grid> {
    same_shape(z_t, eps_hat, "ddim_step")?;
    sched.check(t, 1)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let (sa_t, sn_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_prev, sn_prev) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(ndarray::Zip::from(z_t).and(eps_hat).map_collect(|&z, &e| {
        let x0 = (z - sn_t * e) / sa_t;
        sa_prev * x0 + sn_prev * e
    }))
}

/// Forward transition from level `t − 1` to level `t`.
pub fn renoise(z_prev: &Grid, t: usize, eta: &Grid, sched: &NoiseSchedule) -> Result<Grid> {
    same_shape(z_prev, eta, "renoise")?;
    sched.check(t, 2)?;
    let ratio = sched.alpha_bar(t) / sched.alpha_bar(t - 1);
    let (a, b) = (ratio.sqrt(), (1.0 - ratio).max(0.0).sqrt());
    Ok(ndarray::Zip::from(z_prev).and(eta).map_collect(|&z, &e| a * z + b * e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_grid, stream, Stream};
    use ndarray::Array3;

    fn constant_half() -> NoiseSchedule {
        build_schedule(2, 0.5, 0.5).unwrap()
    }

    #[test]
    fn constant_schedule_is_geometric() {
        let s = constant_half();
        assert_eq!(s.betas, vec![0.5, 0.5]);
        assert_eq!(s.alpha_bars, vec![0.5, 0.25]);
    }

    #[test]
    fn default_ladder_matches_product_loop() {
        let s = build_schedule(64, 1e-4, 2e-2).unwrap();
        let mut prod = 1.0;
        for i in 0..64 {
            let beta = 1e-4 + (2e-2 - 1e-4) * (i as f64) / 63.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(64) - prod).abs() < 1e-12);
        // frozen from the loop above
        assert!((s.alpha_bar(64) - 0.523_318_130_272_267).abs() < 1e-12, "{}", s.alpha_bar(64));
        for t in 1..=64 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.betas[t - 1] > 0.0 && s.alphas[t - 1] > 0.0);
            assert_eq!(s.alphas[t - 1], 1.0 - s.betas[t - 1]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(build_schedule(1, 0.1, 0.2), Err(Error::Config { key, .. }) if key == "T"));
        assert!(matches!(build_schedule(4, 0.0, 0.2), Err(Error::Config { key, .. }) if key == "schedule.beta_start"));
        assert!(matches!(build_schedule(4, 0.3, 0.2), Err(Error::Config { key, .. }) if key == "schedule.beta_end"));
        assert!(build_schedule(4, 0.3, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = constant_half();
        let z = Array3::zeros((1, 2, 2));
        assert_eq!(forward_diffuse(&z, 1, &z, &s).unwrap(), z);

        let ones = Array3::ones((1, 2, 2));
        let out = forward_diffuse(&ones, 2, &ones, &s).unwrap();
        let expect = 0.5 + 0.75f64.sqrt();
        assert!(out.iter().all(|v| (v - expect).abs() < 1e-15));

        let bad = Array3::zeros((1, 2, 3));
        assert!(matches!(forward_diffuse(&ones, 1, &bad, &s), Err(Error::Dimension(_))));
        assert!(matches!(forward_diffuse(&ones, 3, &ones, &s), Err(Error::Timestep { .. })));
    }

    #[test]
    fn ddim_noise_free_contraction_and_terminal_step() {
        let s = build_schedule(8, 1e-3, 0.2).unwrap();
        let mut rng = stream(1, Stream::Test);
        let z = gaussian_grid(&mut rng, (2, 3, 3));
        let zero = Array3::zeros(z.dim());
        let out = ddim_step(&z, &zero, 5, &s).unwrap();
        let k = (s.alpha_bar(4) / s.alpha_bar(5)).sqrt();
        for (o, zi) in out.iter().zip(z.iter()) {
            assert!((o - k * zi).abs() < 1e-12);
        }

        let eps = gaussian_grid(&mut rng, (2, 3, 3));
        let out = ddim_step(&z, &eps, 1, &s).unwrap();
        let ab = s.alpha_bar(1);
        for ((o, zi), e) in out.iter().zip(z.iter()).zip(eps.iter()) {
            let x0 = (zi - (1.0 - ab).sqrt() * e) / ab.sqrt();
            assert!((o - x0).abs() < 1e-12);
        }
        assert!(matches!(ddim_step(&z, &eps, 0, &s), Err(Error::Timestep { .. })));
        assert!(matches!(ddim_step(&z, &eps, 9, &s), Err(Error::Timestep { .. })));
    }

    #[test]
    fn ddim_with_true_noise_walks_the_bridge() {
        let s = build_schedule(64, 1e-4, 2e-2).unwrap();
        let mut rng = stream(2, Stream::Test);
        let x0 = gaussian_grid(&mut rng, (2, 4, 4));
        let eps = gaussian_grid(&mut rng, (2, 4, 4));
        for t in 1..=64 {
            let zt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let stepped = ddim_step(&zt, &eps, t, &s).unwrap();
            let expect = if t == 1 {
                x0.clone()
            } else {
                forward_diffuse(&x0, t - 1, &eps, &s).unwrap()
            };
            for (a, b) in stepped.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn renoise_degenerate_and_linear() {
        let s = constant_half();
        let mut rng = stream(3, Stream::Test);
        let eta = gaussian_grid(&mut rng, (1, 3, 3));
        let zero = Array3::zeros(eta.dim());
        let out = renoise(&zero, 2, &eta, &s).unwrap();
        let k = (1.0f64 - 0.5).sqrt();
        for (o, e) in out.iter().zip(eta.iter()) {
            assert!((o - k * e).abs() < 1e-15);
        }
        assert!(matches!(renoise(&zero, 1, &eta, &s), Err(Error::Timestep { .. })));

        // ᾱ_t == ᾱ_{t-1}: betas of exactly zero are not constructible, so build by hand.
        let flat = NoiseSchedule {
            num_steps: 2,
            betas: vec![0.5, 0.0],
            alphas: vec![0.5, 1.0],
            alpha_bars: vec![0.5, 0.5],
        };
        let z = gaussian_grid(&mut rng, (1, 3, 3));
        assert_eq!(renoise(&z, 2, &eta, &flat).unwrap(), z);
    }

    /// Moment-matched standard normal draws: sample mean 0, sample variance 1.
    fn matched_normals(n: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
        let g = gaussian_grid(rng, (1, 1, n));
        let mean = g.sum() / n as f64;
        let sd = (g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        g.iter().map(|v| (v - mean) / sd).collect()
    }

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    }

    #[test]
    fn renoise_composes_with_forward_diffusion_in_moments() {
        let s = build_schedule(64, 1e-4, 2e-2).unwrap();
        let n = 10_000;
        let mut rng = stream(4, Stream::Test);
        let x = Array3::from_elem((1, 1, n), 0.7);
        for t in [2usize, 17, 40, 64] {
            let e1 = Array3::from_shape_vec((1, 1, n), matched_normals(n, &mut rng)).unwrap();
            let e2 = Array3::from_shape_vec((1, 1, n), matched_normals(n, &mut rng)).unwrap();
            let e3 = Array3::from_shape_vec((1, 1, n), matched_normals(n, &mut rng)).unwrap();
            let two = renoise(&forward_diffuse(&x, t - 1, &e1, &s).unwrap(), t, &e2, &s).unwrap();
            let one = forward_diffuse(&x, t, &e3, &s).unwrap();
            let (mean_a, var_a) = moments(two.as_slice().unwrap());
            let (mean_b, var_b) = moments(one.as_slice().unwrap());
            assert!((mean_a - mean_b).abs() / mean_b.abs() < 0.02, "t={t} {mean_a} {mean_b}");
            assert!((var_a - var_b).abs() / var_b < 0.02, "t={t} {var_a} {var_b}");
        }
    }
}
