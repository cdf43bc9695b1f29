//! Ideal circular low/high-pass filters and coherent tail sampling.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::schedule::{renoise, FrameLatent, NoiseSchedule};
use crate::{Error, Grid, Result};

/// Binary disc mask in centred (DC-at-centre) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMask {
    pub h: usize,
    pub w: usize,
    pub r: f64,
    pub mask: Array2<u8>,
}

impl FreqMask {
    /// Looks a bin up in the unshifted layout produced by a plain DFT.
    pub fn passes_unshifted(&self, u: usize, v: usize) -> bool {
        self.mask[[(u + self.h / 2) % self.h, (v + self.w / 2) % self.w]] == 1
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

pub fn freq_mask(h: usize, w: usize, r: f64) -> Result<FreqMask> {
    if h == 0 || w == 0 {
        return Err(Error::config("tail.low_pass_threshold", "grid dimensions must be positive"));
    }
    if !(r >= 0.0) {
        return Err(Error::config("tail.low_pass_threshold", format!("threshold {r} is negative")));
    }
    let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
    let mask = Array2::from_shape_fn((h, w), |(i, j)| {
        let uc = i as f64 - (h / 2) as f64;
        let vc = j as f64 - (w / 2) as f64;
        let rad = ((uc / hh).powi(2) + (vc / hw).powi(2)).sqrt();
        u8::from(rad <= r)
    });
    Ok(FreqMask { h, w, r, mask })
}

fn fft2(plane: &mut Array2<Complex64>, inverse: bool, planner: &mut FftPlanner<f64>) {
    let (h, w) = plane.dim();
    let row_fft = if inverse { planner.plan_fft_inverse(w) } else { planner.plan_fft_forward(w) };
    let col_fft = if inverse { planner.plan_fft_inverse(h) } else { planner.plan_fft_forward(h) };
    let mut buf = vec![Complex64::new(0.0, 0.0); w.max(h)];
    for mut row in plane.axis_iter_mut(Axis(0)) {
        buf[..w].iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
        row_fft.process(&mut buf[..w]);
        row.iter_mut().zip(&buf[..w]).for_each(|(v, b)| *v = *b);
    }
    for mut col in plane.axis_iter_mut(Axis(1)) {
        buf[..h].iter_mut().zip(col.iter()).for_each(|(b, v)| *b = *v);
        col_fft.process(&mut buf[..h]);
        col.iter_mut().zip(&buf[..h]).for_each(|(v, b)| *v = *b);
    }
    if inverse {
        let n = (h * w) as f64;
        plane.mapv_inplace(|v| v / n);
    }
}

/// Per-channel 2D spectrum, unshifted layout.
pub fn spectrum(x: &Grid) -> Vec<Array2<Complex64>> {
    let mut planner = FftPlanner::new();
    x.axis_iter(Axis(0))
        .map(|ch| {
            let mut plane = ch.mapv(|v| Complex64::new(v, 0.0));
            fft2(&mut plane, false, &mut planner);
            plane
        })
        .collect()
}

/// Filters every channel with the disc mask (or its complement) and returns
/// the real part together with the largest imaginary residue seen.
fn filter(x: &Grid, r: f64, keep_low: bool) -> Result<(Grid, f64)> {
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("filter input".into()));
    }
    let (_, h, w) = x.dim();
    let mask = freq_mask(h, w, r)?;
    let mut planner = FftPlanner::new();
    let mut out = Grid::zeros(x.dim());
    let mut residue = 0.0f64;
    for (ch, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let mut plane = ch.mapv(|v| Complex64::new(v, 0.0));
        fft2(&mut plane, false, &mut planner);
        plane.indexed_iter_mut().for_each(|((u, v), c)| {
            if mask.passes_unshifted(u, v) != keep_low {
                *c = Complex64::new(0.0, 0.0);
            }
        });
        fft2(&mut plane, true, &mut planner);
        for (d, c) in dst.iter_mut().zip(plane.iter()) {
            *d = c.re;
            residue = residue.max(c.im.abs());
        }
    }
    Ok((out, residue))
}

pub fn low_pass(x: &Grid, r: f64) -> Result<Grid> {
    filter(x, r, true).map(|(g, _)| g)
}

pub fn high_pass(x: &Grid, r: f64) -> Result<Grid> {
    filter(x, r, false).map(|(g, _)| g)
}

/// Largest imaginary part left after inverse-transforming the low band.
pub fn low_pass_imag_residue(x: &Grid, r: f64) -> Result<f64> {
    filter(x, r, true).map(|(_, res)| res)
}

/// Builds the next level-`T` tail from the level-`T−1` second-to-last latent.
///
/// `renoise_eps` drives the one-level forward transition; `eta` supplies the
/// high band of the new tail.
pub fn coherent_tail_sample(
    second_to_last: &FrameLatent,
    sched: &NoiseSchedule,
    renoise_eps: &Grid,
    eta: &Grid,
    r: f64,
) -> Result<FrameLatent> {
    let top = sched.num_steps;
    if second_to_last.noise_level + 1 != top {
        return Err(Error::QueueInvariant(format!(
            "tail source at level {}, expected {}",
            second_to_last.noise_level,
            top - 1
        )));
    }
    let z_hat = renoise(&second_to_last.data, top, renoise_eps, sched)?;
    let data = low_pass(&z_hat, r)? + high_pass(eta, r)?;
    Ok(FrameLatent::new(data, top, second_to_last.frame_index + 1))
}

/// `coherent_tail_sample` exposing the re-noised intermediate, for inspection.
pub fn renoised_source(
    second_to_last: &FrameLatent,
    sched: &NoiseSchedule,
    renoise_eps: &Grid,
) -> Result<Grid> {
    renoise(&second_to_last.data, sched.num_steps, renoise_eps, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_grid, stream, Stream};
    use crate::schedule::build_schedule;
    use ndarray::Array3;
    use std::f64::consts::PI;

    const FULL: f64 = std::f64::consts::SQRT_2;

    fn max_abs_diff(a: &Grid, b: &Grid) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn mask_limits() {
        let m = freq_mask(8, 6, FULL).unwrap();
        assert_eq!(m.count(), 48);
        let m = freq_mask(8, 6, 0.0).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.mask[[4, 3]], 1);
        assert!(m.passes_unshifted(0, 0));
        assert!(freq_mask(4, 4, -0.1).is_err());
    }

    #[test]
    fn mask_count_matches_enumeration() {
        // brute force over signed frequencies
        let (h, w, r) = (8usize, 8usize, 0.25);
        let mut count = 0;
        for u in -4i32..4 {
            for v in -4i32..4 {
                let rad = ((u as f64 / 4.0).powi(2) + (v as f64 / 4.0).powi(2)).sqrt();
                if rad <= r {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 5);
        assert_eq!(freq_mask(h, w, r).unwrap().count(), count);
    }

    #[test]
    fn mask_point_symmetric() {
        for (h, w) in [(8, 8), (7, 5), (6, 9), (1, 4)] {
            for r in [0.0, 0.25, 0.5, 0.9, 1.0] {
                let m = freq_mask(h, w, r).unwrap();
                for u in 0..h {
                    for v in 0..w {
                        assert_eq!(
                            m.passes_unshifted(u, v),
                            m.passes_unshifted((h - u) % h, (w - v) % w)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn constant_is_pure_dc() {
        let x = Array3::from_elem((2, 8, 8), 1.7);
        for r in [0.0, 0.25, 1.0] {
            assert!(max_abs_diff(&low_pass(&x, r).unwrap(), &x) < 1e-12);
            assert!(high_pass(&x, r).unwrap().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn full_pass_is_identity() {
        let x = gaussian_grid(&mut stream(5, Stream::Test), (3, 8, 6));
        assert!(max_abs_diff(&low_pass(&x, FULL).unwrap(), &x) < 1e-6);
    }

    #[test]
    fn sinusoid_outside_disc_is_removed() {
        // frequency (2, 3) on an 8x8 grid: radius sqrt(0.25 + 0.5625) > 0.25
        let x = Array3::from_shape_fn((1, 8, 8), |(_, i, j)| {
            (2.0 * PI * (2.0 * i as f64 / 8.0 + 3.0 * j as f64 / 8.0)).cos()
        });
        assert!(low_pass(&x, 0.25).unwrap().iter().all(|v| v.abs() < 1e-6));
        assert!(max_abs_diff(&high_pass(&x, 0.25).unwrap(), &x) < 1e-6);
    }

    #[test]
    fn outputs_are_real() {
        let x = gaussian_grid(&mut stream(6, Stream::Test), (2, 8, 8));
        for r in [0.0, 0.25, 0.5, 1.0, FULL] {
            assert!(low_pass_imag_residue(&x, r).unwrap() < 1e-9);
        }
        let x = gaussian_grid(&mut stream(6, Stream::Test), (1, 7, 5));
        assert!(low_pass_imag_residue(&x, 0.4).unwrap() < 1e-9);
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = Array3::zeros((1, 4, 4));
        x[[0, 1, 1]] = f64::NAN;
        assert!(matches!(low_pass(&x, 0.25), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tail_sample_limits() {
        let s = build_schedule(8, 1e-3, 0.05).unwrap();
        let mut rng = stream(7, Stream::Test);
        let src = FrameLatent::new(gaussian_grid(&mut rng, (2, 8, 8)), 7, 20);
        let e = gaussian_grid(&mut rng, (2, 8, 8));
        let eta = gaussian_grid(&mut rng, (2, 8, 8));
        let z_hat = renoised_source(&src, &s, &e).unwrap();

        let full = coherent_tail_sample(&src, &s, &e, &eta, FULL).unwrap();
        assert_eq!(full.noise_level, 8);
        assert_eq!(full.frame_index, 21);
        assert!(max_abs_diff(&full.data, &z_hat) < 1e-9);

        // r = 0: DC from z_hat, everything else from eta
        let dc = coherent_tail_sample(&src, &s, &e, &eta, 0.0).unwrap();
        for c in 0..2 {
            let mean = |g: &Grid| g.index_axis(Axis(0), c).mean().unwrap();
            assert!((mean(&dc.data) - mean(&z_hat)).abs() < 1e-9);
            let expect = eta.index_axis(Axis(0), c).mapv(|v| v - mean(&eta)) + mean(&z_hat);
            for (a, b) in dc.data.index_axis(Axis(0), c).iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }

        let out = coherent_tail_sample(&src, &s, &e, &eta, 0.25).unwrap();
        let lo_out = low_pass(&out.data, 0.25).unwrap();
        let lo_hat = low_pass(&z_hat, 0.25).unwrap();
        assert!(max_abs_diff(&lo_out, &lo_hat) < 1e-6);

        let wrong = FrameLatent::new(src.data.clone(), 6, 20);
        assert!(matches!(
            coherent_tail_sample(&wrong, &s, &e, &eta, 0.25),
            Err(Error::QueueInvariant(_))
        ));
    }

    #[test]
    fn tail_high_band_is_unit_gaussian_per_bin() {
        // Monte Carlo over tails: each high-band bin of the output must carry the
        // variance a unit Gaussian puts there (h*w per complex bin, unnormalised DFT).
        let s = build_schedule(8, 1e-3, 0.05).unwrap();
        let mut rng = stream(8, Stream::Test);
        let (h, w, n) = (8, 8, 10_000);
        let mask = freq_mask(h, w, 0.25).unwrap();
        let mut acc = Array2::<f64>::zeros((h, w));
        let src = FrameLatent::new(Array3::from_elem((1, h, w), 3.0), 7, 1);
        for _ in 0..n {
            let e = gaussian_grid(&mut rng, (1, h, w));
            let eta = gaussian_grid(&mut rng, (1, h, w));
            let out = coherent_tail_sample(&src, &s, &e, &eta, 0.25).unwrap();
            let spec = &spectrum(&out.data)[0];
            acc.zip_mut_with(spec, |a, c| *a += c.norm_sqr());
        }
        let expected = (h * w) as f64;
        let mut worst = 0.0f64;
        for u in 0..h {
            for v in 0..w {
                if !mask.passes_unshifted(u, v) {
                    let var = acc[[u, v]] / n as f64;
                    worst = worst.max((var - expected).abs() / expected);
                }
            }
        }
        assert!(worst < 0.05, "worst relative deviation {worst}");
    }
}
