use ndarray::Array2;
use rayon::prelude::*;

use super::config::{DenoiserKind, RunConfig, TailMode};
use crate::attention::{collect_masked_kv, AttentionCapture, TokenMatrix};
use crate::freq::coherent_tail_sample;
use crate::guidance::{apply_guidance, guidance_gradient, init_bank, update_bank, SubjectBank};
use crate::metrics::{evaluate, MetricsReport};
use crate::queue::{advance, enqueue_tail, init_queue, partition_windows, DiagonalQueue};
use crate::rng::{gaussian_grid, stream, Stream};
use crate::scene::{
    analytic_gaussian_epsilon, cell_mask_from_tokens, make_condition, render_frame, ConditionEmbedding,
    SceneSpec, ToyDenoiser,
};
use crate::schedule::{ddim_step, FrameLatent, NoiseSchedule};
use crate::{Error, Grid, Result};

/// The ε-predictor driving a run.
#[derive(Debug, Clone)]
pub enum Denoiser {
    Toy(ToyDenoiser),
    /// Gaussian posterior with the rendered scene frame as prior mean.
    Analytic {
        sigma_d: f64,
        scene: SceneSpec,
        embed_width: usize,
    },
}

struct Prediction {
    eps: Vec<Grid>,
    captures: Option<Vec<AttentionCapture>>,
}

impl Denoiser {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.denoiser {
            DenoiserKind::Toy => Denoiser::Toy(ToyDenoiser::new(cfg.toy.clone(), cfg.scene.channels, cfg.seed)?),
            DenoiserKind::Analytic => Denoiser::Analytic {
                sigma_d: cfg.analytic.sigma_d,
                scene: cfg.scene.clone(),
                embed_width: cfg.toy.width,
            },
        })
    }

    fn predict(
        &self,
        latents: &[&Grid],
        timesteps: &[usize],
        frame_indices: &[usize],
        cond: &ConditionEmbedding,
        refs: Option<(&TokenMatrix, &TokenMatrix)>,
        sched: &NoiseSchedule,
    ) -> Result<Prediction> {
        match self {
            Denoiser::Toy(model) => {
                let out = model.forward(latents, timesteps, frame_indices, cond, refs, sched)?;
                Ok(Prediction {
                    eps: out.eps,
                    captures: Some(out.captures),
                })
            }
            Denoiser::Analytic {
                sigma_d,
                scene,
                embed_width,
            } => {
                let eps = latents
                    .par_iter()
                    .zip(timesteps.par_iter())
                    .zip(frame_indices.par_iter())
                    .map(|((z, &t), &idx)| {
                        let (mu, _) = render_frame(scene, idx.saturating_sub(1), *embed_width);
                        analytic_gaussian_epsilon(z, t, &mu, *sigma_d, sched)
                    })
                    .collect::<Result<_>>()?;
                Ok(Prediction { eps, captures: None })
            }
        }
    }
}

/// What the observer sees after every queue cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub cycle: usize,
    pub tau: usize,
    pub noise_levels: Vec<usize>,
    pub frame_indices: Vec<usize>,
    /// Frame index of the emitted head, `None` while the queue is still
    /// draining warm-up duplicates.
    pub emitted: Option<usize>,
    /// Elements held by the queue.
    pub queue_footprint: usize,
    /// Elements held by the queue, the subject bank and one step of captures.
    pub working_footprint: usize,
    pub guided_frames: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub frames: Vec<Grid>,
    /// Per-frame subject masks on the latent grid.
    pub masks: Vec<Array2<u8>>,
    /// `None` for videos shorter than three frames.
    pub metrics: Option<MetricsReport>,
    pub config_hash: String,
    pub cycles: usize,
    pub bank: Option<SubjectBank>,
}

pub fn generate(cfg: &RunConfig) -> Result<RunOutput> {
    generate_with(cfg, |_| {})
}

fn check_finite(grids: &[Grid], step: usize, what: &str) -> Result<()> {
    match grids.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        Some(i) => Err(Error::Divergence {
            step,
            msg: format!("non-finite {what} in slot {i}"),
        }),
        None => Ok(()),
    }
}

/// Non-finite values met inside a step are reported as divergence at that step.
fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Divergence {
            step,
            msg: format!("non-finite values in {what}"),
        },
        other => other,
    }
}

fn capture_mask(cap: &AttentionCapture, patch: usize) -> Array2<u8> {
    cell_mask_from_tokens(&cap.subject_mask.mask, patch)
}

/// Masked keys and values of the last `span` previous-step captures whose
/// frames are still queued.
fn sacfa_refs(prev: &[AttentionCapture], queue: &DiagonalQueue, span: usize) -> Result<(TokenMatrix, TokenMatrix)> {
    let first = queue.slots().first().map_or(usize::MAX, |s| s.frame_index);
    let live: Vec<&AttentionCapture> = prev.iter().filter(|c| c.frame_index >= first).collect();
    let chosen = &live[live.len().saturating_sub(span)..];
    let parts: Vec<_> = chosen.iter().map(|c| (&c.k, &c.v, &c.subject_mask)).collect();
    collect_masked_kv(&parts)
}

/// Runs warm-up and the queue loop, calling `observer` after every cycle.
pub fn generate_with(cfg: &RunConfig, mut observer: impl FnMut(&CycleReport)) -> Result<RunOutput> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let (t_max, f) = (cfg.queue_len, cfg.window_len);
    let shape = cfg.scene.shape();
    let model = Denoiser::from_config(cfg)?;
    let cond = make_condition(&cfg.scene.subject_ids(), cfg.scene.seed, cfg.toy.width)?;
    let patch = cfg.toy.patch;
    let gt_mask = |frame_index: usize| render_frame(&cfg.scene, frame_index - 1, cfg.toy.width).1;

    // warm-up: all f frames share one timestep
    let mut rng = stream(cfg.seed, Stream::WarmupNoise);
    let mut clip: Vec<Grid> = (0..f).map(|_| gaussian_grid(&mut rng, shape)).collect();
    let warm_indices: Vec<usize> = (1..=f).collect();
    let mut warm_caps = None;
    let mut step = 0;
    for t in (1..=t_max).rev() {
        step += 1;
        let refs: Vec<&Grid> = clip.iter().collect();
        let pred = model
            .predict(&refs, &vec![t; f], &warm_indices, &cond, None, &sched)
            .map_err(at_step(step))?;
        check_finite(&pred.eps, step, "noise prediction")?;
        clip = clip
            .par_iter()
            .zip(pred.eps.par_iter())
            .map(|(z, e)| ddim_step(z, e, t, &sched))
            .collect::<Result<_>>()?;
        check_finite(&clip, step, "warm-up latent")?;
        warm_caps = pred.captures;
    }

    let emitted_warm = cfg.n_frames.min(f);
    let mut frames: Vec<Grid> = clip[..emitted_warm].to_vec();
    let mut masks: Vec<Array2<u8>> = match &warm_caps {
        Some(caps) => caps[..emitted_warm].iter().map(|c| capture_mask(c, patch)).collect(),
        None => (1..=emitted_warm).map(gt_mask).collect(),
    };

    let toy = matches!(model, Denoiser::Toy(_));
    let use_sacfa = toy && cfg.sacfa.enabled;
    let use_guidance = toy && cfg.guidance.enabled;
    let mut bank = SubjectBank::uninitialized(cfg.guidance.bank_rows, cfg.toy.width, cfg.guidance.lambda);
    let cycles = if cfg.n_frames > f { cfg.n_frames } else { 0 };

    if cycles > 0 {
        let mut queue = init_queue(&clip, t_max, f, &sched, &mut stream(cfg.seed, Stream::QueueInit))?;
        queue.check_invariants()?;
        let mut tail_rng = stream(cfg.seed, Stream::TailNoise);
        let mut renoise_rng = stream(cfg.seed, Stream::RenoiseNoise);
        let mut prev_caps: Vec<AttentionCapture> = warm_caps.unwrap_or_default();

        for cycle in 1..=cycles {
            step += 1;
            let refs = if use_sacfa {
                Some(sacfa_refs(&prev_caps, &queue, cfg.sacfa.frame_span).map_err(at_step(step))?)
            } else {
                None
            };
            let ref_pair = refs.as_ref().map(|(k, v)| (k, v));

            let preds = partition_windows(&queue)
                .par_iter()
                .map(|w| {
                    let lat: Vec<&Grid> = w.latents.iter().map(|l| &l.data).collect();
                    let idx: Vec<usize> = w.latents.iter().map(|l| l.frame_index).collect();
                    model.predict(&lat, &w.timesteps, &idx, &cond, ref_pair, &sched)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(at_step(step))?;
            let mut eps = Vec::with_capacity(t_max);
            let mut caps = Vec::with_capacity(t_max);
            for p in preds {
                eps.extend(p.eps);
                caps.extend(p.captures.unwrap_or_default());
            }
            check_finite(&eps, step, "noise prediction")?;

            let mut latents: Vec<FrameLatent> = queue.slots().to_vec();
            let mut guided = 0;
            if use_guidance && bank.initialized {
                let Denoiser::Toy(toy_model) = &model else { unreachable!() };
                let lo = t_max - cfg.guidance.tail_span;
                let steered = latents[lo..]
                    .par_iter()
                    .zip(caps[lo..].par_iter())
                    .map(|(z, cap)| {
                        let grad = guidance_gradient(z, &cap.subject_mask, &bank, toy_model)?;
                        apply_guidance(z, &grad, z.noise_level, &cfg.guidance, &sched)
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(at_step(step))?;
                guided = steered.len();
                for (slot, z) in latents[lo..].iter_mut().zip(steered) {
                    *slot = z;
                }
            }

            let denoised = latents
                .par_iter()
                .zip(eps.par_iter())
                .map(|(z, e)| ddim_step(&z.data, e, z.noise_level, &sched))
                .collect::<Result<Vec<_>>>()?;
            check_finite(&denoised, step, "latent")?;
            let (head, rest) = advance(queue, denoised)?;
            rest.check_invariants()?;

            let emitted = (head.frame_index > f).then_some(head.frame_index);
            if emitted.is_some() {
                masks.push(match caps.first() {
                    Some(c) => capture_mask(c, patch),
                    None => gt_mask(head.frame_index),
                });
                frames.push(head.data);
            }

            if use_guidance {
                let head_caps: Vec<&AttentionCapture> = caps[..cfg.guidance.head_span].iter().collect();
                bank = if bank.initialized {
                    update_bank(&bank, &head_caps)?
                } else {
                    init_bank(&head_caps, cfg.guidance.bank_rows, cfg.toy.width, cfg.guidance.lambda)?
                };
            }

            let eta = gaussian_grid(&mut tail_rng, shape);
            let renoise_eps = gaussian_grid(&mut renoise_rng, shape);
            let source = rest.slots().last().expect("queue keeps T-1 slots");
            let tail = match cfg.tail.mode {
                TailMode::Coherent => {
                    coherent_tail_sample(source, &sched, &renoise_eps, &eta, cfg.tail.low_pass_threshold)?
                }
                TailMode::Gaussian => FrameLatent::new(eta, t_max, source.frame_index + 1),
            };
            queue = enqueue_tail(rest, tail)?;
            queue.check_invariants()?;

            let cap_footprint: usize = caps.iter().map(|c| c.footprint()).sum();
            observer(&CycleReport {
                cycle,
                tau: queue.tau(),
                noise_levels: queue.noise_levels(),
                frame_indices: queue.frame_indices(),
                emitted,
                queue_footprint: queue.footprint(),
                working_footprint: queue.footprint() + bank.k_ltm.len() + cap_footprint,
                guided_frames: guided,
            });
            prev_caps = caps;
        }
    }

    let metrics = if frames.len() >= 3 {
        Some(evaluate(&frames, &masks, cfg.tail.low_pass_threshold)?)
    } else {
        None
    };
    Ok(RunOutput {
        frames,
        masks,
        metrics,
        config_hash: cfg.hash(),
        cycles,
        bank: use_guidance.then_some(bank),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SubjectSpec;

    fn small() -> RunConfig {
        let mut cfg = RunConfig {
            queue_len: 8,
            window_len: 4,
            n_frames: 12,
            ..RunConfig::default()
        };
        cfg.scene.height = 16;
        cfg.scene.width = 16;
        cfg.scene.subjects = vec![SubjectSpec {
            subject_id: 3,
            radius: 4.0,
            velocity: [0.0, 1.0],
            position: [8.0, 8.0],
            amplitude: 1.5,
        }];
        cfg.sacfa.frame_span = 4;
        cfg.guidance.head_span = 4;
        cfg.guidance.tail_span = 4;
        cfg
    }

    #[test]
    fn emits_exactly_n_frames() {
        let cfg = small();
        let mut reports = Vec::new();
        let out = generate_with(&cfg, |r| reports.push(r.clone())).unwrap();
        assert_eq!(out.frames.len(), 12);
        assert_eq!(out.masks.len(), 12);
        assert_eq!(out.cycles, 12);
        assert_eq!(reports.len(), 12);
        let emitted: Vec<usize> = reports.iter().filter_map(|r| r.emitted).collect();
        assert_eq!(emitted, (5..=12).collect::<Vec<_>>());
        for r in &reports {
            assert_eq!(r.noise_levels, (1..=8).collect::<Vec<_>>());
            assert_eq!(r.frame_indices, (r.tau + 1..=r.tau + 8).collect::<Vec<_>>());
        }
        assert!(out.metrics.is_some());
    }

    #[test]
    fn warm_up_only_when_n_frames_fits_the_window() {
        let cfg = RunConfig { n_frames: 4, ..small() };
        let out = generate(&cfg).unwrap();
        assert_eq!((out.frames.len(), out.cycles), (4, 0));
        let two = generate(&RunConfig { n_frames: 2, ..small() }).unwrap();
        assert_eq!(two.frames, out.frames[..2].to_vec());
        assert!(two.metrics.is_none());
    }

    #[test]
    fn guidance_starts_after_the_bank_fills() {
        let mut reports = Vec::new();
        let out = generate_with(&small(), |r| reports.push(r.guided_frames)).unwrap();
        assert_eq!(reports[0], 0);
        assert!(reports[1..].iter().all(|&g| g == 4));
        assert!(out.bank.unwrap().initialized);
    }

    #[test]
    fn analytic_denoiser_runs_without_captures() {
        let cfg = RunConfig {
            denoiser: DenoiserKind::Analytic,
            ..small()
        };
        let out = generate(&cfg).unwrap();
        assert_eq!(out.frames.len(), 12);
        assert!(out.bank.is_none());
        assert_eq!(out.masks[0], render_frame(&cfg.scene, 0, cfg.toy.width).1);
    }

    #[test]
    fn invalid_config_is_rejected_before_work() {
        let cfg = RunConfig { window_len: 3, ..small() };
        assert!(generate(&cfg).unwrap_err().is_user_error());
    }
}
