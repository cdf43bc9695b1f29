//! The diagonal denoising queue.
//!
//! Slot `k` (0-based) always sits at noise level `k + 1` and holds global frame
//! `tau + k + 1`, where `tau` counts frames already dequeued. One global step
//! denoises every slot by one level ([`advance`] takes the results), dequeues
//! the now-clean head and leaves an open queue of `T − 1` slots waiting for a
//! new level-`T` tail ([`enqueue_tail`]).

use rand::Rng;

use crate::rng::gaussian_grid;
use crate::schedule::{forward_diffuse, FrameLatent, NoiseSchedule};
use crate::{Error, Grid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalQueue {
    slots: Vec<FrameLatent>,
    tau: usize,
    window_len: usize,
    len: usize,
}

/// A contiguous run of `f` slots denoised together.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub latents: Vec<FrameLatent>,
    pub timesteps: Vec<usize>,
    pub window_index: usize,
}

impl DiagonalQueue {
    pub fn slots(&self) -> &[FrameLatent] {
        &self.slots
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Full queue length `T`.
    pub fn capacity(&self) -> usize {
        self.len
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.len
    }

    pub fn noise_levels(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.noise_level).collect()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.frame_index).collect()
    }

    /// Checks the level ladder and index run for a full or open queue.
    pub fn check_invariants(&self) -> Result<()> {
        let expected = if self.is_full() { self.len } else { self.len - 1 };
        if self.slots.len() != expected {
            return Err(Error::QueueInvariant(format!(
                "{} slots, expected {expected}",
                self.slots.len()
            )));
        }
        for (k, slot) in self.slots.iter().enumerate() {
            if slot.noise_level != k + 1 {
                return Err(Error::QueueInvariant(format!(
                    "slot {k} at level {}, expected {}",
                    slot.noise_level,
                    k + 1
                )));
            }
            if slot.frame_index != self.tau + k + 1 {
                return Err(Error::QueueInvariant(format!(
                    "slot {k} holds frame {}, expected {}",
                    slot.frame_index,
                    self.tau + k + 1
                )));
            }
        }
        Ok(())
    }

    /// Replaces slot data in place, keeping level and index.
    pub fn set_data(&mut self, k: usize, data: Grid) {
        self.slots[k].data = data;
    }

    /// Approximate number of floats held, for memory-bound checks.
    pub fn footprint(&self) -> usize {
        self.slots.iter().map(|s| s.data.len()).sum()
    }
}

pub fn init_queue<R: Rng>(
    warmup: &[Grid],
    queue_len: usize,
    window_len: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiagonalQueue> {
    if window_len == 0 || warmup.len() != window_len {
        return Err(Error::config(
            "f",
            format!("warm-up has {} frames, window length is {window_len}", warmup.len()),
        ));
    }
    if queue_len % window_len != 0 {
        return Err(Error::config(
            "T",
            format!("queue length {queue_len} is not a multiple of f = {window_len}"),
        ));
    }
    if queue_len > sched.num_steps {
        return Err(Error::config(
            "T",
            format!("queue length {queue_len} exceeds schedule length {}", sched.num_steps),
        ));
    }
    let slots = (0..queue_len)
        .map(|k| {
            let src = &warmup[k.min(window_len - 1)];
            let eps = gaussian_grid(rng, src.dim());
            Ok(FrameLatent::new(forward_diffuse(src, k + 1, &eps, sched)?, k + 1, k + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiagonalQueue {
        slots,
        tau: 0,
        window_len,
        len: queue_len,
    })
}

pub fn partition_windows(q: &DiagonalQueue) -> Vec<Window> {
    q.slots
        .chunks(q.window_len)
        .enumerate()
        .map(|(w, chunk)| Window {
            latents: chunk.to_vec(),
            timesteps: chunk.iter().map(|s| s.noise_level).collect(),
            window_index: w,
        })
        .collect()
}

/// Consumes one denoised grid per slot and dequeues the clean head.
pub fn advance(mut q: DiagonalQueue, denoised: Vec<Grid>) -> Result<(FrameLatent, DiagonalQueue)> {
    if !q.is_full() {
        return Err(Error::QueueInvariant("advance on an open queue".into()));
    }
    if denoised.len() != q.len {
        return Err(Error::Dimension(format!(
            "{} denoised grids for a queue of {}",
            denoised.len(),
            q.len
        )));
    }
    for (slot, data) in q.slots.iter_mut().zip(denoised) {
        if data.dim() != slot.data.dim() {
            return Err(Error::Dimension(format!(
                "denoised frame {} has shape {:?}, expected {:?}",
                slot.frame_index,
                data.dim(),
                slot.data.dim()
            )));
        }
        slot.data = data;
        slot.noise_level -= 1;
    }
    let head = q.slots.remove(0);
    q.tau += 1;
    debug_assert_eq!(head.noise_level, 0);
    debug_assert!(q.check_invariants().is_ok());
    Ok((head, q))
}

pub fn enqueue_tail(mut q: DiagonalQueue, tail: FrameLatent) -> Result<DiagonalQueue> {
    if q.is_full() {
        return Err(Error::QueueInvariant("enqueue on a full queue".into()));
    }
    if tail.noise_level != q.len {
        return Err(Error::QueueInvariant(format!(
            "tail at level {}, expected {}",
            tail.noise_level, q.len
        )));
    }
    let expected = q.tau + q.len;
    if tail.frame_index != expected {
        return Err(Error::QueueInvariant(format!(
            "tail holds frame {}, expected {expected}",
            tail.frame_index
        )));
    }
    q.slots.push(tail);
    debug_assert!(q.check_invariants().is_ok());
    Ok(q)
}
