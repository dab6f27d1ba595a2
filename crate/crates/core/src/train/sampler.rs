//! Texture-gated patch sampling.
//!
//! Training pairs are cut as aligned windows from larger raw samples. Flat
//! windows (sky, walls) teach a development model nothing about detail
//! reconstruction and starve the classifier of the high-frequency content it
//! keys on, so candidates are filtered by the variance of the target's
//! luminance (in [0,1]):
//!
//! * variance below 0.01 — rejected;
//! * variance in [0.01, 0.02) — kept with probability 0.5;
//! * variance 0.02 or above — always kept.
//!
//! Sampling retries until enough windows are accepted, with a bound of
//! 1000 attempts per requested patch so an all-flat population fails with a
//! sampling error instead of spinning forever.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tensor};
use crate::metrics::LUMA;
use crate::raw::RawSample;
use crate::{Error, Result};

/// Lower variance gate: below this, a candidate window is always rejected.
pub const VAR_REJECT: f64 = 0.01;
/// Upper variance gate: at or above this, a candidate is always kept.
/// In between, a fair coin decides.
pub const VAR_KEEP: f64 = 0.02;
/// Retry budget per requested patch.
pub const ATTEMPTS_PER_PATCH: usize = 1000;

/// Counters describing one sampling run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleStats {
    /// Candidate windows examined.
    pub attempts: usize,
    /// Candidates that passed the variance gate.
    pub accepted: usize,
}

impl SampleStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

/// Population variance of the target window's luminance in [0,1].
fn window_luma_variance<E: Real>(target: &Tensor<E>, y0: usize, x0: usize, patch: usize) -> f64 {
    let w = target.shape()[1];
    let d = target.data();
    let n = (patch * patch) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for y in y0..y0 + patch {
        for x in x0..x0 + patch {
            let p = (y * w + x) * 3;
            let l = LUMA[0] * d[p].as_f64()
                + LUMA[1] * d[p + 1].as_f64()
                + LUMA[2] * d[p + 2].as_f64();
            sum += l;
            sum_sq += l * l;
        }
    }
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

fn check_inputs<E: Real>(dataset: &[RawSample<E>], patch: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Input("patch sampling needs a non-empty dataset".into()));
    }
    if patch < 2 || patch % 2 != 0 {
        return Err(Error::Input(format!("patch size must be even and >= 2, got {patch}")));
    }
    for (i, s) in dataset.iter().enumerate() {
        let t = s.target.shape();
        if t[0] < patch || t[1] < patch {
            return Err(Error::Input(format!(
                "dataset sample {i} is {}x{}, smaller than the {patch}-pixel patch",
                t[0], t[1]
            )));
        }
    }
    Ok(())
}

/// Draw one candidate window. Returns its coordinates if the variance gate
/// passes, `None` if it was rejected. The gate's coin is only consumed for
/// candidates in the borderline band, so the draw sequence is a deterministic
/// function of the dataset and the generator state.
fn attempt<E: Real>(
    dataset: &[RawSample<E>],
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize, usize)> {
    let idx = rng.gen_range(0..dataset.len());
    let t = dataset[idx].target.shape();
    // Offsets are even so the window stays aligned to the 2x2 mosaic cells
    // of the packed stack.
    let y0 = rng.gen_range(0..=(t[0] - patch) / 2) * 2;
    let x0 = rng.gen_range(0..=(t[1] - patch) / 2) * 2;
    let var = window_luma_variance(&dataset[idx].target, y0, x0, patch);
    let keep = if var < VAR_REJECT {
        false
    } else if var < VAR_KEEP {
        rng.gen::<f64>() < 0.5
    } else {
        true
    };
    keep.then_some((idx, y0, x0))
}

fn cut<E: Real>(sample: &RawSample<E>, y0: usize, x0: usize, patch: usize) -> Result<RawSample<E>> {
    let tw = sample.target.shape()[1];
    let td = sample.target.data();
    let target = Tensor::from_fn(&[patch, patch, 3], |j| {
        let c = j % 3;
        let x = (j / 3) % patch + x0;
        let y = (j / 3) / patch + y0;
        td[(y * tw + x) * 3 + c]
    })?;
    let half = patch / 2;
    let stack = sample.stack.crop(y0 / 2, x0 / 2, half, half)?;
    Ok(RawSample { stack, target })
}

/// Sample `count` texture-gated training patches, returning the accepted
/// pairs together with attempt counters.
pub fn sample_patches_with_stats<E: Real>(
    dataset: &[RawSample<E>],
    count: usize,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<RawSample<E>>, SampleStats)> {
    check_inputs(dataset, patch)?;
    let budget = count.saturating_mul(ATTEMPTS_PER_PATCH).max(ATTEMPTS_PER_PATCH);
    let mut out = Vec::with_capacity(count);
    let mut stats = SampleStats { attempts: 0, accepted: 0 };
    while out.len() < count {
        if stats.attempts >= budget {
            return Err(Error::Sampling(format!(
                "accepted only {} of {count} patches after {} attempts; \
                 the dataset appears too flat (luminance variance < {VAR_REJECT})",
                out.len(),
                stats.attempts
            )));
        }
        stats.attempts += 1;
        if let Some((idx, y0, x0)) = attempt(dataset, patch, rng) {
            stats.accepted += 1;
            out.push(cut(&dataset[idx], y0, x0, patch)?);
        }
    }
    Ok((out, stats))
}

/// Sample `count` texture-gated training patches.
pub fn sample_patches<E: Real>(
    dataset: &[RawSample<E>],
    count: usize,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<RawSample<E>>> {
    sample_patches_with_stats(dataset, count, patch, rng).map(|(v, _)| v)
}

/// Run the variance gate for exactly `attempts` candidate draws without
/// materializing any patches, and report the fraction accepted. Useful for
/// checking whether a dataset is texture-rich enough to sample from.
pub fn probe_acceptance<E: Real>(
    dataset: &[RawSample<E>],
    patch: usize,
    attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    check_inputs(dataset, patch)?;
    let mut accepted = 0usize;
    for _ in 0..attempts {
        if attempt(dataset, patch, rng).is_some() {
            accepted += 1;
        }
    }
    Ok(accepted as f64 / attempts.max(1) as f64)
}
