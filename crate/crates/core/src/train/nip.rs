//! Stage-1 training: fit a development model to reference-developed targets.
//!
//! The model is optimized with Adam on the mean squared error of
//! [0,255]-scaled outputs. Validation patches are fixed up front; training
//! stops at the epoch cap, when the rolling 5-point average validation loss
//! stops moving (relative change below the configured threshold), or when a
//! non-finite loss appears — in which case the parameters are rolled back to
//! the last epoch-end snapshot and the run is reported as diverged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor};
use crate::metrics::{psnr, ssim};
use crate::raw::{derive_seed, Nip, RawSample};
use crate::train::{l2_fidelity, sample_patches, HistoryRow, StopReason, TrainConfig, TrainMode};
use crate::{Error, Result};

/// Result of a stage-1 run: the (possibly rolled-back) model, the validation
/// history, and why training stopped.
#[derive(Debug, Clone)]
pub struct NipOutcome<E: Real> {
    pub nip: Nip<E>,
    pub history: Vec<HistoryRow>,
    pub stopped: StopReason,
}

/// Everything a stage-1 run carries between epochs. Persisting this (plus the
/// config) and calling [`train_nip_from`] again continues the run exactly
/// where it stopped — the continuation is bit-identical to an uninterrupted
/// run because the optimizer moments, the sampling stream, and the plateau
/// window all travel with it.
#[derive(Debug, Clone)]
pub struct NipTrainState<E: Real> {
    pub nip: Nip<E>,
    pub adam: crate::train::AdamState<E>,
    pub rng: ChaCha8Rng,
    /// First epoch the next call will run.
    pub next_epoch: usize,
    /// Validation losses observed so far (plateau-rule window).
    pub val_losses: Vec<f64>,
}

impl<E: Real> NipTrainState<E> {
    /// State for a fresh run starting at epoch 0.
    pub fn fresh(config: &TrainConfig, nip: Nip<E>) -> Self {
        let adam = crate::train::AdamState::new(&nip.params, config.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7ea1));
        Self { nip, adam, rng, next_epoch: 0, val_losses: Vec::new() }
    }
}

/// Mean loss and summed parameter gradients over one batch. Each sample gets
/// its own graph; gradient tensors are accumulated in canonical parameter
/// order and later divided by the batch size.
pub(crate) fn nip_batch<E: Real>(
    nip: &Nip<E>,
    batch: &[RawSample<E>],
) -> Result<(f64, Vec<Option<Tensor<E>>>)> {
    let mut grads: Vec<Option<Tensor<E>>> = vec![None; nip.params.len()];
    let mut loss_sum = 0.0;
    for sample in batch {
        let mut g = Graph::new();
        let bound = nip.params.bind(&mut g);
        let input = g.constant(sample.stack.data().clone());
        let out = nip.develop(&mut g, &bound, input, sample.stack.cfa())?;
        let target = g.constant(sample.target.clone());
        let loss = l2_fidelity(&mut g, out, target)?;
        loss_sum += g.value(loss).data()[0].as_f64();
        let mut gm = g.backward(loss)?;
        for (i, id) in bound.ids().iter().enumerate() {
            if let Some(t) = gm.take(*id) {
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                    None => grads[i] = Some(t),
                }
            }
        }
    }
    let n = batch.len().max(1) as f64;
    for gi in grads.iter_mut().flatten() {
        let inv = E::from_f64(1.0 / n);
        for v in gi.data_mut() {
            *v *= inv;
        }
    }
    Ok((loss_sum / n, grads))
}

/// Validation fidelity: mean L2 (on ×255 scale), PSNR, and SSIM over the
/// held-out patches. Metrics use outputs clamped to the displayable range;
/// the loss itself is computed on the raw model output, matching training.
pub(crate) fn eval_fidelity<E: Real>(
    nip: &Nip<E>,
    patches: &[RawSample<E>],
) -> Result<(f64, f64, f64)> {
    let mut l2 = 0.0;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for p in patches {
        let out = nip.develop_eval(&p.stack)?;
        let t = &p.target;
        let mut mse = 0.0;
        for (a, b) in out.data().iter().zip(t.data()) {
            let d = (a.as_f64() - b.as_f64()) * 255.0;
            mse += d * d;
        }
        l2 += mse / out.len() as f64;
        let clamped = out.map(|v| v.max(E::zero()).min(E::one()));
        psnr_sum += psnr(&clamped, t)?;
        ssim_sum += ssim(&clamped, t)?;
    }
    let n = patches.len().max(1) as f64;
    Ok((l2 / n, psnr_sum / n, ssim_sum / n))
}

/// Relative change between the rolling 5-point averages ending at the last
/// and second-to-last observations; `None` until 6 points exist.
pub(crate) fn rolling_plateau(losses: &[f64]) -> Option<f64> {
    const W: usize = 5;
    let n = losses.len();
    if n < W + 1 {
        return None;
    }
    let cur: f64 = losses[n - W..].iter().sum::<f64>() / W as f64;
    let prev: f64 = losses[n - W - 1..n - 1].iter().sum::<f64>() / W as f64;
    Some((cur - prev).abs() / prev.abs().max(1e-12))
}

/// Continue a stage-1 run from carried state, mutating it in place. Returns
/// the history rows produced by this call and why the run stopped. The
/// validation set is re-derived from the config seed, so a resumed run
/// validates against the same fixed patches.
pub fn train_nip_from<E: Real>(
    config: &TrainConfig,
    dataset: &[RawSample<E>],
    state: &mut NipTrainState<E>,
) -> Result<(Vec<HistoryRow>, StopReason)> {
    config.validate()?;
    if config.mode != TrainMode::NipOnly {
        return Err(Error::Config(format!(
            "train_nip runs in nip-only mode, config says {:?}",
            config.mode
        )));
    }
    let mut val_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xa11d));
    let val =
        sample_patches(dataset, config.fidelity_patches.max(1), config.patch_size, &mut val_rng)?;

    let mut history = Vec::new();
    let mut snapshot = state.nip.params.clone();
    let mut stopped = StopReason::EpochCap;

    'epochs: for epoch in state.next_epoch..config.epochs {
        let lr = crate::train::lr_schedule(config.learning_rate, epoch, config.lr_decay_period);
        state.adam.set_lr(lr);
        for _ in 0..config.iterations_per_epoch {
            let batch =
                sample_patches(dataset, config.batch_size, config.patch_size, &mut state.rng)?;
            let (loss, grads) = nip_batch(&state.nip, &batch)?;
            if !loss.is_finite() {
                state.nip.params = snapshot;
                stopped = StopReason::Diverged;
                break 'epochs;
            }
            state.adam.step(&mut state.nip.params, &grads)?;
        }
        snapshot = state.nip.params.clone();
        state.next_epoch = epoch + 1;

        let is_val_epoch =
            (epoch + 1) % config.validation_cadence.max(1) == 0 || epoch + 1 == config.epochs;
        if is_val_epoch {
            let (l2, psnr_v, ssim_v) = eval_fidelity(&state.nip, &val)?;
            if !l2.is_finite() {
                stopped = StopReason::Diverged;
                break 'epochs;
            }
            state.val_losses.push(l2);
            history.push(HistoryRow {
                epoch,
                lr,
                ce_loss: f64::NAN,
                l2_loss: l2,
                psnr: psnr_v,
                ssim: ssim_v,
                accuracy: f64::NAN,
            });
            if config.early_stop_rel_change > 0.0 {
                if let Some(rel) = rolling_plateau(&state.val_losses) {
                    if rel < config.early_stop_rel_change {
                        stopped = StopReason::Converged;
                        break 'epochs;
                    }
                }
            }
        }
    }
    Ok((history, stopped))
}

/// Train a development model against its reference targets.
pub fn train_nip<E: Real>(
    config: &TrainConfig,
    dataset: &[RawSample<E>],
    nip: Nip<E>,
) -> Result<NipOutcome<E>> {
    let mut state = NipTrainState::fresh(config, nip);
    let (history, stopped) = train_nip_from(config, dataset, &mut state)?;
    Ok(NipOutcome { nip: state.nip, history, stopped })
}
