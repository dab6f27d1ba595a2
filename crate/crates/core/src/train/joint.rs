//! Joint optimization of the classifier and (optionally) the development
//! model across the full acquisition-and-distribution chain.
//!
//! Every iteration builds one batch of raw patches and, per sample:
//!
//! 1. develops the patch, branches it into all five manipulation classes,
//!    pushes each branch through the distribution channel (when one is
//!    configured), classifies, and averages the five cross-entropies;
//! 2. the first optimizer updates the classifier on that cross-entropy —
//!    and, in F+N mode, the development model too — after which the
//!    constrained filter is re-projected onto its zero-sum manifold;
//! 3. in F+N mode a second optimizer then updates the development model on
//!    the [0,255]-scaled L2 fidelity of the same batch. In F mode this step
//!    is skipped entirely and the development parameters stay bit-identical.
//!
//! The two steps run in exactly that order; swapping them changes the
//! trajectory (see the order-sensitivity test).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::fan::{fan_logits, project_constrained};
use crate::manip::{apply_manipulation, apply_manipulation_eval, distribution_channel,
    distribution_channel_eval, ChannelConfig, ManipulationClass};
use crate::metrics::ConfusionMatrix;
use crate::params::ParamSet;
use crate::raw::{derive_seed, Nip, RawSample};
use crate::train::nip::{eval_fidelity, nip_batch};
use crate::train::{
    lr_schedule, sample_patches, AdamState, HistoryRow, StopReason, TrainConfig, TrainMode,
};
use crate::{Error, Result};

/// Result of a joint run: both parameter sets, the validation history, the
/// last validation confusion matrix, and why training stopped.
#[derive(Debug, Clone)]
pub struct JointOutcome<E: Real> {
    pub nip: Nip<E>,
    pub fan: ParamSet<E>,
    pub history: Vec<HistoryRow>,
    pub confusion: ConfusionMatrix,
    pub stopped: StopReason,
}

/// Snapshot handed to the validation callback (checkpointing hook).
pub struct JointProgress<'a, E: Real> {
    pub epoch: usize,
    pub row: &'a HistoryRow,
    pub nip: &'a Nip<E>,
    pub fan: &'a ParamSet<E>,
    pub confusion: &'a ConfusionMatrix,
}

pub(crate) struct CeBatch<E: Real> {
    pub loss: f64,
    pub fan_grads: Vec<Option<Tensor<E>>>,
    /// Present only when the development model participates in this step.
    pub nip_grads: Option<Vec<Option<Tensor<E>>>>,
}

fn accumulate<E: Real>(acc: &mut [Option<Tensor<E>>], ids: &[NodeId], gm: &mut crate::autodiff::GradMap<E>) {
    for (i, id) in ids.iter().enumerate() {
        if let Some(t) = gm.take(*id) {
            match &mut acc[i] {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                        *x += *y;
                    }
                }
                None => acc[i] = Some(t),
            }
        }
    }
}

fn divide<E: Real>(acc: &mut [Option<Tensor<E>>], n: f64) {
    let inv = E::from_f64(1.0 / n);
    for t in acc.iter_mut().flatten() {
        for v in t.data_mut() {
            *v *= inv;
        }
    }
}

/// Cross-entropy pass over one batch: each sample is developed once and
/// branched into all five manipulation classes with labels 0..4.
pub(crate) fn ce_batch<E: Real>(
    nip: &Nip<E>,
    fan: &ParamSet<E>,
    batch: &[RawSample<E>],
    channel: Option<&ChannelConfig>,
    through_nip: bool,
) -> Result<CeBatch<E>> {
    let mut fan_grads: Vec<Option<Tensor<E>>> = vec![None; fan.len()];
    let mut nip_grads: Vec<Option<Tensor<E>>> = vec![None; nip.params.len()];
    let mut loss_sum = 0.0;
    for sample in batch {
        let mut g = Graph::new();
        // A frozen development model binds as constants, which prunes its
        // entire subgraph out of the backward pass.
        let nip_bound = nip.params.bind_with(&mut g, through_nip);
        let fan_bound = fan.bind(&mut g);
        let input = g.constant(sample.stack.data().clone());
        let dev = nip.develop(&mut g, &nip_bound, input, sample.stack.cfa())?;
        let dev = g.clamp01(dev);
        let mut total: Option<NodeId> = None;
        for class in ManipulationClass::all() {
            let branch = apply_manipulation(&mut g, class, dev)?;
            let distributed = match channel {
                Some(cfg) => distribution_channel(&mut g, branch, cfg)?,
                None => branch,
            };
            let logits = fan_logits(&mut g, &fan_bound, distributed)?;
            let ce = g.softmax_xent(logits, &[class.index()])?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
        }
        let loss = g.scale(total.expect("five branches"), 1.0 / ManipulationClass::COUNT as f64);
        loss_sum += g.value(loss).data()[0].as_f64();
        let mut gm = g.backward(loss)?;
        accumulate(&mut fan_grads, fan_bound.ids(), &mut gm);
        if through_nip {
            accumulate(&mut nip_grads, nip_bound.ids(), &mut gm);
        }
    }
    let n = batch.len().max(1) as f64;
    divide(&mut fan_grads, n);
    divide(&mut nip_grads, n);
    Ok(CeBatch {
        loss: loss_sum / n,
        fan_grads,
        nip_grads: through_nip.then_some(nip_grads),
    })
}

/// Classifier validation: every held-out patch is developed, branched into
/// all five classes, distributed, and classified; returns overall accuracy
/// and the confusion matrix in class order.
pub fn eval_accuracy<E: Real>(
    nip: &Nip<E>,
    fan: &ParamSet<E>,
    patches: &[RawSample<E>],
    channel: Option<&ChannelConfig>,
) -> Result<(f64, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new();
    for p in patches {
        let dev = nip.develop_eval(&p.stack)?;
        let dev = dev.map(|v| v.max(E::zero()).min(E::one()));
        for class in ManipulationClass::all() {
            let branch = apply_manipulation_eval(class, &dev)?;
            let distributed = match channel {
                Some(cfg) => distribution_channel_eval(&branch, cfg)?,
                None => branch,
            };
            let mut g = Graph::new();
            let bound = fan.bind_with(&mut g, false);
            let input = g.constant(distributed);
            let logits = fan_logits(&mut g, &bound, input)?;
            let row = g.value(logits).data();
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            cm.record(class.index(), pred)?;
        }
    }
    Ok((cm.accuracy(), cm))
}

/// Joint training with a per-validation callback (used for checkpointing).
pub fn train_joint_with<E: Real>(
    config: &TrainConfig,
    dataset: &[RawSample<E>],
    mut nip: Nip<E>,
    mut fan: ParamSet<E>,
    channel: Option<&ChannelConfig>,
    on_validation: &mut dyn FnMut(JointProgress<'_, E>) -> Result<()>,
) -> Result<JointOutcome<E>> {
    config.validate()?;
    let joint_nip = match config.mode {
        TrainMode::F => false,
        TrainMode::FPlusN => true,
        TrainMode::NipOnly => {
            return Err(Error::Config("train_joint needs mode f or f+n".into()))
        }
    };
    if let Some(cfg) = channel {
        cfg.validate()?;
    }
    // The classifier sees `patch_size` pixels; the development patch is
    // larger by the channel's downsampling factor.
    let dev_patch = config.patch_size * channel.map_or(1, |c| c.downsample_factor.max(1));

    let mut val_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xa11d));
    let val_acc = sample_patches(dataset, config.validation_patches.max(1), dev_patch, &mut val_rng)?;
    let val_fid = sample_patches(dataset, config.fidelity_patches.max(1), dev_patch, &mut val_rng)?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x7ea1));

    // "Two separate Adam optimizers": the first drives the cross-entropy
    // step (classifier, plus development model in F+N), the second drives
    // the fidelity step. Moments are tracked per parameter set.
    let mut opt_ce_fan = AdamState::new(&fan, config.learning_rate);
    let mut opt_ce_nip = AdamState::new(&nip.params, config.learning_rate);
    let mut opt_fid_nip = AdamState::new(&nip.params, config.learning_rate);

    let mut history = Vec::new();
    let mut confusion = ConfusionMatrix::new();
    let mut stopped = StopReason::EpochCap;
    let mut snap_nip = nip.params.clone();
    let mut snap_fan = fan.clone();

    'epochs: for epoch in 0..config.epochs {
        let lr = lr_schedule(config.learning_rate, epoch, config.lr_decay_period);
        opt_ce_fan.set_lr(lr);
        opt_ce_nip.set_lr(lr);
        opt_fid_nip.set_lr(lr);

        let mut ce_sum = 0.0;
        let mut fid_sum = 0.0;
        for _ in 0..config.iterations_per_epoch {
            let batch = sample_patches(dataset, config.batch_size, dev_patch, &mut train_rng)?;

            // Step 1: cross-entropy.
            let ce = ce_batch(&nip, &fan, &batch, channel, joint_nip)?;
            if !ce.loss.is_finite() {
                nip.params = snap_nip;
                fan = snap_fan;
                stopped = StopReason::Diverged;
                break 'epochs;
            }
            ce_sum += ce.loss;
            opt_ce_fan.step(&mut fan, &ce.fan_grads)?;
            project_constrained(&mut fan)?;
            if let Some(ng) = &ce.nip_grads {
                opt_ce_nip.step(&mut nip.params, ng)?;
            }

            // Step 2: fidelity, on the same batch (skipped in F mode).
            if joint_nip {
                let (fid_loss, fid_grads) = nip_batch(&nip, &batch)?;
                if !fid_loss.is_finite() {
                    nip.params = snap_nip;
                    fan = snap_fan;
                    stopped = StopReason::Diverged;
                    break 'epochs;
                }
                fid_sum += fid_loss;
                opt_fid_nip.step(&mut nip.params, &fid_grads)?;
            }
        }
        snap_nip = nip.params.clone();
        snap_fan = fan.clone();
        let iters = config.iterations_per_epoch as f64;

        let is_val_epoch =
            (epoch + 1) % config.validation_cadence.max(1) == 0 || epoch + 1 == config.epochs;
        if is_val_epoch {
            let (accuracy, cm) = eval_accuracy(&nip, &fan, &val_acc, channel)?;
            let (l2, psnr_v, ssim_v) = eval_fidelity(&nip, &val_fid)?;
            confusion = cm;
            let row = HistoryRow {
                epoch,
                lr,
                ce_loss: ce_sum / iters,
                l2_loss: if joint_nip { fid_sum / iters } else { l2 },
                psnr: psnr_v,
                ssim: ssim_v,
                accuracy,
            };
            on_validation(JointProgress {
                epoch,
                row: &row,
                nip: &nip,
                fan: &fan,
                confusion: &confusion,
            })?;
            history.push(row);
        }
    }
    Ok(JointOutcome { nip, fan, history, confusion, stopped })
}

/// Joint training without a checkpoint callback.
pub fn train_joint<E: Real>(
    config: &TrainConfig,
    dataset: &[RawSample<E>],
    nip: Nip<E>,
    fan: ParamSet<E>,
    channel: Option<&ChannelConfig>,
) -> Result<JointOutcome<E>> {
    train_joint_with(config, dataset, nip, fan, channel, &mut |_| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fan::fan_init;
    use crate::raw::{procedural_sources, synth_dataset, NipModel, SensorProfile};

    fn tiny_dataset() -> Vec<RawSample<f64>> {
        let sources = procedural_sources::<f64>(5, 3, 64, 1.0).unwrap();
        synth_dataset(&sources, &SensorProfile::default(), 11, 6, 48).unwrap()
    }

    fn tiny_config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 1,
            iterations_per_epoch: 1,
            batch_size: 1,
            learning_rate: 1e-3,
            lr_decay_period: 50,
            patch_size: 16,
            seed: 5,
            validation_cadence: 1,
            validation_patches: 2,
            fidelity_patches: 1,
            early_stop_rel_change: 0.0,
        }
    }

    #[test]
    fn mode_f_keeps_the_development_model_bit_identical() {
        let data = tiny_dataset();
        let nip = Nip::<f64>::init(NipModel::INet, 7).unwrap();
        let fan = fan_init::<f64>(1.0 / 32.0, 9).unwrap();
        let nip_before = nip.params.content_hash();
        let fan_before = fan.content_hash();
        let out = train_joint(&tiny_config(TrainMode::F), &data, nip, fan, None).unwrap();
        assert_eq!(out.nip.params.content_hash(), nip_before);
        assert_ne!(out.fan.content_hash(), fan_before);
        assert_eq!(out.stopped, StopReason::EpochCap);
        assert_eq!(out.history.len(), 1);
        // 2 validation patches x 5 branches.
        assert_eq!(out.confusion.total(), 10);
    }

    #[test]
    fn mode_fn_updates_both_parameter_sets() {
        let data = tiny_dataset();
        let nip = Nip::<f64>::init(NipModel::INet, 7).unwrap();
        let fan = fan_init::<f64>(1.0 / 32.0, 9).unwrap();
        let nip_before = nip.params.content_hash();
        let out = train_joint(&tiny_config(TrainMode::FPlusN), &data, nip, fan, None).unwrap();
        assert_ne!(out.nip.params.content_hash(), nip_before);
        assert!(out.history[0].l2_loss.is_finite());
    }

    #[test]
    fn untrained_classifier_cross_entropy_is_near_uniform() {
        // Five balanced branches with labels 0..4 against a near-uniform
        // classifier put the cross-entropy at ln 5.
        let data = tiny_dataset();
        let nip = Nip::<f64>::init(NipModel::INet, 7).unwrap();
        let fan = fan_init::<f64>(1.0 / 32.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_patches(&data, 2, 16, &mut rng).unwrap();
        let ce = ce_batch(&nip, &fan, &batch, None, false).unwrap();
        assert!((ce.loss - 5.0f64.ln()).abs() < 0.2, "ce {}", ce.loss);
        assert!(ce.nip_grads.is_none());
    }

    #[test]
    fn channel_runs_scale_the_development_patch() {
        let data = tiny_dataset();
        let nip = Nip::<f64>::init(NipModel::INet, 7).unwrap();
        let fan = fan_init::<f64>(1.0 / 32.0, 9).unwrap();
        let cfg = tiny_config(TrainMode::F);
        let channel = ChannelConfig::default();
        let out = train_joint(&cfg, &data, nip, fan, Some(&channel)).unwrap();
        assert_eq!(out.stopped, StopReason::EpochCap);
        assert!(out.history[0].ce_loss.is_finite());
    }

    #[test]
    fn nip_only_mode_is_rejected() {
        let data = tiny_dataset();
        let nip = Nip::<f64>::init(NipModel::INet, 7).unwrap();
        let fan = fan_init::<f64>(1.0 / 32.0, 9).unwrap();
        let res = train_joint(&tiny_config(TrainMode::NipOnly), &data, nip, fan, None);
        assert!(matches!(res, Err(Error::Config(_))));
    }

    #[test]
    fn swapping_the_optimizer_order_changes_the_trajectory() {
        // One iteration by hand in both orders; the resulting development
        // parameters must differ, which is why the documented order matters.
        let data = tiny_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_patches(&data, 1, 16, &mut rng).unwrap();

        let run = |ce_first: bool| {
            let mut nip = Nip::<f64>::init(NipModel::INet, 7).unwrap();
            let mut fan = fan_init::<f64>(1.0 / 32.0, 9).unwrap();
            let mut opt_ce_fan = AdamState::new(&fan, 1e-3);
            let mut opt_ce_nip = AdamState::new(&nip.params, 1e-3);
            let mut opt_fid = AdamState::new(&nip.params, 1e-3);
            let ce_step = |nip: &mut Nip<f64>, fan: &mut ParamSet<f64>,
                           opt_f: &mut AdamState<f64>, opt_n: &mut AdamState<f64>| {
                let ce = ce_batch(nip, fan, &batch, None, true).unwrap();
                opt_f.step(fan, &ce.fan_grads).unwrap();
                project_constrained(fan).unwrap();
                opt_n.step(&mut nip.params, ce.nip_grads.as_ref().unwrap()).unwrap();
            };
            let fid_step = |nip: &mut Nip<f64>, opt: &mut AdamState<f64>| {
                let (_, grads) = nip_batch(nip, &batch).unwrap();
                opt.step(&mut nip.params, &grads).unwrap();
            };
            if ce_first {
                ce_step(&mut nip, &mut fan, &mut opt_ce_fan, &mut opt_ce_nip);
                fid_step(&mut nip, &mut opt_fid);
            } else {
                fid_step(&mut nip, &mut opt_fid);
                ce_step(&mut nip, &mut fan, &mut opt_ce_fan, &mut opt_ce_nip);
            }
            (nip.params.content_hash(), fan.content_hash())
        };
        let (nip_a, fan_a) = run(true);
        let (nip_b, fan_b) = run(false);
        assert_ne!((nip_a, fan_a), (nip_b, fan_b));
    }
}
