//! Optimizers, losses, patch sampling, and the training procedures for the
//! development models and the forensic classifier.

mod adam;
mod joint;
mod nip;
mod sampler;

pub use adam::{lr_schedule, AdamState};
pub use joint::{eval_accuracy, train_joint, train_joint_with, JointOutcome, JointProgress};
pub use nip::{train_nip, train_nip_from, NipOutcome, NipTrainState};
pub use sampler::{
    probe_acceptance, sample_patches, sample_patches_with_stats, SampleStats, ATTEMPTS_PER_PATCH,
    VAR_KEEP, VAR_REJECT,
};

/// Why a training run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The rolling-average validation loss stopped moving.
    Converged,
    /// The configured epoch budget ran out.
    EpochCap,
    /// A non-finite loss appeared; parameters were rolled back to the last
    /// epoch-end snapshot.
    Diverged,
}


use crate::autodiff::{Graph, NodeId, Real};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which training procedure to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    NipOnly,
    /// Classifier only; development parameters frozen.
    F,
    /// Classifier and development model optimized jointly.
    FPlusN,
}

/// Shared knobs for all training procedures.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Sampled batches per epoch (an "epoch" is a fixed number of batches,
    /// not a dataset pass, because the dataset is a patch population).
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs between 15% learning-rate cuts.
    pub lr_decay_period: usize,
    /// Classifier input side length `s`; development patches are `2s` when
    /// the distribution channel is active.
    pub patch_size: usize,
    pub seed: u64,
    /// Epochs between validation passes.
    pub validation_cadence: usize,
    /// Number of held-out patches used for classifier validation accuracy.
    pub validation_patches: usize,
    /// Number of held-out patches used for fidelity (PSNR/SSIM) validation.
    pub fidelity_patches: usize,
    /// Stop when the 5-epoch average validation loss changes by less than
    /// this relative amount. Zero disables early stopping.
    pub early_stop_rel_change: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::NipOnly,
            epochs: 40,
            iterations_per_epoch: 50,
            batch_size: 20,
            learning_rate: 1e-4,
            lr_decay_period: 50,
            patch_size: 64,
            seed: 1,
            validation_cadence: 1,
            validation_patches: 300,
            fidelity_patches: 20,
            early_stop_rel_change: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.patch_size < 16 || self.patch_size % 16 != 0 {
            return Err(Error::Config(format!(
                "patch size must be a positive multiple of 16, got {}",
                self.patch_size
            )));
        }
        if self.epochs == 0 || self.iterations_per_epoch == 0 {
            return Err(Error::Config("epochs and iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of a training history (serialized to CSV by the CLI).
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub ce_loss: f64,
    pub l2_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub accuracy: f64,
}

/// Mean squared error between two same-shaped images after scaling to the
/// standard [0,255] range; differentiable.
pub fn l2_fidelity<E: Real>(g: &mut Graph<E>, output: NodeId, target: NodeId) -> Result<NodeId> {
    if g.shape(output) != g.shape(target) {
        return Err(Error::Shape(format!(
            "l2_fidelity: shapes differ, {:?} vs {:?}",
            g.shape(output),
            g.shape(target)
        )));
    }
    let diff = g.sub(output, target)?;
    let scaled = g.scale(diff, 255.0);
    let sq = g.mul(scaled, scaled)?;
    Ok(g.mean(sq))
}
