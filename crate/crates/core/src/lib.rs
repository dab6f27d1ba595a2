//! A self-contained, fully differentiable model of a photo acquisition and
//! distribution channel.
//!
//! The crate is organised around a small define-by-run autodiff engine
//! ([`autodiff`]): every model component — the raw development pipelines in
//! [`raw`], the post-processing operations and lossy distribution channel in
//! [`manip`] and [`djpeg`], and the forensic classifier in [`fan`] — is a pure
//! function that appends nodes to a [`autodiff::Graph`], so the whole channel
//! can be trained end to end with the optimizers in [`train`].
//!
//! Everything is deterministic: all randomness flows from explicit `u64`
//! seeds through a counter-based ChaCha generator, and repeated runs with the
//! same seed produce bit-identical artifacts.

pub mod autodiff;
pub mod djpeg;
pub mod error;
pub mod fan;
pub mod io;
pub mod manip;
pub mod metrics;
pub mod params;
pub mod raw;
pub mod train;

pub use error::{Error, Result};

/// Every gradient check in the crate: one per differentiable primitive plus
/// the composite paths (JPEG approximation, both development models, the
/// manipulation/channel chain, and the classifier with its cross-entropy
/// head). The finite-difference harness runs them all in 64-bit mode.
pub fn all_grad_checks() -> Vec<autodiff::OpCheck> {
    let mut checks = autodiff::registered_op_checks();
    checks.push(djpeg::grad_check());
    checks.extend(manip::grad_checks());
    checks.push(fan::grad_check());
    checks.push(raw::inet_grad_check());
    checks.push(raw::unet_grad_check());
    checks
}
