//! Persistence for interrupted stage-1 training runs.
//!
//! The carried state (parameters, optimizer moments, sampling stream
//! position, plateau window) round-trips through a "nip-train-state"
//! container so a resumed run reproduces the uninterrupted trajectory
//! bit-for-bit. State containers store 32-bit tensors like every other
//! container, so exact continuation holds for f32 training runs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamSet;
use crate::raw::{Nip, NipModel};
use crate::train::{AdamState, NipTrainState, TrainConfig};
use crate::{Error, Result};

use super::container::{load_checkpoint, save_checkpoint, Checkpoint};

pub const TRAIN_STATE_KIND: &str = "nip-train-state";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Integrity("odd-length hex string in state meta".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16)
                .map_err(|_| Error::Integrity("invalid hex in state meta".into()))
        })
        .collect()
}

fn meta_str<'a>(meta: &'a serde_json::Value, key: &str) -> Result<&'a str> {
    meta[key]
        .as_str()
        .ok_or_else(|| Error::Integrity(format!("state meta lacks string field '{key}'")))
}

/// Save an interruptible stage-1 run.
pub fn save_train_state(
    path: &Path,
    config: &TrainConfig,
    model: NipModel,
    state: &NipTrainState<f32>,
) -> Result<()> {
    let mut tensors = ParamSet::new();
    for (name, t) in state.nip.params.iter() {
        tensors.insert(&format!("p.{name}"), t.clone())?;
    }
    let (m, v) = state.adam.moments();
    for (i, (name, _)) in state.nip.params.iter().enumerate() {
        tensors.insert(&format!("m.{name}"), m[i].clone())?;
        tensors.insert(&format!("v.{name}"), v[i].clone())?;
    }
    let meta = serde_json::json!({
        "model": model,
        "config": config,
        "adam_step": state.adam.step_count(),
        "adam_lr": state.adam.lr(),
        "next_epoch": state.next_epoch,
        "val_losses": state.val_losses,
        "rng_seed": hex(&state.rng.get_seed()),
        "rng_stream": state.rng.get_stream().to_string(),
        "rng_word_pos": state.rng.get_word_pos().to_string(),
    });
    save_checkpoint(path, &Checkpoint::new(TRAIN_STATE_KIND, meta, tensors))
}

/// Load a run saved by [`save_train_state`].
pub fn load_train_state(path: &Path) -> Result<(TrainConfig, NipModel, NipTrainState<f32>)> {
    let ck = load_checkpoint(path)?;
    if ck.kind != TRAIN_STATE_KIND {
        return Err(Error::Input(format!(
            "{} is a '{}' container, not a training state",
            path.display(),
            ck.kind
        )));
    }
    let config: TrainConfig = serde_json::from_value(ck.meta["config"].clone())
        .map_err(|e| Error::Integrity(format!("state meta config invalid: {e}")))?;
    let model: NipModel = serde_json::from_value(ck.meta["model"].clone())
        .map_err(|e| Error::Integrity(format!("state meta model invalid: {e}")))?;

    let mut params = ParamSet::new();
    for (name, t) in ck.tensors.iter() {
        if let Some(base) = name.strip_prefix("p.") {
            params.insert(base, t.clone())?;
        }
    }
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (name, _) in params.iter() {
        m.push(
            ck.tensors
                .get(&format!("m.{name}"))
                .ok_or_else(|| Error::Integrity(format!("state missing moment m.{name}")))?
                .clone(),
        );
        v.push(
            ck.tensors
                .get(&format!("v.{name}"))
                .ok_or_else(|| Error::Integrity(format!("state missing moment v.{name}")))?
                .clone(),
        );
    }
    let step = ck.meta["adam_step"]
        .as_u64()
        .ok_or_else(|| Error::Integrity("state meta lacks adam_step".into()))?;
    let lr = ck.meta["adam_lr"]
        .as_f64()
        .ok_or_else(|| Error::Integrity("state meta lacks adam_lr".into()))?;
    let adam = AdamState::restore(&params, lr, step, m, v)?;

    let seed_bytes = unhex(meta_str(&ck.meta, "rng_seed")?)?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| Error::Integrity("rng seed must be 32 bytes".into()))?;
    let stream: u64 = meta_str(&ck.meta, "rng_stream")?
        .parse()
        .map_err(|_| Error::Integrity("rng stream is not an integer".into()))?;
    let word_pos: u128 = meta_str(&ck.meta, "rng_word_pos")?
        .parse()
        .map_err(|_| Error::Integrity("rng word position is not an integer".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let next_epoch = ck.meta["next_epoch"]
        .as_u64()
        .ok_or_else(|| Error::Integrity("state meta lacks next_epoch".into()))?
        as usize;
    let val_losses: Vec<f64> = serde_json::from_value(ck.meta["val_losses"].clone())
        .map_err(|e| Error::Integrity(format!("state meta val_losses invalid: {e}")))?;

    let state = NipTrainState {
        nip: Nip { model, params },
        adam,
        rng,
        next_epoch,
        val_losses,
    };
    Ok((config, model, state))
}
