//! Artifact plumbing: the binary checkpoint/dataset container, strict JSON
//! run configuration, CSV report emission, and 8-bit image IO.

mod config;
mod container;
mod csv;
mod image;
mod state;

pub use config::{load_run_config, parse_run_config, RunConfig};
pub use container::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_dataset, load_raw_stack,
    save_checkpoint, save_dataset, save_raw_stack, Checkpoint, CONTAINER_MAGIC, CONTAINER_VERSION,
};
pub use csv::{csv_field, history_to_csv, write_history, HISTORY_HEADER};
pub use image::{load_image, load_image_dir, save_image};
pub use state::{load_train_state, save_train_state, TRAIN_STATE_KIND};
