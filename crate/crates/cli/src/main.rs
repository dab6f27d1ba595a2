//! `nipc` — command-line frontend for the differentiable acquisition and
//! distribution channel: dataset synthesis, the three training stages,
//! development, JPEG validation, gradient checking, evaluation, and
//! checkpoint inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nipc_core::autodiff::{check_gradients, Tensor};
use nipc_core::djpeg::{djpeg_eval, reference_jpeg, RoundingMode};
use nipc_core::fan::{fan_init, FAN_FULL_WIDTH_PARAMS};
use nipc_core::io::{
    load_checkpoint, load_dataset, load_image_dir, load_raw_stack, load_run_config,
    save_checkpoint, save_dataset, save_image, save_raw_stack, save_train_state, write_history,
    Checkpoint, RunConfig, CONTAINER_VERSION,
};
use nipc_core::manip::ChannelConfig;
use nipc_core::metrics::psnr;
use nipc_core::params::ParamSet;
use nipc_core::raw::{derive_seed, procedural_sources, synth_dataset, Nip, NipModel, SensorProfile};
use nipc_core::train::{
    train_joint_with, train_nip_from, NipTrainState, StopReason, TrainMode,
};
use nipc_core::{all_grad_checks, Error, Result};

const AFTER_HELP: &str = "Exit codes:
  0  success
  2  invalid input, configuration, or tensor shapes
  3  damaged or incompatible artifact (checksum, container version)
  4  training or sampling failure (divergence, degenerate data)
  5  filesystem error

Environment:
  NIP_THREADS  upper bound on worker parallelism (this build executes
               deterministically on a single worker and treats the value as
               a cap, not a request)";

#[derive(Parser)]
#[command(name = "nipc", version, about = "Differentiable photo acquisition/distribution channel", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a raw training dataset from sRGB source images.
    SynthData {
        /// Directory of PNG/PPM source images.
        #[arg(long, value_name = "DIR")]
        src: PathBuf,
        /// Output directory (dataset.nipc, raw0.nipc).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of raw samples to cut.
        #[arg(long, value_name = "N")]
        count: usize,
        /// Patch side length in pixels (even, >= 32).
        #[arg(long, value_name = "P")]
        patch: usize,
        /// Run seed; identical seeds give identical datasets.
        #[arg(long, value_name = "S")]
        seed: u64,
        /// Sensor read-noise sigma (default 0: noiseless).
        #[arg(long, value_name = "SIGMA")]
        noise: Option<f64>,
    },
    /// Stage 1: fit a development model to the reference pipeline.
    TrainNip {
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Stages 2-3: train the classifier (f), or classifier and development
    /// model jointly (f+n).
    TrainJoint {
        /// f (frozen development model) or f+n (joint).
        #[arg(long, value_name = "f|f+n")]
        mode: String,
        /// Stage-1 development checkpoint to start from.
        #[arg(long = "nip-checkpoint", value_name = "FILE")]
        nip_checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Develop a packed raw frame to an 8-bit image.
    Develop {
        /// Architecture expected in the checkpoint (inet or unet).
        #[arg(long, value_name = "inet|unet")]
        nip: String,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Raw container ("raw" or "dataset" kind; first sample is used).
        #[arg(long = "in", value_name = "RAWFILE")]
        input: PathBuf,
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
    },
    /// Compare the differentiable JPEG against the integer codec oracle.
    JpegValidate {
        /// Comma-separated quality factors, e.g. 50,80,95.
        #[arg(long, value_name = "LIST")]
        quality: String,
        /// Comma-separated rounding modes: exact, sin, harmonic[K].
        #[arg(long, value_name = "LIST")]
        mode: String,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite (tolerance 1e-4).
    Gradcheck {
        /// Only run checks whose name contains this string.
        #[arg(long, value_name = "NAME")]
        op: Option<String>,
        /// Central-difference step size.
        #[arg(long, value_name = "E")]
        eps: f64,
    },
    /// Classify a dataset and report accuracy plus the confusion matrix.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        fan: PathBuf,
        #[arg(long, value_name = "FILE")]
        nip: PathBuf,
        /// Dataset container, or a directory containing dataset.nipc.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Inspect a container: kind, metadata, tensor table, parameter count.
    Info {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// NIP_THREADS must be a positive integer when set; the build runs one
/// worker, so the cap is validated and recorded but never exceeded anyway.
fn worker_cap() -> Result<usize> {
    match std::env::var("NIP_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("NIP_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => Ok(1),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    worker_cap()?;
    match cmd {
        Cmd::SynthData { src, out, count, patch, seed, noise } => {
            synth_data(&src, &out, count, patch, seed, noise)
        }
        Cmd::TrainNip { config, out } => train_nip_cmd(&config, &out),
        Cmd::TrainJoint { mode, nip_checkpoint, config, out } => {
            train_joint_cmd(&mode, &nip_checkpoint, &config, &out)
        }
        Cmd::Develop { nip, checkpoint, input, out } => develop_cmd(&nip, &checkpoint, &input, &out),
        Cmd::JpegValidate { quality, mode, out } => jpeg_validate(&quality, &mode, &out),
        Cmd::Gradcheck { op, eps } => gradcheck(op.as_deref(), eps),
        Cmd::Evaluate { fan, nip, data, out } => evaluate(&fan, &nip, &data, &out),
        Cmd::Info { checkpoint } => info(&checkpoint),
    }
}

// ---------------------------------------------------------------------------
// checkpoint helpers

fn nip_checkpoint(nip: &Nip<f32>, config: &RunConfig) -> Result<Checkpoint> {
    let meta = serde_json::json!({
        "model": nip.model,
        "config": config,
    });
    Ok(Checkpoint::new("nip", meta, nip.params.clone()))
}

fn load_nip(path: &Path) -> Result<Nip<f32>> {
    let ck = load_checkpoint(path)?;
    if ck.kind != "nip" {
        return Err(Error::Input(format!(
            "{} is a '{}' container, expected a development checkpoint",
            path.display(),
            ck.kind
        )));
    }
    let model: NipModel = serde_json::from_value(ck.meta["model"].clone())
        .map_err(|e| Error::Integrity(format!("checkpoint model tag invalid: {e}")))?;
    Ok(Nip { model, params: ck.tensors })
}

fn fan_checkpoint(
    fan: &ParamSet<f32>,
    width: f64,
    channel: Option<&ChannelConfig>,
    config: &RunConfig,
) -> Checkpoint {
    let meta = serde_json::json!({
        "fan_width": width,
        "channel": channel,
        "config": config,
    });
    Checkpoint::new("fan", meta, fan.clone())
}

fn load_fan(path: &Path) -> Result<(ParamSet<f32>, Option<ChannelConfig>)> {
    let ck = load_checkpoint(path)?;
    if ck.kind != "fan" {
        return Err(Error::Input(format!(
            "{} is a '{}' container, expected a classifier checkpoint",
            path.display(),
            ck.kind
        )));
    }
    let channel: Option<ChannelConfig> = serde_json::from_value(ck.meta["channel"].clone())
        .map_err(|e| Error::Integrity(format!("checkpoint channel config invalid: {e}")))?;
    Ok((ck.tensors, channel))
}

fn dataset_from(cfg: &RunConfig, config_path: &Path) -> Result<Vec<nipc_core::raw::RawSample<f32>>> {
    let rel = cfg.data.as_deref().ok_or_else(|| {
        Error::Config("config field 'data' must point to a dataset container".into())
    })?;
    // Relative data paths resolve against the config file's directory.
    let p = Path::new(rel);
    let path = if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    };
    load_dataset(&path)
}

// ---------------------------------------------------------------------------
// commands

fn synth_data(
    src: &Path,
    out: &Path,
    count: usize,
    patch: usize,
    seed: u64,
    noise: Option<f64>,
) -> Result<()> {
    let sources: Vec<Tensor<f32>> = load_image_dir(src)?;
    let profile = SensorProfile { noise_sigma: noise.unwrap_or(0.0), ..SensorProfile::default() };
    let data = synth_dataset(&sources, &profile, seed, count, patch)?;
    std::fs::create_dir_all(out)?;
    save_dataset(&out.join("dataset.nipc"), &data)?;
    if let Some(first) = data.first() {
        save_raw_stack(&out.join("raw0.nipc"), &first.stack, Some(&first.target))?;
    }
    println!(
        "wrote {} samples ({patch}x{patch}, noise {}) to {}",
        data.len(),
        profile.noise_sigma,
        out.join("dataset.nipc").display()
    );
    Ok(())
}

fn train_nip_cmd(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = load_run_config(config_path)?;
    let data = dataset_from(&cfg, config_path)?;
    std::fs::create_dir_all(out)?;

    let nip = Nip::<f32>::init(cfg.model, derive_seed(cfg.train.seed, 0x1417))?;
    let mut state = NipTrainState::fresh(&cfg.train, nip);
    let (history, stopped) = train_nip_from(&cfg.train, &data, &mut state)?;

    write_history(&out.join("history.csv"), &history)?;
    save_checkpoint(&out.join("nip.nipc"), &nip_checkpoint(&state.nip, &cfg)?)?;
    save_train_state(&out.join("state.nipc"), &cfg.train, state.nip.model, &state)?;
    for row in &history {
        println!(
            "epoch {:>4}  l2 {:>12.6}  psnr {:>8.4}  ssim {:.4}",
            row.epoch, row.l2_loss, row.psnr, row.ssim
        );
    }
    match stopped {
        StopReason::Diverged => Err(Error::Training(format!(
            "run diverged; last-good checkpoint written to {}",
            out.join("nip.nipc").display()
        ))),
        reason => {
            println!("stopped: {reason:?}");
            Ok(())
        }
    }
}

fn train_joint_cmd(mode: &str, nip_path: &Path, config_path: &Path, out: &Path) -> Result<()> {
    let mut cfg = load_run_config(config_path)?;
    cfg.train.mode = match mode {
        "f" => TrainMode::F,
        "f+n" => TrainMode::FPlusN,
        other => {
            return Err(Error::Config(format!("--mode must be 'f' or 'f+n', got '{other}'")))
        }
    };
    let data = dataset_from(&cfg, config_path)?;
    let nip = load_nip(nip_path)?;
    let fan = fan_init::<f32>(cfg.fan_width, derive_seed(cfg.train.seed, 0xfa9))?;
    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir)?;

    let channel = cfg.channel.clone();
    let cfg_for_meta = cfg.clone();
    let outcome = train_joint_with(
        &cfg.train,
        &data,
        nip,
        fan,
        channel.as_ref(),
        &mut |p| {
            println!(
                "epoch {:>4}  ce {:>9.5}  accuracy {:>6.4}  psnr {:>8.4}",
                p.epoch, p.row.ce_loss, p.row.accuracy, p.row.psnr
            );
            save_checkpoint(
                &ck_dir.join(format!("fan_e{:04}.nipc", p.epoch)),
                &fan_checkpoint(p.fan, cfg_for_meta.fan_width, channel.as_ref(), &cfg_for_meta),
            )
        },
    )?;

    write_history(&out.join("history.csv"), &outcome.history)?;
    save_checkpoint(
        &out.join("fan.nipc"),
        &fan_checkpoint(&outcome.fan, cfg.fan_width, channel.as_ref(), &cfg),
    )?;
    save_checkpoint(&out.join("nip.nipc"), &nip_checkpoint(&outcome.nip, &cfg)?)?;
    std::fs::write(&out.join("confusion.csv"), outcome.confusion.to_csv())?;
    print!("{}", outcome.confusion.render_text());
    match outcome.stopped {
        StopReason::Diverged => Err(Error::Training(format!(
            "run diverged; last-good checkpoints written to {}",
            out.display()
        ))),
        reason => {
            println!("stopped: {reason:?}");
            Ok(())
        }
    }
}

fn develop_cmd(arch: &str, checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let nip = load_nip(checkpoint)?;
    if nip.model.label() != arch {
        return Err(Error::Config(format!(
            "--nip {arch} but {} holds a {} model",
            checkpoint.display(),
            nip.model.label()
        )));
    }
    let (stack, _) = load_raw_stack(input)?;
    let image = nip.develop_eval(&stack)?;
    save_image(out, &image)?;
    let (h, w) = stack.full_size();
    println!("developed {w}x{h} -> {}", out.display());
    Ok(())
}

fn jpeg_validate(quality_list: &str, mode_list: &str, out: &Path) -> Result<()> {
    let qualities: Vec<u8> = quality_list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u8>()
                .map_err(|_| Error::Input(format!("invalid quality '{s}'")))
        })
        .collect::<Result<_>>()?;
    let modes: Vec<RoundingMode> =
        mode_list.split(',').map(|s| RoundingMode::parse(s.trim())).collect::<Result<_>>()?;
    if qualities.is_empty() || modes.is_empty() {
        return Err(Error::Input("need at least one quality and one mode".into()));
    }

    let images = procedural_sources::<f64>(2026, 4, 64, 1.0)?;
    let mut csv = String::from("quality,mode,images,max_abs_err,min_psnr\n");
    for &q in &qualities {
        for m in &modes {
            let mut max_err = 0.0f64;
            let mut min_psnr = f64::INFINITY;
            for img in &images {
                let approx = djpeg_eval(img, q, *m)?;
                let exact = reference_jpeg(img, q)?;
                let err = approx.max_abs_diff(&exact);
                max_err = max_err.max(err);
                min_psnr = min_psnr.min(psnr(&approx, &exact)?);
            }
            csv.push_str(&format!(
                "{q},{},{},{},{}\n",
                m.label(),
                images.len(),
                nipc_core::io::csv_field(max_err),
                nipc_core::io::csv_field(min_psnr),
            ));
            println!(
                "quality {q:>3}  mode {:>10}  max |err| {max_err:.3e}  psnr >= {min_psnr:.4} dB",
                m.label()
            );
        }
    }
    std::fs::write(out, csv)?;
    Ok(())
}

fn gradcheck(op: Option<&str>, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::Input(format!("--eps must be positive, got {eps}")));
    }
    const TOL: f64 = 1e-4;
    let checks: Vec<_> = all_grad_checks()
        .into_iter()
        .filter(|c| op.map_or(true, |o| c.name.contains(o)))
        .collect();
    if checks.is_empty() {
        return Err(Error::Input(format!("no gradient check matches '{}'", op.unwrap_or(""))));
    }
    let mut failed = 0usize;
    for check in &checks {
        let report = check_gradients(check, eps, TOL)?;
        println!(
            "{:<24} {}  max rel err {:.3e}  ({} coords)",
            report.name,
            if report.pass { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.coords_checked
        );
        if !report.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::Training(format!(
            "{failed} of {} gradient checks exceeded rel err {TOL}",
            checks.len()
        )));
    }
    println!("all {} gradient checks passed at tolerance {TOL}", checks.len());
    Ok(())
}

fn evaluate(fan_path: &Path, nip_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let (fan, channel) = load_fan(fan_path)?;
    let nip = load_nip(nip_path)?;
    let dataset_path = if data.is_dir() { data.join("dataset.nipc") } else { data.to_path_buf() };
    let samples = load_dataset(&dataset_path)?;
    let (accuracy, cm) =
        nipc_core::train::eval_accuracy(&nip, &fan, &samples, channel.as_ref())?;
    let mut csv = cm.to_csv();
    csv.push_str(&format!("accuracy,{:.6}\n", accuracy));
    std::fs::write(out, csv)?;
    print!("{}", cm.render_text());
    Ok(())
}

fn info(path: &Path) -> Result<()> {
    let ck = load_checkpoint(path)?;
    println!("kind: {}", ck.kind);
    println!("container version: {CONTAINER_VERSION}");
    println!("meta: {}", serde_json::to_string(&ck.meta).unwrap_or_default());
    println!("tensors: {}", ck.tensors.len());
    let count = ck.tensors.param_count();
    println!("trainable parameters: {count}");
    if ck.kind == "fan" {
        if let Some(w) = ck.meta["fan_width"].as_f64() {
            if w == 1.0 && count != FAN_FULL_WIDTH_PARAMS {
                return Err(Error::Integrity(format!(
                    "full-width classifier has {count} parameters, expected {FAN_FULL_WIDTH_PARAMS}"
                )));
            }
        }
    }
    Ok(())
}
