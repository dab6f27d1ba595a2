//! End-to-end command wiring: every subcommand runs against real artifacts
//! in a temp directory, and failures map to the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nipc_core::io::save_image;
use nipc_core::raw::procedural_sources;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nipc")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn nipc")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "nipc {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Lay down a couple of source PNGs and cut a small raw dataset from them.
fn make_dataset(dir: &Path, count: usize, patch: usize) -> PathBuf {
    let src = dir.join("src");
    std::fs::create_dir_all(&src).unwrap();
    for (i, img) in procedural_sources::<f32>(90, 2, 96, 0.8).unwrap().iter().enumerate() {
        save_image(&src.join(format!("s{i}.png")), img).unwrap();
    }
    let data = dir.join("data");
    run_ok(&[
        "synth-data",
        "--src",
        src.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--patch",
        &patch.to_string(),
        "--seed",
        "7",
    ]);
    assert!(data.join("dataset.nipc").is_file());
    assert!(data.join("raw0.nipc").is_file());
    data
}

fn write_config(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn synth_train_develop_info_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_dataset(tmp.path(), 6, 64);

    let config = tmp.path().join("nip.json");
    write_config(
        &config,
        &format!(
            r#"{{
              "train": {{
                "mode": "nip-only", "epochs": 2, "iterations_per_epoch": 3,
                "batch_size": 2, "patch_size": 32, "seed": 11,
                "validation_cadence": 1, "validation_patches": 2, "fidelity_patches": 2
              }},
              "model": {{ "arch": "inet" }},
              "data": {:?}
            }}"#,
            data.join("dataset.nipc")
        ),
    );
    let out_dir = tmp.path().join("run1");
    run_ok(&["train-nip", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);

    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,lr,ce_loss,l2_loss,psnr,ssim,accuracy\n"));
    assert_eq!(history.lines().count(), 3, "header + one row per epoch");
    assert!(out_dir.join("state.nipc").is_file());

    let ck = out_dir.join("nip.nipc");
    let info = run_ok(&["info", "--checkpoint", ck.to_str().unwrap()]);
    assert!(info.contains("kind: nip"), "{info}");
    assert!(info.contains("trainable parameters: 100"), "{info}");

    let png = tmp.path().join("developed.png");
    run_ok(&[
        "develop",
        "--nip",
        "inet",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--in",
        data.join("raw0.nipc").to_str().unwrap(),
        "--out",
        png.to_str().unwrap(),
    ]);
    assert!(png.is_file());

    // Architecture mismatch is a configuration error.
    let mismatch = run(&[
        "develop",
        "--nip",
        "unet",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--in",
        data.join("raw0.nipc").to_str().unwrap(),
        "--out",
        png.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&mismatch), 2);
}

#[test]
fn joint_and_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_dataset(tmp.path(), 6, 64);

    // Stage 1, kept tiny: the checkpoint just has to exist.
    let nip_cfg = tmp.path().join("nip.json");
    write_config(
        &nip_cfg,
        &format!(
            r#"{{
              "train": {{
                "mode": "nip-only", "epochs": 1, "iterations_per_epoch": 2,
                "batch_size": 1, "patch_size": 32, "seed": 3,
                "validation_patches": 2, "fidelity_patches": 2
              }},
              "model": {{ "arch": "inet" }},
              "data": {:?}
            }}"#,
            data.join("dataset.nipc")
        ),
    );
    let stage1 = tmp.path().join("stage1");
    run_ok(&["train-nip", "--config", nip_cfg.to_str().unwrap(), "--out", stage1.to_str().unwrap()]);

    let joint_cfg = tmp.path().join("joint.json");
    write_config(
        &joint_cfg,
        &format!(
            r#"{{
              "train": {{
                "mode": "f", "epochs": 1, "iterations_per_epoch": 2,
                "batch_size": 1, "patch_size": 32, "seed": 5,
                "validation_cadence": 1, "validation_patches": 1, "fidelity_patches": 1
              }},
              "model": {{ "arch": "inet" }},
              "fan_width": 0.25,
              "data": {:?}
            }}"#,
            data.join("dataset.nipc")
        ),
    );
    let stage2 = tmp.path().join("stage2");
    run_ok(&[
        "train-joint",
        "--mode",
        "f",
        "--nip-checkpoint",
        stage1.join("nip.nipc").to_str().unwrap(),
        "--config",
        joint_cfg.to_str().unwrap(),
        "--out",
        stage2.to_str().unwrap(),
    ]);
    assert!(stage2.join("fan.nipc").is_file());
    assert!(stage2.join("history.csv").is_file());
    let confusion = std::fs::read_to_string(stage2.join("confusion.csv")).unwrap();
    assert!(confusion.starts_with("class,native,sharpen,gaussian,jpg,resample"), "{confusion}");
    let checkpoints = std::fs::read_dir(stage2.join("checkpoints")).unwrap().count();
    assert!(checkpoints >= 1, "per-validation checkpoints missing");

    let info = run_ok(&["info", "--checkpoint", stage2.join("fan.nipc").to_str().unwrap()]);
    assert!(info.contains("kind: fan"), "{info}");

    let eval_csv = tmp.path().join("eval.csv");
    let eval_out = run_ok(&[
        "evaluate",
        "--fan",
        stage2.join("fan.nipc").to_str().unwrap(),
        "--nip",
        stage2.join("nip.nipc").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        eval_csv.to_str().unwrap(),
    ]);
    assert!(eval_out.contains("accuracy"), "{eval_out}");
    let eval = std::fs::read_to_string(&eval_csv).unwrap();
    assert!(eval.contains("accuracy,"), "{eval}");
}

#[test]
fn jpeg_validate_exact_mode_matches_the_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let csv_path = tmp.path().join("jv.csv");
    run_ok(&["jpeg-validate", "--quality", "50", "--mode", "exact,sin", "--out", csv_path.to_str().unwrap()]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("quality,mode,images,max_abs_err,min_psnr\n"), "{csv}");
    let exact_row = csv.lines().find(|l| l.starts_with("50,exact,")).expect("exact row");
    let min_psnr: f64 = exact_row.split(',').nth(4).unwrap().parse().unwrap();
    assert!(min_psnr >= 48.13, "exact-mode PSNR vs the reference codec was {min_psnr}");
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    // Missing file: filesystem error.
    let missing = run(&["info", "--checkpoint", tmp.path().join("nope.nipc").to_str().unwrap()]);
    assert_eq!(exit_code(&missing), 5);

    // Corrupt container: integrity error.
    let bad = tmp.path().join("bad.nipc");
    std::fs::write(&bad, b"NIPCgarbage-that-is-not-a-container").unwrap();
    let corrupt = run(&["info", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(exit_code(&corrupt), 3);

    // Misspelled config key: configuration error naming the key.
    let cfg = tmp.path().join("typo.json");
    std::fs::write(&cfg, r#"{ "trian": {} }"#).unwrap();
    let typo = run(&["train-nip", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(exit_code(&typo), 2);
    assert!(String::from_utf8_lossy(&typo.stderr).contains("trian"));

    // Unknown gradient check name: input error.
    let unknown = run(&["gradcheck", "--op", "no-such-op", "--eps", "1e-5"]);
    assert_eq!(exit_code(&unknown), 2);

    // Invalid worker cap: configuration error.
    let threads = Command::new(bin())
        .args(["gradcheck", "--op", "clamp01", "--eps", "1e-5"])
        .env("NIP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code().unwrap(), 2);
}
