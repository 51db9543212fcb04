use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use meshface::data::MANIFEST;
use meshface::image::load_image;

fn meshface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshface"))
        .args(args)
        .env_remove("MESHFACE_DATA_ROOT")
        .output()
        .expect("spawning meshface")
}

fn ok(args: &[&str]) -> Output {
    let out = meshface(args);
    assert!(out.status.success(), "meshface {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 32x32 model small enough to train a few steps in a test.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    let cfg = serde_json::json!({
        "version": 1,
        "net": {
            "image_size": 32, "channels": 3, "base_channels": 2,
            "res_blocks_face": 1, "res_blocks_mesh": 1,
            "latent_face": 3, "latent_mesh": 1,
            "disc_layers": 2, "disc_channels": 4
        },
        "train": { "epochs": 2, "decay_epochs": 1, "batch_size": 4, "lr0": 0.0002, "seed": 11 }
    });
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn manifest_lines(dir: &Path) -> usize {
    fs::read_to_string(dir.join(MANIFEST))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .count()
}

#[test]
fn synth_writes_one_triple_per_identity_by_default() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("data");
    ok(&["--config", s(&cfg), "--out", s(&out), "synth", "--identities", "200"]);
    let train = out.join("train");
    assert_eq!(manifest_lines(&train), 200);
    for suffix in ["x", "y", "z"] {
        let n = fs::read_dir(&train)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(&format!("_{suffix}.png")))
            .count();
        assert_eq!(n, 200, "{suffix} images");
    }
    assert!(out.join("run_meta.json").exists());
    assert_eq!(fs::read_dir(out.join("gallery")).unwrap().count(), 200);
}

#[test]
fn synth_multiplicity_and_heldout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("data");
    ok(&[
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "synth",
        "--identities",
        "4",
        "--images",
        "2",
        "--per-face",
        "3",
        "--heldout",
        "5",
    ]);
    assert_eq!(manifest_lines(&out.join("train")), 24);
    assert_eq!(manifest_lines(&out.join("heldout")), 5);
    let x = load_image(out.join("train").join("id0001_img00_m00_x.png")).unwrap();
    assert_eq!((x.height(), x.width(), x.channels()), (37, 37, 3));
}

#[test]
fn train_complete_latent_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["--config", s(&cfg), "--out", s(&data), "synth", "--identities", "6", "--images", "2", "--heldout", "6"]);

    let run = tmp.path().join("run");
    ok(&[
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "train",
        "--data",
        s(&data.join("train")),
        "--max-steps",
        "3",
        "--checkpoint-every",
        "2",
    ]);
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);
    assert!(run.join("checkpoints").join("step00000002").join("params.bin").exists());
    let ck = run.join("final");
    assert!(ck.join("manifest.json").exists());
    assert!(run.join("run_meta.json").exists());

    let done = tmp.path().join("complete");
    ok(&["--out", s(&done), "complete", "--checkpoint", s(&ck), "--input", s(&data.join("heldout"))]);
    let yhat = fs::read_dir(&done)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_yhat.png"))
        .count();
    assert_eq!(yhat, 6);
    let y = load_image(done.join("id0001_img50_m00_yhat.png")).unwrap();
    assert_eq!((y.height(), y.width(), y.channels()), (32, 32, 3));
    let z = load_image(done.join("id0001_img50_m00_zhat.png")).unwrap();
    assert_eq!(z.channels(), 1);

    let train = data.join("train");
    let face = train.join("id0001_img00_m00_y.png");
    let z1 = train.join("id0002_img00_m00_z.png");
    let z2 = train.join("id0003_img00_m00_z.png");
    let lat = tmp.path().join("latent");
    ok(&[
        "--out",
        s(&lat),
        "latent",
        "interp",
        "--checkpoint",
        s(&ck),
        "--face",
        s(&face),
        "--z1",
        s(&z1),
        "--z2",
        s(&z2),
        "--steps",
        "4",
    ]);
    for i in 0..4 {
        assert!(lat.join(format!("interp_{i:02}.png")).exists());
    }
    ok(&[
        "--out",
        s(&lat),
        "latent",
        "sub",
        "--checkpoint",
        s(&ck),
        "--face",
        s(&face),
        "--z1",
        s(&z1),
        "--z2",
        s(&z2),
    ]);
    // Interpolation endpoints are the plain fusions written by the sub panel.
    assert_eq!(fs::read(lat.join("interp_00.png")).unwrap(), fs::read(lat.join("sub_z1.png")).unwrap());
    assert_eq!(fs::read(lat.join("interp_03.png")).unwrap(), fs::read(lat.join("sub_z2.png")).unwrap());
    ok(&["--out", s(&lat), "latent", "scale", "--checkpoint", s(&ck), "--face", s(&face), "--z1", s(&z1)]);
    for i in 0..3 {
        assert!(lat.join(format!("scale_{i:02}.png")).exists());
    }
    // scale(1) is the second default alpha.
    assert_eq!(fs::read(lat.join("scale_01.png")).unwrap(), fs::read(lat.join("sub_z1.png")).unwrap());

    let ev = tmp.path().join("eval");
    ok(&[
        "--out",
        s(&ev),
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data.join("heldout")),
        "--gallery",
        s(&data.join("gallery")),
    ]);
    let csv = fs::read_to_string(ev.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,psnr,ssim,tpr@1%,tpr@0.1%,tpr@0.01%");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("Corrupted,"));
    assert!(lines[2].starts_with("Recovered,"));
    let clean: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(clean[0], "Clean");
    assert_eq!(clean[1].parse::<f64>().unwrap(), 99.0);
    assert!((clean[2].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    for name in ["roc_corrupted.csv", "roc_recovered.csv", "roc_clean.csv"] {
        assert!(fs::read_to_string(ev.join(name)).unwrap().lines().count() > 1, "{name}");
    }
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = meshface(&["--out", s(tmp.path()), "complete", "--checkpoint", s(&missing), "--input", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"version": 1, "nett": {}}"#).unwrap();
    let out = meshface(&["--config", s(&bad), "--out", s(tmp.path()), "synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a valid run config"));

    let out = meshface(&["--out", s(tmp.path()), "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MESHFACE_DATA_ROOT"));

    let out = meshface(&["synth", "--identities", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}
