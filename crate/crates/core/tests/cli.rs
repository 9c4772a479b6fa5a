use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use enerf_core::cli::parse_pose;
use enerf_core::dataset::{load_dataset, read_pfm};
use enerf_core::geometry::Vec3;

fn enerf(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_enerf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|f| (f.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&f).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(enerf(&["--help"]).0, 0);
    assert_eq!(enerf(&["frobnicate"]).0, 2);
    assert_eq!(enerf(&["gen-scene"]).0, 2);
    assert_eq!(enerf(&["train", "--data", "x", "--out", "y", "--bogus"]).0, 2);
    let (code, msg) = enerf(&["gen-scene", "--preset", "teapot", "--out", "/nonexistent"]);
    assert_eq!(code, 2, "{msg}");
}

#[test]
fn pipeline_smoke_on_micro_scene() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let (code, msg) = enerf(&["gen-scene", "--preset", "micro", "--out", p(d)]);
        assert_eq!(code, 0, "{msg}");
    }
    assert_eq!(tree(&a), tree(&b));

    let run = dir.path().join("run");
    let (code, msg) = enerf(&["train", "--data", p(&a), "--out", p(&run), "--iters", "4", "--rays", "64"]);
    assert_eq!(code, 0, "{msg}");
    let ckpt = run.join("model.enrf");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 5);

    let img = dir.path().join("img");
    let (code, msg) = enerf(&["render", "--data", p(&a), "--ckpt", p(&ckpt), "--pose", "view:0", "--out", p(&img)]);
    assert_eq!(code, 0, "{msg}");
    let (w, h, depth) = read_pfm(&img.join("depth_mvs.pfm")).unwrap();
    assert_eq!((w, h, depth.len()), (32, 32, 1024));
    assert!(img.join("rgb.png").exists() && img.join("depth_nerf.pfm").exists());
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(img.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_samples_total"], 2048);

    let orbit = dir.path().join("orbit");
    let (code, msg) = enerf(&[
        "render", "--data", p(&a), "--ckpt", p(&ckpt), "--pose", "orbit:30,20,5", "--mode", "uniform", "--samples", "4",
        "--out", p(&orbit),
    ]);
    assert_eq!(code, 0, "{msg}");
    for bad in ["orbit:xx", "orbit:1,2", "orbit:0,90,5", "orbit:0,0,-1", "view:99", "side:1"] {
        let (code, msg) = enerf(&["render", "--data", p(&a), "--ckpt", p(&ckpt), "--pose", bad, "--out", p(&orbit)]);
        assert_eq!(code, 2, "{bad}: {msg}");
    }
    let (code, _) = enerf(&["render", "--data", p(&a), "--ckpt", p(&ckpt), "--mode", "sideways", "--out", p(&orbit)]);
    assert_eq!(code, 2);

    let report = dir.path().join("eval.json");
    let (code, msg) = enerf(&["eval", "--data", p(&a), "--ckpt", p(&ckpt), "--out", p(&report)]);
    assert_eq!(code, 0, "{msg}");
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(ev["mean_psnr"].as_f64().unwrap().is_finite());
    assert_eq!(ev["views"].as_array().unwrap().len(), 2);

    let bench = dir.path().join("bench.json");
    let (code, msg) = enerf(&[
        "bench", "--data", p(&a), "--ckpt", p(&ckpt), "--out", p(&bench), "--warmups", "1", "--repeats", "2",
    ]);
    assert_eq!(code, 0, "{msg}");
    let br: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(br["results"].as_array().unwrap().len(), 4);

    let (code, _) = enerf(&["eval", "--data", p(&dir.path().join("missing")), "--ckpt", p(&ckpt)]);
    assert_eq!(code, 1);
    assert!(t0.elapsed().as_secs() < 60, "smoke run took {:?}", t0.elapsed());
}

#[test]
fn config_file_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"iters": 2}, "colour": 1}"#).unwrap();
    let (code, msg) = enerf(&["--config", p(&cfg), "gen-scene", "--preset", "micro", "--out", p(&dir.path().join("s"))]);
    assert_eq!(code, 2, "{msg}");
    std::fs::write(&cfg, r#"{"render": {"n_samples": 0}}"#).unwrap();
    let data = dir.path().join("s");
    assert_eq!(enerf(&["gen-scene", "--preset", "micro", "--out", p(&data)]).0, 0);
    let (code, _) = enerf(&["--config", p(&cfg), "eval", "--data", p(&data), "--ckpt", "none.enrf"]);
    assert_eq!(code, 2);
}

#[test]
fn orbit_pose_geometry() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(enerf(&["gen-scene", "--preset", "micro", "--out", p(dir.path())]).0, 0);
    let ds = load_dataset(dir.path()).unwrap();
    let c = ds.centroid();
    let cam = parse_pose(&ds, "orbit:0,0,5").unwrap();
    assert!((cam.center() - (c + Vec3::new(5.0, 0.0, 0.0))).norm() < 1e-9);
    assert!((cam.principal_axis() - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-9);
    let up = parse_pose(&ds, "orbit:90,30,2").unwrap();
    let e = up.center() - c;
    assert!((e.norm() - 2.0).abs() < 1e-9 && e.x.abs() < 1e-9 && e.y > 0.0 && e.z > 0.0);
    let v0 = parse_pose(&ds, "view:0").unwrap();
    assert_eq!(v0.k, ds.views[0].camera.k);
    assert!(parse_pose(&ds, "orbit:nan,0,5").is_err());
}
