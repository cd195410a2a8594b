use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anchorloop"))
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().unwrap()
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

fn te(out: &Path) -> f64 {
    read_json(out.join("metrics.json"))[0]["te"].as_f64().unwrap()
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let nope = dir.path().join("nope.json");
    let n = nope.to_str().unwrap();
    let out = run(&dir.path().join("o"), &["eval-traj", "--scene", n, "--camera", n, "--trajectory", n]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
    let manifest = read_json(dir.path().join("o/manifest.json"));
    assert_eq!(manifest["exit_code"], 2);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"chunk_size": "many"}"#).unwrap();
    let out = bin().arg("--config").arg(&cfg).arg("--out").arg(dir.path().join("o")).args(["eval-traj", "--fixture", "static", "--no-frames"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn static_fixture_tracks_the_sketch() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["eval-traj", "--fixture", "static", "--horizon", "48"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(te(dir.path()) <= 0.5);
    assert!(dir.path().join("rollout/frames/frame_0047.png").exists());
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with("clip_id,te,rpe_rot,rpe_trans,rpe_cam,psnr,ssim,regime,rot_bucket"));
    let manifest = read_json(dir.path().join("manifest.json"));
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn pixel_representation_drifts_under_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let (w, p) = (dir.path().join("w"), dir.path().join("p"));
    assert!(run(&w, &["eval-traj", "--fixture", "orbit-60", "--no-frames"]).status.success());
    assert!(run(&p, &["eval-traj", "--fixture", "orbit-60", "--repr", "pixel", "--no-frames"]).status.success());
    assert!(te(&w) <= 0.5);
    assert!(te(&p) > 5.0 * te(&w).max(0.1));
}

fn rpe_rot(out: &Path) -> f64 {
    read_json(out.join("rpe.json"))[0]["rpe_rot"].as_f64().unwrap()
}

#[test]
fn eval_camera_zero_and_global_similarity() {
    let dir = tempfile::tempdir().unwrap();
    let zero = dir.path().join("zero");
    assert!(run(&zero, &["eval-camera", "--fixture", "orbit-30"]).status.success());
    assert!(rpe_rot(&zero).abs() < 1e-9);
    let sim = dir.path().join("sim");
    let out = run(&sim, &["eval-camera", "--fixture", "orbit-30", "--scale", "2.5", "--yaw", "0.4", "--offset", "1", "-2", "0.5", "--stride", "1", "--stride", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for row in read_json(sim.join("rpe.json")).as_array().unwrap() {
        assert!(row["rpe_rot"].as_f64().unwrap() < 1e-9 && row["rpe_trans"].as_f64().unwrap() < 1e-9, "{row}");
    }
}

#[test]
fn eval_camera_monotone_in_noise() {
    let dir = tempfile::tempdir().unwrap();
    let mut last = 0.0;
    for (i, sigma) in ["0.001", "0.01", "0.05"].iter().enumerate() {
        let out = dir.path().join(format!("s{i}"));
        assert!(run(&out, &["eval-camera", "--fixture", "orbit-30", "--rot-noise", sigma, "--trials", "8"]).status.success());
        let r = rpe_rot(&out);
        assert!(r > last, "sigma {sigma}: {r} <= {last}");
        last = r;
    }
}

fn moving_clip(name: &str, cam: f64, displacement: f64) -> Value {
    let (w, h) = (160.0, 120.0);
    let diag = f64::hypot(w, h);
    let components: Vec<Value> = (0..120)
        .map(|f| {
            let x = 40.0 + displacement * diag * f as f64 / 119.0;
            json!({ "frame": f, "centroid": [x, 60.0], "area": 400.0 })
        })
        .collect();
    json!({ "clip": name, "frame": [160, 120], "num_frames": 120, "camera_translation": cam, "components": components })
}

fn write_clips(dir: &Path, clips: &[Value]) {
    std::fs::create_dir_all(dir).unwrap();
    for c in clips {
        std::fs::write(dir.join(format!("{}.json", c["clip"].as_str().unwrap())), c.to_string()).unwrap();
    }
}

#[test]
fn curate_single_object_and_static_clips() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("clips");
    write_clips(&input, &[moving_clip("walker", 0.8, 0.3), moving_clip("statue", 0.8, 0.0)]);
    let out = dir.path().join("out");
    let res = bin().arg("--out").arg(&out).arg("curate").arg("--input").arg(&input).output().unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let curated = read_json(out.join("curated.json"));
    assert_eq!(curated.as_array().unwrap().len(), 1);
    assert_eq!(curated[0]["clip"], "walker");
    assert_eq!(curated[0]["window"]["length"], 97);
    assert_eq!(curated[0]["query_points"]["points"].as_array().unwrap().len(), 20);
    let rejected = read_json(out.join("rejected.json"));
    assert_eq!(rejected[0]["clip"], "statue");
    assert_eq!(rejected[0]["rejection"]["reason"], "stationary");
}

#[test]
fn curate_regime_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("clips");
    let mut clips = Vec::new();
    for (n, cam, obj) in [(47, 0.1, 0.07), (23, 0.2, 0.3), (7, 1.0, 0.08), (23, 2.0, 0.4)] {
        for _ in 0..n {
            clips.push(moving_clip(&format!("c{:03}", clips.len()), cam, obj));
        }
    }
    write_clips(&input, &clips);
    let out = dir.path().join("out");
    assert!(bin().arg("--out").arg(&out).arg("curate").arg("--input").arg(&input).status().unwrap().success());
    let stats = read_json(out.join("stats.json"));
    let f = &stats["stats"]["fractions"];
    assert_eq!(stats["accepted"], 100);
    assert_eq!(
        (
            f["static-cam/static-obj"].as_f64(),
            f["static-cam/moving-obj"].as_f64(),
            f["moving-cam/static-obj"].as_f64(),
            f["moving-cam/moving-obj"].as_f64()
        ),
        (Some(0.47), Some(0.23), Some(0.07), Some(0.23)),
        "{f}"
    );
}

#[test]
fn curate_empty_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let res = bin().arg("--out").arg(dir.path().join("o")).arg("curate").arg("--input").arg(dir.path()).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn adapter_delta_and_probes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert!(run(&fx, &["--seed", "3", "adapter", "make-fixture"]).status.success());

    let same = dir.path().join("same");
    let base = fx.join("base");
    let res = bin().arg("--out").arg(&same).args(["adapter", "delta", "--base"]).arg(&base).arg("--ft").arg(&base).output().unwrap();
    assert!(res.status.success());
    let rows = read_json(same.join("delta.json"))["rows"].as_array().unwrap().clone();
    assert!(rows.iter().all(|r| r["delta_rel"] == 0.0));

    let planted = dir.path().join("planted");
    let res = bin().arg("--out").arg(&planted).args(["adapter", "delta", "--base"]).arg(&base).arg("--ft").arg(fx.join("ft")).output().unwrap();
    assert!(res.status.success());
    let csv = std::fs::read_to_string(planted.join("delta.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("rank,delta_rel,delta_norm,base_norm,params,category,parameter"));
    for line in lines.take(10) {
        let cat = line.split(',').nth(5).unwrap();
        assert!(cat == "prope" || cat == "action", "{line}");
    }

    let probe = dir.path().join("probe");
    assert!(run(&probe, &["adapter", "probe"]).status.success());
    for row in read_json(probe.join("cosine.json")).as_array().unwrap() {
        assert_eq!(row["min_cosine"], 1.0, "{row}");
    }
    let coupled = dir.path().join("coupled");
    assert!(run(&coupled, &["adapter", "probe", "--coupling", "0.5"]).status.success());
    let rows = read_json(coupled.join("cosine.json"));
    assert!(rows.as_array().unwrap().iter().any(|r| r["min_cosine"].as_f64().unwrap() < 0.99));

    let overlap = dir.path().join("overlap");
    assert!(run(&overlap, &["adapter", "overlap"]).status.success());
    assert_eq!(read_json(overlap.join("overlap.json")).as_array().unwrap().len(), 4);
}

#[test]
fn demo_reports_reentry() {
    let dir = tempfile::tempdir().unwrap();
    let res = run(dir.path(), &["demo", "--no-frames"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let s = read_json(dir.path().join("summary.json"));
    assert!(s["tasp_on"]["reentry_error_px"].as_f64().unwrap() <= 0.5);
    assert!((s["tasp_off"]["reentry_error_px"].as_f64().unwrap() - s["commanded_displacement_px"].as_f64().unwrap()).abs() <= 0.5);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(run(out, &["--seed", "7", "eval-traj", "--fixture", "orbit-30", "--depth-noise", "0.02", "--horizon", "40"]).status.success());
    }
    for name in ["metrics.csv", "metrics.json", "rollout/tracks.json", "rollout/memory_log.json", "rollout/frames/frame_0039.png"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

fn http_get(addr: &str, path: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).unwrap();
    buf
}

#[test]
fn serve_binds_and_shuts_down_on_sigterm() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["serve", "--port", "0", "--data-dir"])
        .arg(dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    stdout.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
    let resp = http_get(&addr, "/healthz");
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.contains(r#"{"status":"ok"}"#));
    let status = Command::new("kill").arg("-TERM").arg(child.id().to_string()).status().unwrap();
    assert!(status.success());
    let exit = child.wait().unwrap();
    let mut err = String::new();
    child.stderr.take().unwrap().read_to_string(&mut err).unwrap();
    assert!(exit.success(), "{exit:?} {err}");
    assert!(err.contains("shutting down"));
}
