use std::path::Path;
use std::process::{Command, Output};

use trackcouple::experiment::tree_contents;
use trackcouple::io::{read_static_mask, read_tracks, write_tracks};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trackcouple"));
    c.env_remove("TRACKCOUPLE_OUT").env("SOURCE_DATE_EPOCH", "1700000000");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, json: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{"scene": {"n_frames": 5, "n_static": 16, "n_dynamic": 4, "width": 12, "height": 12},
                        "optim": {"max_epochs": 40}}"#;

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("scenes");
    let out_s = out.to_str().unwrap();
    assert_eq!(code(&run(&["gen", "--seeds", "7", "--out", out_s])), 0);
    let first = tree_contents(&out).unwrap();
    std::fs::remove_dir_all(&out).unwrap();
    assert_eq!(code(&run(&["gen", "--seeds", "7", "--out", out_s])), 0);
    assert_eq!(tree_contents(&out).unwrap(), first);
    assert!(first.iter().any(|(p, _)| p.ends_with("seed_0007/scene.json")));
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"scene": {"n_frames": 0}}"#);
    let o = run(&["gen", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_frames"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), r#"{"scene": {"n_frame": 3}}"#);
    let o = run(&["gen", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_frame"), "{}", stderr(&o));

    let o = run(&["optimize", tmp.path().to_str().unwrap(), "--ablation", "bogus", "--seeds", "0"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn static_config_writes_all_ones_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"scene": {"n_dynamic": 0}}"#);
    let out = tmp.path().join("s");
    assert_eq!(code(&run(&["gen", "--config", &cfg, "--seeds", "1", "--out", out.to_str().unwrap()])), 0);
    let (n, t, mask) = read_static_mask(&out.join("seed_0001/static_mask.csv")).unwrap();
    assert_eq!(mask.len(), n * t);
    assert!(mask.iter().all(|&m| m));
}

#[test]
fn optimize_ablations_on_matched_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let scenes = tmp.path().join("scenes");
    let opt = tmp.path().join("opt");
    assert_eq!(code(&run(&["gen", "--config", &cfg, "--seeds", "0..2", "--out", scenes.to_str().unwrap()])), 0);
    let o = run(&[
        "optimize",
        scenes.to_str().unwrap(),
        "--config",
        &cfg,
        "--ablation",
        "none,full",
        "--out",
        opt.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(opt.join("summary.json")).unwrap()).unwrap();
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let init = r["initial"]["pose_error"].as_f64().unwrap();
        let fin = r["final_state"]["pose_error"].as_f64().unwrap();
        match r["ablation"].as_str().unwrap() {
            "branch-only" => {
                assert_eq!(init, fin);
                assert_eq!(r["initial"], r["final_state"]);
            }
            "full" => assert!(fin < init),
            other => panic!("unexpected ablation {other}"),
        }
    }
    let seeds = |a: &str| -> Vec<u64> { rows.iter().filter(|r| r["ablation"] == a).map(|r| r["seed"].as_u64().unwrap()).collect() };
    assert_eq!(seeds("branch-only"), seeds("full"));
    for f in ["summary.csv", "manifest.json", "full/seed_0001/report.json", "full/seed_0001/epochs.csv", "full/seed_0001/est/poses.csv"] {
        assert!(opt.join(f).is_file(), "{f}");
    }
}

#[test]
fn divergence_exits_5_with_flagged_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"scene": {"n_frames": 4, "n_static": 8, "n_dynamic": 0, "width": 10, "height": 10},
            "optim": {"steps": {"grids": 1e9, "tracks": 1e9, "poses": 1e9}}}"#,
    );
    let scenes = tmp.path().join("scenes");
    let opt = tmp.path().join("opt");
    assert_eq!(code(&run(&["gen", "--config", &cfg, "--out", scenes.to_str().unwrap()])), 0);
    let o = run(&["optimize", scenes.to_str().unwrap(), "--config", &cfg, "--ablation", "full", "--out", opt.to_str().unwrap()]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let csv = std::fs::read_to_string(opt.join("summary.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("full,0,diverged"), "{csv}");
}

#[test]
fn eval_identical_and_offset_and_missing() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    assert_eq!(code(&run(&["gen", "--out", scenes.to_str().unwrap()])), 0);
    let gt = scenes.join("seed_0000/gt");

    let out = tmp.path().join("same");
    let o = run(&["eval", gt.to_str().unwrap(), gt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    for e in report["entries"].as_array().unwrap() {
        let (name, v) = (e["name"].as_str().unwrap(), e["value"].as_f64().unwrap());
        let perfect = match name {
            "rra" | "rta" | "auc" | "aj" | "apd" | "oa" => 100.0,
            "nc_mean" | "nc_median" | "delta1" => 1.0,
            _ => 0.0,
        };
        assert_eq!(v, perfect, "{name}");
    }

    // Every track shifted by 0.01 along x: APD is 50% at absolute
    // thresholds {0.005, 0.02}; Jaccard is 0 then 1.
    let pred = tmp.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    let mut tracks = read_tracks(&gt.join("tracks.csv")).unwrap();
    for p in &mut tracks.points {
        p.x += 0.01;
    }
    write_tracks(&pred.join("tracks.csv"), &tracks).unwrap();
    let cfg = write_config(tmp.path(), r#"{"eval": {"tracking_thresholds": {"kind": "absolute", "values": [0.005, 0.02]}}}"#);
    let out = tmp.path().join("offset");
    let o = run(&["eval", pred.to_str().unwrap(), gt.to_str().unwrap(), "--metrics", "tracking", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.contains("apd,50,"), "{csv}");
    assert!(csv.contains("aj,50,"), "{csv}");
    assert!(csv.contains("oa,100,"), "{csv}");

    // Trajectory needs poses.csv, which pred lacks.
    let o = run(&["eval", pred.to_str().unwrap(), gt.to_str().unwrap(), "--metrics", "trajectory", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("poses.csv"), "{}", stderr(&o));

    let missing = tmp.path().join("nowhere");
    let o = run(&["eval", missing.to_str().unwrap(), gt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
}

#[test]
fn malformed_file_is_named_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = tmp.path().join("scenes");
    assert_eq!(code(&run(&["gen", "--out", scenes.to_str().unwrap()])), 0);
    let gt = scenes.join("seed_0000/gt");
    let tracks = gt.join("tracks.csv");
    let mut lines: Vec<String> = std::fs::read_to_string(&tracks).unwrap().lines().map(String::from).collect();
    lines[5] = "0,3,1,2".into();
    std::fs::write(&tracks, lines.join("\n")).unwrap();
    let o = run(&["eval", gt.to_str().unwrap(), gt.to_str().unwrap(), "--out", tmp.path().join("e").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("tracks.csv:6"), "{}", stderr(&o));
}

#[test]
fn gradcheck_pass_corrupt_and_tight_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let o = run(&["gradcheck", "--seeds", "0..3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 7 * 3);

    let o = run(&["gradcheck", "--seeds", "0", "--corrupt", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL random-0,cons_to_tracks,tracks,true"), "{stdout}");
    assert!(std::fs::read_to_string(out.join("gradcheck.csv")).unwrap().contains(",false"));

    let o = run(&["gradcheck", "--seeds", "0", "--kink", "--tol", "1e-12", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL kink,cons_to_tracks,tracks,true"));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .env("TRACKCOUPLE_OUT", tmp.path())
        .args(["gen", "--seeds", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(tmp.path().join("gen/seed_0002/scene.json").is_file());
    let manifest = std::fs::read_to_string(tmp.path().join("gen/manifest.json")).unwrap();
    assert!(manifest.contains("\"timestamp\": 1700000000"), "{manifest}");
}
