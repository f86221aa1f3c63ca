use std::path::Path;
use std::process::{Command, Output};

fn p3dc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p3dc"))
        .args(args)
        .env_remove("P3DC_STORE")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, preset: &str) -> String {
    let root = dir.join(preset);
    let root_s = root.to_str().unwrap().to_string();
    let o = p3dc(&["synth", "--preset", preset, "-o", &root_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    root_s
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn weights_outside_the_triangle_are_a_usage_error() {
    let o = p3dc(&["eval", "/nonexistent", "--alpha", "0.7", "--beta", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error_code: invalid_config:"), "{err}");
    assert!(err.contains("Usage: p3dc eval"), "{err}");
}

#[test]
fn unknown_flags_and_help() {
    let o = p3dc(&["eval", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error_code: usage:"));
    assert_eq!(p3dc(&["--help"]).status.code(), Some(0));
    assert_eq!(p3dc(&["eval", "--help"]).status.code(), Some(0));
}

#[test]
fn missing_store_is_a_runtime_error() {
    let o = p3dc(&["validate", "/nonexistent/store"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error_code: io:"));
}

#[test]
fn separable_store_gives_perfect_l2n_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth(dir.path(), "separable");
    let out = dir.path().join("l2n.json");
    let o = p3dc(&[
        "eval",
        &store,
        "--mode",
        "l2n",
        "--tasks",
        "100",
        "--json",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy  100.00%"));
    assert_eq!(json(&out)["mean"], 1.0);
}

#[test]
fn zero_weight_calibration_matches_l2n() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth(dir.path(), "boundary-bias");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let common = [
        "--tasks",
        "200",
        "--seed",
        "13",
        "--proto",
        "average",
        "--no-timing",
    ];
    let mut args = vec![
        "eval",
        &store,
        "--mode",
        "p3dc",
        "--alpha",
        "0",
        "--beta",
        "0",
        "--json",
        a.to_str().unwrap(),
    ];
    args.extend(common);
    assert!(p3dc(&args).status.success());
    let mut args = vec![
        "eval",
        &store,
        "--mode",
        "l2n",
        "--json",
        b.to_str().unwrap(),
    ];
    args.extend(common);
    assert!(p3dc(&args).status.success());
    let (a, b) = (json(&a), json(&b));
    assert_eq!(a["per_task_accuracy"], b["per_task_accuracy"]);
    assert_eq!(a["mean"], b["mean"]);
    assert_eq!(a["ci95_halfwidth"], b["ci95_halfwidth"]);
}

#[test]
fn json_output_is_byte_stable_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth(dir.path(), "boundary-bias");
    let run = |threads: &str| {
        let o = p3dc(&[
            "--threads",
            threads,
            "eval",
            &store,
            "--alpha",
            "0.2",
            "--beta",
            "0.3",
            "--proto",
            "attentive",
            "--tasks",
            "100",
            "--json",
            "-",
            "--no-timing",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        o.stdout
    };
    let one = run("1");
    assert_eq!(one, run("1"));
    assert_eq!(one, run("3"));
}

#[test]
fn sweep_writes_heatmap_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth(dir.path(), "degenerate");
    let csv = dir.path().join("h.csv");
    let js = dir.path().join("s.json");
    let o = p3dc(&[
        "sweep",
        &store,
        "--tasks",
        "20",
        "--heatmap",
        csv.to_str().unwrap(),
        "--json",
        js.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 67);
    let v = json(&js);
    assert_eq!(v["best"], serde_json::json!([0.0, 0.0]));
    assert_eq!(v["entries"].as_array().unwrap().len(), 66);
}

#[test]
fn prototypes_file_round_trips_into_eval() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth(dir.path(), "separable");
    let protos = dir.path().join("p.json");
    assert!(
        p3dc(&["prototypes", &store, "-o", protos.to_str().unwrap()])
            .status
            .success()
    );
    let run = |extra: &[&str]| {
        let mut args = vec![
            "eval",
            &store,
            "--alpha",
            "0.5",
            "--tasks",
            "30",
            "--json",
            "-",
            "--no-timing",
        ];
        args.extend(extra);
        p3dc(&args).stdout
    };
    assert_eq!(run(&[]), run(&["--prototypes", protos.to_str().unwrap()]));
}

#[test]
fn validate_reports_corruption_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth(dir.path(), "separable");
    assert!(p3dc(&["validate", &store]).status.success());

    let novel = Path::new(&store).join("novel.bin");
    let bytes = std::fs::read(&novel).unwrap();
    std::fs::write(&novel, &bytes[..bytes.len() - 3]).unwrap();
    let o = p3dc(&["validate", &store]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error_code: format:"), "{err}");
    assert!(err.contains("offset"), "{err}");
}

#[test]
fn too_many_ways_is_a_capacity_error() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth(dir.path(), "separable");
    let o = p3dc(&["eval", &store, "--way", "40", "--tasks", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error_code: capacity:"));
}

#[test]
fn store_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let store = synth(dir.path(), "separable");
    let o = Command::new(env!("CARGO_BIN_EXE_p3dc"))
        .args(["validate"])
        .env("P3DC_STORE", &store)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}
