use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

use vsub_core::deform::read_container;
use vsub_core::mesh::{generate_primitive, Primitive};

fn vsub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsub")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn obj_vertices(path: &Path) -> Vec<[f64; 3]> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.strip_prefix("v "))
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect()
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["precompute", "verify", "deform-batch", "bench", "serve"] {
        let o = vsub(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"));
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&vsub(&["frobnicate"])), 2);
    assert_eq!(code(&vsub(&["precompute", "--m", "many"])), 2);
    assert_eq!(code(&vsub(&["precompute", "--gamma", "1", "--no-gamma"])), 2);
}

#[test]
fn verify_reports_every_bound_satisfied() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let o = vsub(&["verify", "--instances", "200", "--n", "24", "--seed", "7", "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let cases = r["bound"]["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 200);
    assert_eq!(r["bound"]["satisfied"], 200);
    for c in cases {
        for key in ["error", "bound", "slack", "rho", "omega", "hypotheses_met"] {
            assert!(c.get(key).is_some(), "missing {key}");
        }
        assert!(c["slack"].as_f64().unwrap() >= -1e-12);
    }
    assert_eq!(r["passed"], true);
    assert!(String::from_utf8_lossy(&o.stderr).contains("200/200"));
}

#[test]
fn precompute_cylinder_echoes_proxy_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/cyl.vsub");
    let o = vsub(&["precompute", "--mesh", "cylinder", "--m", "33", "--d", "12", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!((summary["m"].as_u64(), summary["d"].as_u64()), (Some(33), Some(12)));
    assert_eq!(summary["n"], 4940);
    let model = read_container(&out).unwrap();
    assert_eq!((model.m(), model.d(), model.n()), (33, 12, 4940));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("plane.vsub");
    fs::write(&cfg, json!({"mesh": "plane", "m": 10, "d": 6, "out": out}).to_string()).unwrap();
    let o = vsub(&["precompute", "--config", s(&cfg), "--d", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!((summary["m"].as_u64(), summary["d"].as_u64()), (Some(10), Some(4)));
    assert!(out.exists());
}

#[test]
fn failure_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.vsub");
    let out = s(&out);
    // Validation.
    assert_eq!(code(&vsub(&["precompute", "--mesh", "plane", "--m", "0", "--out", out])), 3);
    assert_eq!(code(&vsub(&["precompute", "--mesh", "teapot", "--out", out])), 3);
    assert_eq!(code(&vsub(&["precompute", "--mesh", "plane"])), 3);
    assert_eq!(code(&vsub(&["precompute", "--mesh", "plane", "--alpha=-1", "--out", out])), 3);
    // I/O.
    assert_eq!(code(&vsub(&["precompute", "--config", "/nonexistent/run.json"])), 5);
    assert_eq!(code(&vsub(&["precompute", "--mesh", "/nonexistent/a.obj", "--out", out])), 5);
    // Parse.
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"m\": ").unwrap();
    assert_eq!(code(&vsub(&["precompute", "--config", s(&bad)])), 2);
    let obj = dir.path().join("broken.obj");
    fs::write(&obj, "v 0 0 0\nf 1 2 zz\n").unwrap();
    assert_eq!(code(&vsub(&["precompute", "--mesh", s(&obj), "--out", out])), 2);
    let truncated = dir.path().join("t.vsub");
    fs::write(&truncated, b"VSUB").unwrap();
    let script = dir.path().join("s.jsonl");
    fs::write(&script, "").unwrap();
    let o = vsub(&["deform-batch", "--model", s(&truncated), "--script", s(&script)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn thread_cap_is_validated() {
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_vsub"))
            .args(["verify", "--instances", "2", "--n", "6"])
            .env("VSUB_THREADS", v)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("0")), 2);
    assert_eq!(code(&run("lots")), 2);
    assert_eq!(code(&run("1")), 0);
}

fn plane_model(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("plane.vsub");
    let o = vsub(&["precompute", "--mesh", "plane", "--m", "10", "--d", "5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn rest_pose_batch_reproduces_the_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let model = plane_model(dir.path());
    let rest = generate_primitive(&Primitive::Plane {
        nx: 20,
        ny: 20,
        width: 2.0,
        height: 2.0,
    })
    .unwrap();
    let handles = [0usize, 20, 440];
    let rows: Vec<usize> = handles.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect();
    let values: Vec<f64> = handles.iter().flat_map(|&v| rest.vertices()[v].iter().copied().collect::<Vec<_>>()).collect();
    let script = dir.path().join("rest.jsonl");
    fs::write(
        &script,
        format!(
            "{}\n\n{}\n{}\n",
            json!({"op": "handles", "rows": rows}),
            json!({"op": "targets", "values": values, "frames": 3}),
            json!({"op": "export", "path": "out/final.obj"}),
        ),
    )
    .unwrap();
    let frames = dir.path().join("frames");
    let trace = dir.path().join("trace.csv");
    let o = vsub(&[
        "deform-batch",
        "--model",
        s(&model),
        "--script",
        s(&script),
        "--frames-dir",
        s(&frames),
        "--trace",
        s(&trace),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&trace).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("frame,energy,constraint_residual"));
    for name in ["frame_00001.obj", "frame_00003.obj"] {
        let v = obj_vertices(&frames.join(name));
        assert_eq!(v.len(), rest.n());
        for (a, b) in v.iter().zip(rest.vertices()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-7, "{name}");
            }
        }
    }
    assert_eq!(obj_vertices(&dir.path().join("out/final.obj")).len(), rest.n());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = fs::read(plane_model(&dir.path().join("a"))).unwrap();
    let b = fs::read(plane_model(&dir.path().join("b"))).unwrap();
    assert!(a == b, "containers differ");

    let model = dir.path().join("a/plane.vsub");
    let script = dir.path().join("bend.jsonl");
    let rows: Vec<usize> = [0usize, 20, 440].iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect();
    fs::write(
        &script,
        format!(
            "{}\n{}\n",
            json!({"op": "handles", "rows": rows}),
            json!({"op": "targets", "values": [-1.0, -1.0, 0.0, 1.0, -1.0, 0.3, 1.0, 1.0, 0.5], "frames": 4}),
        ),
    )
    .unwrap();
    let run = || {
        let o = vsub(&["deform-batch", "--model", s(&model), "--script", s(&script), "--no-timings", "--conformal"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let (t1, t2) = (run(), run());
    assert_eq!(t1, t2);
    let text = String::from_utf8(t1).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().ends_with(",,,"));
}

#[test]
fn bad_script_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = plane_model(dir.path());
    let script = dir.path().join("bad.jsonl");
    fs::write(&script, "{\"op\": \"handles\", \"rows\": [0]}\n{\"op\": \"warp\"}\n").unwrap();
    let o = vsub(&["deform-batch", "--model", s(&model), "--script", s(&script)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    fs::write(&script, "{\"op\": \"handles\", \"rows\": [999999]}\n").unwrap();
    let o = vsub(&["deform-batch", "--model", s(&model), "--script", s(&script)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bench_emits_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let js = dir.path().join("bench.json");
    let o = vsub(&["bench", "plane", "--m", "8", "--d", "4", "--frames", "5", "--json", s(&js)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    for col in ["model", "verts", "type", "proxies", "1 iter us", "df ms", "subspace s/GB", "OP ms"] {
        assert!(lines[0].contains(col), "missing column {col}");
    }
    assert!(lines[1].starts_with("plane"));
    let rows: Value = serde_json::from_str(&fs::read_to_string(&js).unwrap()).unwrap();
    assert_eq!(rows[0]["verts"], 441);
    assert_eq!(rows[0]["type"], "surface");
    assert_eq!(rows[0]["proxies"], "8/4");
    assert!(rows[0]["iter_us"].as_f64().unwrap() > 0.0);
}
