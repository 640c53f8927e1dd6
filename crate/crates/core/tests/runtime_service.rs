use std::sync::Arc;

use nalgebra::{DVector, Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use serde_json::Value;

use vsub_core::deform::{read_subspace_blob, write_model, ModelConfig};
use vsub_core::mesh::Primitive;
use vsub_core::runtime::{
    fit_rotation, parse_script, run_script, write_trace_file, ConstraintMode, ScriptOutput, Session, SessionOptions,
};
use vsub_core::service::{coalesce, CatalogEntry, ClientMessage, Incoming, ModelCatalog, Reply, ServiceState};

fn catalog() -> Arc<ModelCatalog> {
    Arc::new(ModelCatalog::new(vec![CatalogEntry {
        name: "plane".into(),
        primitive: Primitive::Plane {
            nx: 8,
            ny: 6,
            width: 2.0,
            height: 1.5,
        },
        config: ModelConfig {
            m: 10,
            d: 4,
            ..Default::default()
        },
    }]))
}

fn json(r: &Reply) -> Value {
    match r {
        Reply::Text(t) => serde_json::from_str(t).unwrap(),
        Reply::Binary(_) => panic!("expected a text reply"),
    }
}

fn error_code(replies: &[Reply]) -> Option<u64> {
    let v = json(&replies[0]);
    (v["type"] == "error").then(|| v["code"].as_u64().unwrap())
}

fn proxy_rows(state: &ServiceState, count: usize) -> Vec<usize> {
    let s = state.session().unwrap();
    let proxies = s.shared().model.meta.proxies.sample_indices().unwrap();
    proxies[..count].iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect()
}

#[test]
fn protocol_session_end_to_end() {
    let mut st = ServiceState::new(catalog(), true);
    assert_eq!(error_code(&st.handle_text(r#"{"type":"load_model","name":"plane"}"#)), Some(409));
    assert_eq!(error_code(&st.handle_text(r#"{"type":"hello","version":7}"#)), Some(400));
    let ack = json(&st.handle_text(r#"{"type":"hello","version":1}"#)[0]);
    assert_eq!(ack["type"], "hello_ack");
    assert!(ack["session_id"].as_str().unwrap().starts_with('s'));
    assert_eq!(error_code(&st.handle_text(r#"{"type":"drag","targets":[0.0]}"#)), Some(409));
    assert_eq!(error_code(&st.handle_text(r#"{"type":"load_model","name":"teapot"}"#)), Some(400));

    let replies = st.handle_text(r#"{"type":"load_model","name":"plane"}"#);
    let meta = json(&replies[0]);
    assert_eq!(meta["type"], "model_meta");
    assert_eq!(meta["n"], 63);
    let header = json(&replies[1]);
    let chunks: Vec<u8> = replies[2..]
        .iter()
        .flat_map(|r| match r {
            Reply::Binary(b) => b.clone(),
            Reply::Text(_) => panic!("expected blob chunks"),
        })
        .collect();
    assert_eq!(header["bytes"].as_u64().unwrap() as usize, chunks.len());
    let blob = read_subspace_blob(&chunks).unwrap();

    // Drag with no handles is a state error.
    assert_eq!(error_code(&st.handle_text(r#"{"type":"drag","targets":[]}"#)), Some(409));
    let rows = proxy_rows(&st, 3);
    let ack = json(&st.handle_text(&format!(r#"{{"type":"set_handles","rows":{rows:?}}}"#))[0]);
    assert_eq!(ack["type"], "handles_ack");
    let mut targets: Vec<f64> = ack["rest_targets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    targets[0] += 0.25;
    targets[5] -= 0.1;
    let msg = serde_json::to_string(&ClientMessage::Drag { targets: targets.clone() }).unwrap();
    let state = json(&st.handle_text(&msg)[0]);
    assert_eq!(state["type"], "frame_state");
    assert!(state["residual"].as_f64().unwrap() < 1e-9);

    // Client-side reconstruction from the blob agrees with the debug stream.
    let vec_of = |v: &Value| DVector::from_vec(v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect());
    let x = vec_of(&state["X"]);
    let s = vec_of(&state["S"]);
    let r0 = vec_of(&state["r0"]);
    let r0 = Matrix3::from_row_slice(r0.as_slice());
    let local = &blob.nv * &x + &blob.uv * &s;
    let full = vec_of(&state["vertices"]);
    for v in 0..blob.n {
        let p = r0 * Vector3::new(local[3 * v], local[3 * v + 1], local[3 * v + 2]);
        for c in 0..3 {
            assert!((p[c] - full[3 * v + c]).abs() < 1e-9);
        }
    }

    // Too many hard rows for the reduced coordinates.
    let all: Vec<usize> = (0..3 * blob.n).collect();
    assert_eq!(
        error_code(&st.handle_text(&format!(r#"{{"type":"set_handles","rows":{all:?}}}"#))),
        Some(422)
    );
    assert_eq!(error_code(&st.handle_text(r#"{"type":"set_params","mode":"fuzzy"}"#)), Some(400));
    assert_eq!(json(&st.handle_text(r#"{"type":"set_params","mode":"soft"}"#)[0])["type"], "params_ack");
    assert_eq!(json(&st.handle_text(r#"{"type":"toggle_conformal","enabled":true}"#)[0])["type"], "conformal_ack");
    let state = json(&st.handle_text(&msg)[0]);
    assert_eq!(state["type"], "frame_state");
    assert_eq!(error_code(&st.handle_text("{not json")), Some(400));
    assert_eq!(error_code(&st.handle(Incoming::Upload(vec![1, 2, 3]), 0)), Some(400));
}

#[test]
fn uploaded_container_starts_a_session() {
    let cat = catalog();
    let shared = cat.get("plane").unwrap();
    let mut bytes = Vec::new();
    write_model(&shared.model, &mut bytes).unwrap();
    let mut st = ServiceState::new(cat, false);
    st.handle_text(r#"{"type":"hello","version":1}"#);
    let replies = st.handle(Incoming::Upload(bytes), 0);
    let meta = json(&replies[0]);
    assert_eq!(meta["name"], "upload");
    assert_eq!(meta["k"].as_u64().unwrap() as usize, shared.k());
    assert!(st.session().is_some());
}

#[test]
fn frame_payload_is_small_next_to_vertex_stream() {
    let mut lean = ServiceState::new(catalog(), false);
    let mut full = ServiceState::new(catalog(), true);
    let mut sizes = Vec::new();
    for st in [&mut lean, &mut full] {
        st.handle_text(r#"{"type":"hello","version":1}"#);
        st.handle_text(r#"{"type":"load_model","name":"plane"}"#);
        let rows = proxy_rows(st, 3);
        st.handle_text(&format!(r#"{{"type":"set_handles","rows":{rows:?}}}"#));
        let t = st.session().unwrap().rest_targets();
        let msg = serde_json::to_string(&ClientMessage::Drag {
            targets: t.as_slice().to_vec(),
        })
        .unwrap();
        match &st.handle_text(&msg)[0] {
            Reply::Text(s) => sizes.push(s.len()),
            Reply::Binary(_) => panic!(),
        }
    }
    assert!(sizes[0] < sizes[1]);
}

#[test]
fn script_writes_frames_and_trace() {
    let cat = catalog();
    let shared = cat.get("plane").unwrap();
    let proxies = shared.model.meta.proxies.sample_indices().unwrap();
    let rows: Vec<usize> = proxies[..3].iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect();
    let mut s = Session::new(Arc::clone(&shared), SessionOptions::default()).unwrap();
    s.set_handles(&rows).unwrap();
    let mut t = s.rest_targets();
    t[2] += 0.3;
    let text = format!(
        "{{\"op\":\"handles\",\"rows\":{rows:?}}}\n{{\"op\":\"targets\",\"values\":{:?},\"frames\":4}}\n{{\"op\":\"export\",\"path\":\"final.obj\"}}\n",
        t.as_slice()
    );
    let ops = parse_script(&text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    let out = ScriptOutput {
        frames_dir: Some(frames.clone()),
        base_dir: dir.path().to_path_buf(),
    };
    let mut fresh = Session::new(shared, SessionOptions::default()).unwrap();
    let trace = run_script(&mut fresh, &ops, &out).unwrap();
    assert_eq!(trace.len(), 4);
    assert!(trace.iter().all(|r| r.constraint_residual < 1e-7));
    assert!(trace.windows(2).all(|w| w[1].frame == w[0].frame + 1));
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 4);
    assert!(dir.path().join("final.obj").exists());
    let csv = dir.path().join("trace.csv");
    write_trace_file(&csv, &trace, true).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);
}

#[test]
fn soft_mode_tracks_hard_as_weight_grows() {
    let shared = catalog().get("plane").unwrap();
    let proxies = shared.model.meta.proxies.sample_indices().unwrap();
    let rows: Vec<usize> = proxies[..4].iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect();
    let run = |mode| {
        let opts = SessionOptions {
            mode,
            adapt_rotation: false,
            ..Default::default()
        };
        let mut s = Session::new(Arc::clone(&shared), opts).unwrap();
        s.set_handles(&rows).unwrap();
        let mut t = s.rest_targets();
        t[0] += 0.2;
        s.set_targets(t.as_slice()).unwrap();
        s.frame().unwrap();
        s.local_coordinates()
    };
    let hard = run(ConstraintMode::Hard);
    let mut last = f64::INFINITY;
    for delta in [1e1, 1e3, 1e5] {
        let gap = (run(ConstraintMode::Soft { delta: Some(delta) }) - &hard).amax();
        assert!(gap < last, "delta {delta}: {gap} not below {last}");
        last = gap;
    }
    assert!(last < 1e-3);
}

fn drag(v: f64) -> Incoming {
    Incoming::Message(ClientMessage::Drag { targets: vec![v] })
}

proptest! {
    #[test]
    fn polar_fit_beats_random_rotations(
        g in prop::array::uniform9(-3.0..3.0f64),
        angles in prop::collection::vec((-3.2..3.2f64, -1.6..1.6f64, -3.2..3.2f64), 32),
    ) {
        let g = Matrix3::from_row_slice(&g);
        if let Some(r) = fit_rotation(&g) {
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            let best = (r.transpose() * g).trace();
            for (a, b, c) in angles {
                let q = Rotation3::from_euler_angles(a, b, c).into_inner();
                prop_assert!(best >= (q.transpose() * g).trace() - 1e-12 * (1.0 + g.norm()));
            }
        }
    }

    #[test]
    fn coalescing_keeps_order_and_counts(kinds in prop::collection::vec(0u8..3, 0..40)) {
        let queue: Vec<Incoming> = kinds
            .iter()
            .enumerate()
            .map(|(i, k)| match k {
                0 | 1 => drag(i as f64),
                _ => Incoming::Message(ClientMessage::SetIters { iters: i + 1 }),
            })
            .collect();
        let last_drag = queue.iter().rposition(|m| matches!(m, Incoming::Message(ClientMessage::Drag { .. })));
        let out = coalesce(queue.clone());
        prop_assert_eq!(out.len() + out.iter().map(|(_, f)| f).sum::<usize>(), queue.len());
        for w in out.windows(2) {
            let both = matches!(w[0].0, Incoming::Message(ClientMessage::Drag { .. }))
                && matches!(w[1].0, Incoming::Message(ClientMessage::Drag { .. }));
            prop_assert!(!both);
        }
        if let Some(i) = last_drag {
            prop_assert!(out.iter().any(|(m, _)| *m == queue[i]));
        }
    }
}
