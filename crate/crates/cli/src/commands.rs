use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use vsub_core::deform::{build_model, read_container, write_container, PrecomputedModel};
use vsub_core::runtime::{parse_script, run_script, write_trace_csv, ScriptOutput, Session, SharedModel};
use vsub_core::theory::run_verify;

use crate::config::{resolve_mesh, RunConfig};
use crate::{CliError, VerifyArgs};

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn stdout_line(s: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn precompute_model(cfg: &RunConfig, mesh: &str) -> Result<(PrecomputedModel, f64), CliError> {
    let src = resolve_mesh(mesh)?;
    let model_cfg = cfg.model_config(src.defaults)?;
    log::info!(
        "precomputing '{}': {} vertices, m={}, d={}",
        src.label,
        src.mesh.n(),
        model_cfg.m,
        model_cfg.d
    );
    let t = Instant::now();
    let model = build_model(src.mesh, &model_cfg)?;
    Ok((model, t.elapsed().as_secs_f64()))
}

pub fn precompute(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::Invalid("precompute needs --out".into()))?;
    let mesh = cfg
        .mesh
        .as_deref()
        .ok_or_else(|| CliError::Invalid("precompute needs --mesh".into()))?;
    // Settings are checked before the mesh is even loaded.
    cfg.model_config(Default::default())?;
    let (model, secs) = precompute_model(cfg, mesh)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_container(&model, out)?;
    let summary = json!({
        "mesh": mesh,
        "out": out,
        "n": model.n(),
        "kind": model.kind(),
        "m": model.m(),
        "d": model.d(),
        "s": model.s(),
        "k": model.k(),
        "matrix_bytes": model.matrix_bytes(),
        "precompute_s": secs,
    });
    stdout_line(&summary.to_string())
}

pub fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    if a.instances == 0 || a.n < 2 {
        return Err(CliError::Invalid("verify needs --instances ≥ 1 and --n ≥ 2".into()));
    }
    let report = run_verify(a.seed, a.instances, a.n);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.report {
        Some(p) => write_file(p, text.as_bytes())?,
        None => stdout_line(&text)?,
    }
    let bound_ok = report.bound.satisfied;
    let exact_ok = report.exactness.cases.iter().filter(|c| c.passed).count();
    eprintln!(
        "bound satisfied {bound_ok}/{} (min slack {:.3e}); exactness {exact_ok}/{} (worst {:.3e})",
        report.bound.cases.len(),
        report.bound.min_slack,
        report.exactness.cases.len(),
        report.exactness.max_rel_error,
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numeric("verification failed".into()))
    }
}

/// The model named by `--model`, or one precomputed from `--mesh`.
fn load_or_build(cfg: &RunConfig) -> Result<PrecomputedModel, CliError> {
    match (&cfg.model, &cfg.mesh) {
        (Some(path), _) => Ok(read_container(path)?),
        (None, Some(mesh)) => Ok(precompute_model(cfg, mesh)?.0),
        (None, None) => Err(CliError::Invalid("need --model or --mesh".into())),
    }
}

pub fn deform_batch(cfg: &RunConfig) -> Result<(), CliError> {
    let script_path = cfg
        .script
        .as_deref()
        .ok_or_else(|| CliError::Invalid("deform-batch needs --script".into()))?;
    let opts = cfg.session_options()?;
    let text = fs::read_to_string(script_path).map_err(|e| CliError::io(script_path, e))?;
    let ops = parse_script(&text)?;
    let shared = Arc::new(SharedModel::new(load_or_build(cfg)?)?);
    let mut session = Session::new(shared, opts)?;
    if let Some(dir) = &cfg.frames_dir {
        create_dir(dir)?;
    }
    let out = ScriptOutput {
        frames_dir: cfg.frames_dir.clone(),
        base_dir: script_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let trace = run_script(&mut session, &ops, &out)?;
    let mut csv = Vec::new();
    write_trace_csv(&trace, cfg.timings.unwrap_or(true), &mut csv).expect("writing to memory");
    match &cfg.trace {
        Some(p) => write_file(p, &csv),
        None => stdout_line(String::from_utf8_lossy(&csv).trim_end()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub model: String,
    pub verts: usize,
    #[serde(rename = "type")]
    pub kind: String,
    pub proxies: String,
    pub iter_us: f64,
    pub reconstruct_ms: f64,
    pub precompute_s: f64,
    pub precompute_gb: f64,
    pub op_ms: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Three vertices at each end of the longest bounding-box axis; the far end
/// is pulled sideways by 5% of the diagonal.
fn bench_handles(model: &PrecomputedModel) -> (Vec<usize>, Vec<usize>, usize) {
    let mesh = model.mesh();
    let (lo, hi) = mesh.bbox();
    let ext = hi - lo;
    let axis = ext.imax();
    let side = (axis + 1) % 3;
    let mut order: Vec<usize> = (0..mesh.n()).collect();
    order.sort_by(|&a, &b| mesh.vertices()[a][axis].total_cmp(&mesh.vertices()[b][axis]).then(a.cmp(&b)));
    let near = order[..3].to_vec();
    let far = order[order.len() - 3..].to_vec();
    (near, far, side)
}

fn bench_one(cfg: &RunConfig, mesh: &str, frames: usize) -> Result<BenchRow, CliError> {
    let (model, precompute_s) = precompute_model(cfg, mesh)?;
    let (verts, kind) = (model.n(), format!("{:?}", model.kind()).to_lowercase());
    let proxies = format!("{}/{}", model.m(), model.d());
    let precompute_gb = model.matrix_bytes() as f64 / 1e9;
    let diag = model.mesh().bbox_diagonal();
    let (near, far, side) = bench_handles(&model);
    let shared = Arc::new(SharedModel::new(model)?);
    let mut session = Session::new(shared, cfg.session_options()?)?;
    let rows: Vec<usize> = near.iter().chain(&far).flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect();
    let t = Instant::now();
    session.set_handles(&rows)?;
    let op_ms = t.elapsed().as_secs_f64() * 1e3;
    let mut targets = session.rest_targets();
    for i in 0..far.len() {
        targets[3 * (near.len() + i) + side] += 0.05 * diag;
    }
    session.set_targets(targets.as_slice())?;
    let (mut iters, mut recon) = (Vec::with_capacity(frames), Vec::with_capacity(frames));
    for _ in 0..frames {
        let stats = session.frame()?;
        if !stats.energy.is_finite() {
            return Err(CliError::Numeric(format!("non-finite energy on '{mesh}'")));
        }
        iters.push(stats.t_phase1_us + stats.t_phase2_us);
        let t = Instant::now();
        std::hint::black_box(session.reconstruct());
        recon.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchRow {
        model: mesh.to_string(),
        verts,
        kind,
        proxies,
        iter_us: median(iters),
        reconstruct_ms: median(recon),
        precompute_s,
        precompute_gb,
        op_ms,
    })
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<16} {:>7} {:<7} {:>8} {:>10} {:>8} {:>14} {:>8}\n",
        "model", "verts", "type", "proxies", "1 iter us", "df ms", "subspace s/GB", "OP ms"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>7} {:<7} {:>8} {:>10.1} {:>8.3} {:>7.2}/{:<6.3} {:>8.3}\n",
            r.model, r.verts, r.kind, r.proxies, r.iter_us, r.reconstruct_ms, r.precompute_s, r.precompute_gb, r.op_ms
        ));
    }
    s
}

pub fn bench(cfg: &RunConfig, meshes: &[String], frames: usize, json_out: Option<&Path>) -> Result<(), CliError> {
    if frames == 0 {
        return Err(CliError::Invalid("bench needs --frames ≥ 1".into()));
    }
    cfg.session_options()?;
    let meshes: Vec<String> = match (meshes.is_empty(), &cfg.mesh) {
        (false, _) => meshes.to_vec(),
        (true, Some(m)) => vec![m.clone()],
        (true, None) => vec!["plane".into(), "cylinder".into()],
    };
    let mut rows = Vec::new();
    for mesh in &meshes {
        rows.push(bench_one(cfg, mesh, frames)?);
    }
    stdout_line(bench_table(&rows).trim_end())?;
    if let Some(p) = json_out {
        let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
        write_file(&PathBuf::from(p), text.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(Vec::new()).is_nan());
    }

    #[test]
    fn bench_row_on_small_plane() {
        let cfg = RunConfig {
            m: Some(8),
            d: Some(4),
            ..Default::default()
        };
        let row = bench_one(&cfg, "plane", 3).unwrap();
        assert_eq!(row.verts, 441);
        assert_eq!(row.proxies, "8/4");
        assert!(row.iter_us > 0.0 && row.reconstruct_ms > 0.0 && row.op_ms > 0.0);
        let table = bench_table(&[row]);
        assert_eq!(table.lines().count(), 2);
        assert!(table.starts_with("model"));
    }
}
