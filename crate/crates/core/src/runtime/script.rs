use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::session::Session;
use super::RuntimeError;
use crate::mesh::write_obj;

/// One line of a batch script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptOp {
    /// Replaces the handle rows; targets reset to their rest values.
    Handles { rows: Vec<usize> },
    /// Moves the targets to `values`, interpolating linearly over `frames`.
    Targets {
        values: Vec<f64>,
        #[serde(default = "one")]
        frames: usize,
    },
    /// Writes the current reconstruction as OBJ.
    Export { path: PathBuf },
}

fn one() -> usize {
    1
}

/// Parses JSON lines; blank lines are skipped.
pub fn parse_script(text: &str) -> Result<Vec<ScriptOp>, RuntimeError> {
    let mut ops = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let op: ScriptOp = serde_json::from_str(line).map_err(|e| RuntimeError::Script {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let ScriptOp::Targets { frames: 0, .. } = op {
            return Err(RuntimeError::Script {
                line: i + 1,
                msg: "frames must be ≥ 1".into(),
            });
        }
        ops.push(op);
    }
    Ok(ops)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub frame: usize,
    pub energy: f64,
    pub constraint_residual: f64,
    pub t_phase1_us: f64,
    pub t_phase2_us: f64,
    pub t_reconstruct_ms: f64,
}

/// Where script output goes.
#[derive(Debug, Clone, Default)]
pub struct ScriptOutput {
    /// Every frame is written here as `frame_NNNNN.obj` when set.
    pub frames_dir: Option<PathBuf>,
    /// Base for relative export paths.
    pub base_dir: PathBuf,
}

pub fn run_script(session: &mut Session, ops: &[ScriptOp], out: &ScriptOutput) -> Result<Vec<TraceRow>, RuntimeError> {
    let mut trace = Vec::new();
    let mut last = None;
    for op in ops {
        match op {
            ScriptOp::Handles { rows } => {
                session.set_handles(rows)?;
                last = None;
            }
            ScriptOp::Targets { values, frames } => {
                if values.len() != session.handles().len() {
                    return Err(RuntimeError::InvalidHandles(format!(
                        "{} target values for {} handle rows",
                        values.len(),
                        session.handles().len()
                    )));
                }
                let start = session.targets().clone();
                for f in 1..=*frames {
                    let a = f as f64 / *frames as f64;
                    let p: Vec<f64> = start.iter().zip(values).map(|(s, v)| s + (v - s) * a).collect();
                    session.set_targets(&p)?;
                    let stats = session.frame()?;
                    let t = Instant::now();
                    let verts = session.reconstruct();
                    let t_rec = t.elapsed().as_secs_f64() * 1e3;
                    let frame = trace.len() + 1;
                    trace.push(TraceRow {
                        frame,
                        energy: stats.energy,
                        constraint_residual: session.reconstruction_residual(&verts),
                        t_phase1_us: stats.t_phase1_us,
                        t_phase2_us: stats.t_phase2_us,
                        t_reconstruct_ms: t_rec,
                    });
                    if let Some(dir) = &out.frames_dir {
                        write_obj(&dir.join(format!("frame_{frame:05}.obj")), &verts, session.shared().model.mesh())?;
                    }
                    last = Some(verts);
                }
            }
            ScriptOp::Export { path } => {
                let verts = last.take().unwrap_or_else(|| session.reconstruct());
                let path = if path.is_absolute() { path.clone() } else { out.base_dir.join(path) };
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|source| RuntimeError::Io {
                        path: dir.display().to_string(),
                        source,
                    })?;
                }
                write_obj(&path, &verts, session.shared().model.mesh())?;
                last = Some(verts);
            }
        }
    }
    Ok(trace)
}

pub const TRACE_HEADER: &str = "frame,energy,constraint_residual,t_phase1_us,t_phase2_us,t_reconstruct_ms";

/// CSV trace; timing cells are left empty when `timings` is false so traces
/// of identical runs compare byte for byte.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], timings: bool, w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        if timings {
            writeln!(
                w,
                "{},{},{},{:.3},{:.3},{:.4}",
                r.frame, r.energy, r.constraint_residual, r.t_phase1_us, r.t_phase2_us, r.t_reconstruct_ms
            )?;
        } else {
            writeln!(w, "{},{},{},,,", r.frame, r.energy, r.constraint_residual)?;
        }
    }
    Ok(())
}

pub fn write_trace_file(path: &Path, rows: &[TraceRow], timings: bool) -> Result<(), RuntimeError> {
    let io = |source| RuntimeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write_trace_csv(rows, timings, &mut f).map_err(io)?;
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ops() {
        let text = r#"{"op":"handles","rows":[0,1,2]}

{"op":"targets","values":[1,2,3],"frames":4}
{"op":"targets","values":[1,2,3]}
{"op":"export","path":"out.obj"}"#;
        let ops = parse_script(text).unwrap();
        assert_eq!(ops.len(), 4);
        assert_eq!(
            ops[2],
            ScriptOp::Targets {
                values: vec![1.0, 2.0, 3.0],
                frames: 1
            }
        );
    }

    #[test]
    fn reports_bad_line() {
        let err = parse_script("{\"op\":\"handles\",\"rows\":[0]}\n{\"op\":\"jump\"}").unwrap_err();
        assert!(matches!(err, RuntimeError::Script { line: 2, .. }));
        assert!(parse_script("{\"op\":\"targets\",\"values\":[],\"frames\":0}").is_err());
    }

    #[test]
    fn csv_without_timings() {
        let rows = [TraceRow {
            frame: 1,
            energy: 0.5,
            constraint_residual: 1e-12,
            t_phase1_us: 3.0,
            t_phase2_us: 4.0,
            t_reconstruct_ms: 0.1,
        }];
        let mut out = Vec::new();
        write_trace_csv(&rows, false, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{TRACE_HEADER}\n1,0.5,0.000000000001,,,\n"));
    }
}
