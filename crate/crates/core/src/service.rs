//! Transport-independent state machine of the WebSocket session protocol.
//! Control messages are JSON text; the subspace blob travels as binary
//! chunks in the container layout.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::deform::{build_model, read_model, subspace_blob, DeformError, ModelConfig, BLOB_CHUNK};
use crate::mesh::{boundary_faces, generate_primitive, MeshKind, Primitive};
use crate::runtime::{ConstraintMode, RuntimeError, Session, SessionOptions, SharedModel};

pub const PROTOCOL_VERSION: u32 = 1;

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// Messages a client may send as JSON text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Hello {
        version: u32,
    },
    LoadModel {
        name: String,
    },
    SetParams {
        #[serde(default)]
        mode: Option<String>,
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default)]
        psi_cap: Option<f64>,
        #[serde(default)]
        adapt_rotation: Option<bool>,
        #[serde(default)]
        iters: Option<usize>,
    },
    SetHandles {
        rows: Vec<usize>,
    },
    Drag {
        targets: Vec<f64>,
    },
    SetIters {
        iters: usize,
    },
    ToggleConformal {
        #[serde(default)]
        enabled: Option<bool>,
        #[serde(default)]
        psi_cap: Option<f64>,
    },
}

/// A received frame before processing.
#[derive(Debug, Clone, PartialEq)]
pub enum Incoming {
    Message(ClientMessage),
    /// Binary frame: an uploaded container.
    Upload(Vec<u8>),
    /// Text that did not parse; answered with a 400 error.
    Malformed(String),
}

impl Incoming {
    pub fn from_text(text: &str) -> Self {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(m) => Incoming::Message(m),
            Err(e) => Incoming::Malformed(e.to_string()),
        }
    }

    fn is_drag(&self) -> bool {
        matches!(self, Incoming::Message(ClientMessage::Drag { .. }))
    }
}

/// Folds each run of consecutive drags into its last element (latest wins),
/// returning every surviving message with the number of drags it absorbed.
pub fn coalesce(queue: Vec<Incoming>) -> Vec<(Incoming, usize)> {
    let mut out: Vec<(Incoming, usize)> = Vec::with_capacity(queue.len());
    for msg in queue {
        match out.last_mut() {
            Some((prev, folded)) if prev.is_drag() && msg.is_drag() => {
                *prev = msg;
                *folded += 1;
            }
            _ => out.push((msg, 0)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Text(String),
    Binary(Vec<u8>),
}

impl Reply {
    fn json(v: Value) -> Self {
        Reply::Text(v.to_string())
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Reply::json(json!({"type": "error", "code": code, "message": message.into()}))
    }
}

/// Protocol error code of a runtime failure.
pub fn error_code(e: &RuntimeError) -> u16 {
    match e {
        RuntimeError::InvalidHandles(_) | RuntimeError::Config(_) | RuntimeError::Script { .. } => 400,
        RuntimeError::Rank(_) => 422,
        RuntimeError::State(_) => 409,
        RuntimeError::Deform(DeformError::Format(_)) => 400,
        RuntimeError::Deform(DeformError::InvalidConfig(_) | DeformError::SingularSaddle(_)) => 422,
        _ => 500,
    }
}

/// A bundled model: a primitive plus its precompute settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub primitive: Primitive,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub kind: MeshKind,
    pub vertices: usize,
    pub m: usize,
    pub d: usize,
    pub precomputed: bool,
}

/// Bundled models, precomputed on first use and shared afterwards.
#[derive(Debug, Default)]
pub struct ModelCatalog {
    entries: Vec<CatalogEntry>,
    cache: Mutex<HashMap<String, Arc<SharedModel>>>,
}

impl ModelCatalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Self {
        Self {
            entries,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Plane, a ~5k-vertex cylinder, a bar and a solid cylinder.
    pub fn bundled() -> Self {
        let cfg = |m, d| ModelConfig {
            m,
            d,
            ..Default::default()
        };
        Self::new(vec![
            CatalogEntry {
                name: "plane".into(),
                primitive: Primitive::Plane {
                    nx: 20,
                    ny: 20,
                    width: 2.0,
                    height: 2.0,
                },
                config: cfg(12, 6),
            },
            CatalogEntry {
                name: "cylinder".into(),
                primitive: Primitive::cylinder_with_vertices(5000),
                config: cfg(33, 12),
            },
            CatalogEntry {
                name: "bar".into(),
                primitive: Primitive::Bar {
                    nx: 12,
                    ny: 3,
                    nz: 3,
                    size: [4.0, 1.0, 1.0],
                },
                config: cfg(16, 8),
            },
            CatalogEntry {
                name: "solid_cylinder".into(),
                primitive: Primitive::SolidCylinder {
                    radial: 16,
                    axial: 12,
                    radius: 0.5,
                    height: 3.0,
                },
                config: cfg(20, 10),
            },
        ])
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    /// Listing for `GET /models`.
    pub fn list(&self) -> Vec<ModelInfo> {
        let cache = self.cache.lock().expect("catalog lock");
        self.entries
            .iter()
            .filter_map(|e| {
                let mesh = generate_primitive(&e.primitive).ok()?;
                Some(ModelInfo {
                    name: e.name.clone(),
                    kind: mesh.kind(),
                    vertices: mesh.n(),
                    m: e.config.m,
                    d: e.config.d,
                    precomputed: cache.contains_key(&e.name),
                })
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<SharedModel>, RuntimeError> {
        if let Some(m) = self.cache.lock().expect("catalog lock").get(name) {
            return Ok(Arc::clone(m));
        }
        let entry = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| RuntimeError::InvalidHandles(format!("unknown model '{name}'")))?;
        let mesh = generate_primitive(&entry.primitive)?;
        log::info!("precomputing bundled model '{name}' ({} vertices)", mesh.n());
        let shared = Arc::new(SharedModel::new(build_model(mesh, &entry.config)?)?);
        let mut cache = self.cache.lock().expect("catalog lock");
        Ok(Arc::clone(cache.entry(name.to_string()).or_insert(shared)))
    }
}

/// Per-connection protocol state.
#[derive(Debug)]
pub struct ServiceState {
    catalog: Arc<ModelCatalog>,
    session_id: Option<String>,
    session: Option<Session>,
    options: SessionOptions,
    /// Debug mode: frame states also carry all vertex positions.
    full: bool,
}

impl ServiceState {
    pub fn new(catalog: Arc<ModelCatalog>, full: bool) -> Self {
        Self {
            catalog,
            session_id: None,
            session: None,
            options: SessionOptions::default(),
            full,
        }
    }

    pub fn session(&self) -> Option<&Session> {
        self.session.as_ref()
    }

    pub fn session_id(&self) -> Option<&str> {
        self.session_id.as_deref()
    }

    pub fn handle_text(&mut self, text: &str) -> Vec<Reply> {
        self.handle(Incoming::from_text(text), 0)
    }

    /// Processes one message; `coalesced` counts drags it superseded.
    pub fn handle(&mut self, msg: Incoming, coalesced: usize) -> Vec<Reply> {
        match msg {
            Incoming::Malformed(e) => vec![Reply::error(400, format!("malformed message: {e}"))],
            Incoming::Upload(bytes) => self.upload(&bytes),
            Incoming::Message(m) => self.dispatch(m, coalesced),
        }
    }

    fn need_hello(&self) -> Result<(), Reply> {
        if self.session_id.is_none() {
            return Err(Reply::error(409, "send hello first"));
        }
        Ok(())
    }

    fn session_mut(&mut self) -> Result<&mut Session, Reply> {
        self.need_hello()?;
        self.session.as_mut().ok_or_else(|| Reply::error(409, "no model loaded"))
    }

    fn dispatch(&mut self, m: ClientMessage, coalesced: usize) -> Vec<Reply> {
        let result = match m {
            ClientMessage::Hello { version } => self.hello(version),
            ClientMessage::LoadModel { name } => self.load(&name),
            ClientMessage::SetParams {
                mode,
                delta,
                psi_cap,
                adapt_rotation,
                iters,
            } => self.set_params(mode, delta, psi_cap, adapt_rotation, iters),
            ClientMessage::SetHandles { rows } => self.set_handles(&rows),
            ClientMessage::Drag { targets } => self.drag(&targets, coalesced),
            ClientMessage::SetIters { iters } => self.set_params(None, None, None, None, Some(iters)),
            ClientMessage::ToggleConformal { enabled, psi_cap } => self.toggle_conformal(enabled, psi_cap),
        };
        result.unwrap_or_else(|e| vec![e])
    }

    fn hello(&mut self, version: u32) -> Result<Vec<Reply>, Reply> {
        if version != PROTOCOL_VERSION {
            return Err(Reply::error(
                400,
                format!("protocol version {version} unsupported, server speaks {PROTOCOL_VERSION}"),
            ));
        }
        let id = self
            .session_id
            .get_or_insert_with(|| format!("s{}", NEXT_SESSION.fetch_add(1, Ordering::Relaxed)))
            .clone();
        Ok(vec![Reply::json(json!({
            "type": "hello_ack",
            "session_id": id,
            "version": PROTOCOL_VERSION,
        }))])
    }

    fn load(&mut self, name: &str) -> Result<Vec<Reply>, Reply> {
        self.need_hello()?;
        let shared = self.catalog.get(name).map_err(|e| Reply::error(error_code(&e), e.to_string()))?;
        self.start(name, shared)
    }

    fn upload(&mut self, bytes: &[u8]) -> Vec<Reply> {
        if let Err(r) = self.need_hello() {
            return vec![r];
        }
        let shared = read_model(&mut &bytes[..])
            .map_err(RuntimeError::from)
            .and_then(SharedModel::new)
            .map_err(|e| Reply::error(error_code(&e), format!("upload rejected: {e}")));
        match shared {
            Ok(s) => self.start("upload", Arc::new(s)).unwrap_or_else(|e| vec![e]),
            Err(e) => vec![e],
        }
    }

    fn start(&mut self, name: &str, shared: Arc<SharedModel>) -> Result<Vec<Reply>, Reply> {
        let session =
            Session::new(Arc::clone(&shared), self.options).map_err(|e| Reply::error(error_code(&e), e.to_string()))?;
        let model = &shared.model;
        let faces: Vec<usize> = boundary_faces(model.mesh()).into_iter().flatten().collect();
        let blob = subspace_blob(model);
        let chunks: Vec<Vec<u8>> = blob.chunks(BLOB_CHUNK).map(<[u8]>::to_vec).collect();
        let mut replies = vec![
            Reply::json(json!({
                "type": "model_meta",
                "name": name,
                "n": model.n(),
                "m": model.m(),
                "d": model.d(),
                "s": model.s(),
                "k": model.k(),
                "kind": model.kind(),
                "faces": faces,
                "rest_x": model.meta.rest_x,
                "handle_row_limit": shared.row_limit(),
            })),
            Reply::json(json!({
                "type": "subspace_blob",
                "bytes": blob.len(),
                "chunks": chunks.len(),
                "chunk_size": BLOB_CHUNK,
            })),
        ];
        replies.extend(chunks.into_iter().map(Reply::Binary));
        self.session = Some(session);
        Ok(replies)
    }

    fn set_params(
        &mut self,
        mode: Option<String>,
        delta: Option<f64>,
        psi_cap: Option<f64>,
        adapt_rotation: Option<bool>,
        iters: Option<usize>,
    ) -> Result<Vec<Reply>, Reply> {
        self.need_hello()?;
        let mut opts = self.options;
        if let Some(mode) = mode.as_deref() {
            opts.mode = match mode {
                "hard" => ConstraintMode::Hard,
                "soft" => ConstraintMode::Soft { delta },
                other => return Err(Reply::error(400, format!("unknown constraint mode '{other}'"))),
            };
        } else if let (Some(d), ConstraintMode::Soft { .. }) = (delta, opts.mode) {
            opts.mode = ConstraintMode::Soft { delta: Some(d) };
        }
        if let Some(p) = psi_cap {
            opts.psi_cap = p;
        }
        if let Some(a) = adapt_rotation {
            opts.adapt_rotation = a;
        }
        if let Some(i) = iters {
            opts.iters = i;
        }
        opts.validate().map_err(|e| Reply::error(400, e.to_string()))?;
        if let Some(s) = self.session.as_mut() {
            let fail = |e: RuntimeError| Reply::error(error_code(&e), e.to_string());
            s.set_iters(opts.iters).map_err(fail)?;
            s.set_conformal(opts.conformal, Some(opts.psi_cap)).map_err(fail)?;
            s.set_adapt_rotation(opts.adapt_rotation);
            s.set_mode(opts.mode).map_err(fail)?;
        }
        self.options = opts;
        Ok(vec![Reply::json(json!({"type": "params_ack", "options": opts}))])
    }

    fn toggle_conformal(&mut self, enabled: Option<bool>, psi_cap: Option<f64>) -> Result<Vec<Reply>, Reply> {
        self.need_hello()?;
        let on = enabled.unwrap_or(!self.options.conformal);
        let cap = psi_cap.unwrap_or(self.options.psi_cap);
        if let Some(s) = self.session.as_mut() {
            s.set_conformal(on, Some(cap)).map_err(|e| Reply::error(error_code(&e), e.to_string()))?;
        } else {
            let probe = SessionOptions {
                conformal: on,
                psi_cap: cap,
                ..self.options
            };
            probe.validate().map_err(|e| Reply::error(400, e.to_string()))?;
        }
        self.options.conformal = on;
        self.options.psi_cap = cap;
        Ok(vec![Reply::json(json!({"type": "conformal_ack", "enabled": on, "psi_cap": cap}))])
    }

    fn set_handles(&mut self, rows: &[usize]) -> Result<Vec<Reply>, Reply> {
        let s = self.session_mut()?;
        s.set_handles(rows).map_err(|e| Reply::error(error_code(&e), e.to_string()))?;
        Ok(vec![Reply::json(json!({
            "type": "handles_ack",
            "rows": rows,
            "rest_targets": s.rest_targets().as_slice(),
        }))])
    }

    fn drag(&mut self, targets: &[f64], coalesced: usize) -> Result<Vec<Reply>, Reply> {
        let full = self.full;
        let s = self.session_mut()?;
        let fail = |e: RuntimeError| Reply::error(error_code(&e), e.to_string());
        s.set_targets(targets).map_err(fail)?;
        let stats = s.frame().map_err(fail)?;
        let r0: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| s.r0()[(r, c)]).collect();
        let mut state = json!({
            "type": "frame_state",
            "X": s.x().as_slice(),
            "S": s.s().as_slice(),
            "r0": r0,
            "psi": s.psi(),
            "energy": stats.energy,
            "residual": stats.residual,
            "timings": {"phase1_us": stats.t_phase1_us, "phase2_us": stats.t_phase2_us},
            "coalesced": coalesced,
        });
        if full {
            let v: Vec<f64> = s.reconstruct().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
            state["vertices"] = json!(v);
        }
        Ok(vec![Reply::json(state)])
    }
}
