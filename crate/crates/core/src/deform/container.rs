//! The `VSUB` binary container. Little-endian: magic, `u32` version,
//! `n, r, d, m, s` as `u64`, kind as `u32` (0 surface, 1 solid), `u32`
//! matrix count, then each matrix as `rows: u64, cols: u64` followed by
//! row-major `f64`, then a `u64`-length JSON trailer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{DeformError, ModelMeta, PrecomputedModel};
use crate::mesh::MeshKind;

pub const VSUB_MAGIC: &[u8; 4] = b"VSUB";
pub const VSUB_VERSION: u32 = 1;
/// Chunk size used when streaming a subspace blob.
pub const BLOB_CHUNK: usize = 1 << 20;

const MODEL_MATRICES: u32 = 7;
const MAX_ELEMENTS: usize = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    n: u64,
    r: u64,
    d: u64,
    m: u64,
    s: u64,
    kind: MeshKind,
    count: u32,
}

fn io_err(e: std::io::Error) -> DeformError {
    DeformError::Io {
        path: "<stream>".into(),
        source: e,
    }
}

fn write_header<W: Write>(w: &mut W, h: &Header) -> std::io::Result<()> {
    w.write_all(VSUB_MAGIC)?;
    w.write_all(&VSUB_VERSION.to_le_bytes())?;
    for v in [h.n, h.r, h.d, h.m, h.s] {
        w.write_all(&v.to_le_bytes())?;
    }
    let kind: u32 = match h.kind {
        MeshKind::Surface => 0,
        MeshKind::Solid => 1,
    };
    w.write_all(&kind.to_le_bytes())?;
    w.write_all(&h.count.to_le_bytes())
}

fn write_matrix<W: Write>(w: &mut W, a: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(&(a.nrows() as u64).to_le_bytes())?;
    w.write_all(&(a.ncols() as u64).to_le_bytes())?;
    let mut row = Vec::with_capacity(8 * a.ncols());
    for i in 0..a.nrows() {
        row.clear();
        for j in 0..a.ncols() {
            row.extend_from_slice(&a[(i, j)].to_le_bytes());
        }
        w.write_all(&row)?;
    }
    Ok(())
}

fn write_trailer<W: Write>(w: &mut W, json: &[u8]) -> std::io::Result<()> {
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(json)
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N], DeformError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DeformError::Format("unexpected end of data".into())
        } else {
            io_err(e)
        }
    })?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DeformError> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DeformError> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_header<R: Read>(r: &mut R) -> Result<Header, DeformError> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != VSUB_MAGIC {
        return Err(DeformError::Format("bad magic, not a VSUB container".into()));
    }
    let version = read_u32(r)?;
    if version != VSUB_VERSION {
        return Err(DeformError::Format(format!("unsupported version {version}")));
    }
    let (n, rr, d, m, s) = (read_u64(r)?, read_u64(r)?, read_u64(r)?, read_u64(r)?, read_u64(r)?);
    let kind = match read_u32(r)? {
        0 => MeshKind::Surface,
        1 => MeshKind::Solid,
        k => return Err(DeformError::Format(format!("unknown mesh kind {k}"))),
    };
    Ok(Header {
        n,
        r: rr,
        d,
        m,
        s,
        kind,
        count: read_u32(r)?,
    })
}

fn read_matrix<R: Read>(r: &mut R) -> Result<DMatrix<f64>, DeformError> {
    let rows = usize::try_from(read_u64(r)?).map_err(|_| DeformError::Format("matrix too large".into()))?;
    let cols = usize::try_from(read_u64(r)?).map_err(|_| DeformError::Format("matrix too large".into()))?;
    match rows.checked_mul(cols) {
        Some(len) if len <= MAX_ELEMENTS => {}
        _ => return Err(DeformError::Format(format!("implausible matrix shape {rows}x{cols}"))),
    }
    let mut a = DMatrix::zeros(rows, cols);
    let mut buf = vec![0u8; 8 * cols];
    for i in 0..rows {
        r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                DeformError::Format("truncated matrix data".into())
            } else {
                io_err(e)
            }
        })?;
        for (j, c) in buf.chunks_exact(8).enumerate() {
            a[(i, j)] = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
    }
    Ok(a)
}

fn read_trailer<R: Read>(r: &mut R) -> Result<Vec<u8>, DeformError> {
    let len = read_u64(r)?;
    let mut json = Vec::new();
    r.take(len).read_to_end(&mut json).map_err(io_err)?;
    if json.len() as u64 != len {
        return Err(DeformError::Format("truncated metadata".into()));
    }
    Ok(json)
}

fn model_header(model: &PrecomputedModel, count: u32) -> Header {
    Header {
        n: model.n() as u64,
        r: model.r as u64,
        d: model.d() as u64,
        m: model.m() as u64,
        s: model.s() as u64,
        kind: model.kind(),
        count,
    }
}

pub fn write_model<W: Write>(model: &PrecomputedModel, w: &mut W) -> Result<(), DeformError> {
    let json = serde_json::to_vec(&model.meta).map_err(|e| DeformError::Format(e.to_string()))?;
    let mut run = || -> std::io::Result<()> {
        write_header(w, &model_header(model, MODEL_MATRICES))?;
        for a in [
            &model.n_w,
            &model.u_w,
            &model.l_tilde,
            &model.m_tilde,
            &model.m_n,
            &model.m_u,
            &model.e_s,
        ] {
            write_matrix(w, a)?;
        }
        write_trailer(w, &json)?;
        w.flush()
    };
    run().map_err(io_err)
}

pub fn read_model<R: Read>(r: &mut R) -> Result<PrecomputedModel, DeformError> {
    let h = read_header(r)?;
    if h.count != MODEL_MATRICES {
        return Err(DeformError::Format(format!(
            "expected {MODEL_MATRICES} matrices, found {}",
            h.count
        )));
    }
    let mut mats = Vec::with_capacity(7);
    for _ in 0..MODEL_MATRICES {
        mats.push(read_matrix(r)?);
    }
    let meta: ModelMeta =
        serde_json::from_slice(&read_trailer(r)?).map_err(|e| DeformError::Format(format!("metadata: {e}")))?;
    let mut it = mats.into_iter();
    let mut next = || it.next().expect("seven matrices");
    let model = PrecomputedModel {
        meta,
        r: h.r as usize,
        n_w: next(),
        u_w: next(),
        l_tilde: next(),
        m_tilde: next(),
        m_n: next(),
        m_u: next(),
        e_s: next(),
    };
    check_model(&model, &h)?;
    Ok(model)
}

fn check_model(model: &PrecomputedModel, h: &Header) -> Result<(), DeformError> {
    let bad = |what: &str| Err(DeformError::Format(format!("inconsistent container: {what}")));
    if model.meta.mesh.frame_count() != model.r || model.meta.clusters.labels.len() != model.r {
        return bad("frame count");
    }
    if model_header(model, h.count) != *h {
        return bad("header does not match metadata");
    }
    if crate::deform::PatchLayout::new(model.n(), model.meta.patches.clone()).is_err() {
        return bad("patches");
    }
    let (k, d9) = (model.k(), 9 * model.d());
    let dim = model.pos_dim() + 4 * model.r;
    let shapes = [
        (&model.n_w, dim, k, "N_W"),
        (&model.u_w, dim, d9, "U_W"),
        (&model.l_tilde, k, k, "L̃"),
        (&model.m_tilde, d9, k, "M̃"),
        (&model.m_n, d9, k, "M_N"),
        (&model.m_u, d9, d9, "M_U"),
        (&model.e_s, d9, d9, "E_S"),
    ];
    for (a, r, c, name) in shapes {
        if a.shape() != (r, c) {
            return bad(&format!("{name} is {}x{}, expected {r}x{c}", a.nrows(), a.ncols()));
        }
    }
    if model.meta.rest_x.len() != k || model.meta.moments.len() != model.d() {
        return bad("rest proxies or moments");
    }
    Ok(())
}

pub fn write_container(model: &PrecomputedModel, path: &Path) -> Result<(), DeformError> {
    let f = File::create(path).map_err(|e| DeformError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut w = BufWriter::new(f);
    write_model(model, &mut w).map_err(|e| with_path(e, path))
}

pub fn read_container(path: &Path) -> Result<PrecomputedModel, DeformError> {
    let f = File::open(path).map_err(|e| DeformError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_model(&mut BufReader::new(f)).map_err(|e| with_path(e, path))
}

fn with_path(e: DeformError, path: &Path) -> DeformError {
    match e {
        DeformError::Io { source, .. } => DeformError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    }
}

/// Small JSON trailer of a subspace blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobTrailer {
    pub rest_x: Vec<f64>,
    pub cluster_labels: Vec<usize>,
}

/// Client-side reconstruction data: `V′ = N^v X + U^v S` over interleaved
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBlob {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub s: usize,
    pub kind: MeshKind,
    pub nv: DMatrix<f64>,
    pub uv: DMatrix<f64>,
    pub trailer: BlobTrailer,
}

/// Serializes the vertex blocks in the container layout.
pub fn subspace_blob(model: &PrecomputedModel) -> Vec<u8> {
    let (nv, uv) = model.vertex_blocks();
    let trailer = BlobTrailer {
        rest_x: model.meta.rest_x.clone(),
        cluster_labels: model.meta.clusters.labels.clone(),
    };
    let json = serde_json::to_vec(&trailer).expect("plain data serializes");
    let mut out = Vec::with_capacity(8 * (nv.len() + uv.len()) + json.len() + 128);
    let run = |w: &mut Vec<u8>| -> std::io::Result<()> {
        write_header(w, &model_header(model, 2))?;
        write_matrix(w, &nv)?;
        write_matrix(w, &uv)?;
        write_trailer(w, &json)
    };
    run(&mut out).expect("writing to memory");
    out
}

pub fn read_subspace_blob(bytes: &[u8]) -> Result<SubspaceBlob, DeformError> {
    let mut r = bytes;
    let h = read_header(&mut r)?;
    if h.count != 2 {
        return Err(DeformError::Format(format!("subspace blob holds {} matrices, expected 2", h.count)));
    }
    let nv = read_matrix(&mut r)?;
    let uv = read_matrix(&mut r)?;
    let trailer: BlobTrailer =
        serde_json::from_slice(&read_trailer(&mut r)?).map_err(|e| DeformError::Format(format!("trailer: {e}")))?;
    let (n, d, m, s) = (h.n as usize, h.d as usize, h.m as usize, h.s as usize);
    if nv.shape() != (3 * n, 3 * m + 9 * s) || uv.shape() != (3 * n, 9 * d) {
        return Err(DeformError::Format("subspace blob shapes do not match its header".into()));
    }
    Ok(SubspaceBlob {
        n,
        d,
        m,
        s,
        kind: h.kind,
        nv,
        uv,
        trailer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::{build_model, identity_rotations, ModelConfig};
    use crate::mesh::{generate_primitive, Primitive};
    use nalgebra::DVector;

    fn model() -> PrecomputedModel {
        let mesh = generate_primitive(&Primitive::Plane {
            nx: 5,
            ny: 4,
            width: 2.0,
            height: 1.5,
        })
        .unwrap();
        build_model(
            mesh,
            &ModelConfig {
                m: 5,
                d: 3,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut bytes = Vec::new();
        write_model(&m, &mut bytes).unwrap();
        let back = read_model(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_model(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(&bytes[..4], b"VSUB");
    }

    #[test]
    fn rejects_corruption() {
        let m = model();
        let mut bytes = Vec::new();
        write_model(&m, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(DeformError::Format(_))));
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(read_model(&mut &cut[..]), Err(DeformError::Format(_))));
        let mut wrong = bytes.clone();
        wrong[8] ^= 1; // n
        assert!(read_model(&mut wrong.as_slice()).is_err());
    }

    #[test]
    fn blob_reconstructs_rest_pose() {
        let m = model();
        let blob = read_subspace_blob(&subspace_blob(&m)).unwrap();
        assert_eq!(blob.nv.shape(), (3 * m.n(), m.k()));
        let x = DVector::from_column_slice(&blob.trailer.rest_x);
        let v = &blob.nv * x + &blob.uv * identity_rotations(m.d());
        for (i, p) in m.mesh().vertices().iter().enumerate() {
            assert!((v.fixed_rows::<3>(3 * i) - p).norm() < 1e-8);
        }
    }
}
