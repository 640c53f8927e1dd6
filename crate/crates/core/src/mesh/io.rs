use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use super::{Elements, Mesh, MeshError, MeshKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Off,
    /// TetGen `.node` + `.ele` pair sharing a stem.
    NodeEle,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(MeshFormat::Obj),
            "off" => Some(MeshFormat::Off),
            "node" | "ele" => Some(MeshFormat::NodeEle),
            _ => None,
        }
    }
}

fn read(path: &Path) -> Result<String, MeshError> {
    fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn perr(path: &Path, line: usize, msg: impl Into<String>) -> MeshError {
    MeshError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Loads a mesh, inferring the format from the extension when `format` is
/// `None`.
pub fn load_mesh(path: &Path, format: Option<MeshFormat>) -> Result<Mesh, MeshError> {
    let format = format
        .or_else(|| MeshFormat::from_path(path))
        .ok_or_else(|| MeshError::UnknownFormat(path.to_path_buf()))?;
    match format {
        MeshFormat::Obj => load_obj(path),
        MeshFormat::Off => load_off(path),
        MeshFormat::NodeEle => load_node_ele(path),
    }
}

fn parse_f64(path: &Path, line: usize, tok: Option<&str>) -> Result<f64, MeshError> {
    let tok = tok.ok_or_else(|| perr(path, line, "missing number"))?;
    tok.parse().map_err(|_| perr(path, line, format!("bad number `{tok}`")))
}

fn parse_usize(path: &Path, line: usize, tok: Option<&str>) -> Result<usize, MeshError> {
    let tok = tok.ok_or_else(|| perr(path, line, "missing index"))?;
    tok.parse().map_err(|_| perr(path, line, format!("bad index `{tok}`")))
}

fn load_obj(path: &Path) -> Result<Mesh, MeshError> {
    let text = read(path)?;
    let mut verts = Vec::new();
    let mut tris = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let mut toks = raw.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(path, line, toks.next())?;
                let y = parse_f64(path, line, toks.next())?;
                let z = parse_f64(path, line, toks.next())?;
                verts.push(Vector3::new(x, y, z));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for t in toks {
                    let head = t.split('/').next().unwrap_or("");
                    let i: i64 = head.parse().map_err(|_| perr(path, line, format!("bad face index `{t}`")))?;
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        verts.len() as i64 + i
                    } else {
                        return Err(perr(path, line, "face index 0"));
                    };
                    if resolved < 0 {
                        return Err(perr(path, line, format!("face index {i} before first vertex")));
                    }
                    idx.push(resolved as usize);
                }
                if idx.len() < 3 {
                    return Err(perr(path, line, "face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    tris.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(verts, Elements::Triangles(tris))
}

/// Lines with comments stripped and blanks skipped, with 1-based numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn load_off(path: &Path) -> Result<Mesh, MeshError> {
    let text = read(path)?;
    let mut lines = content_lines(&text);
    let (ln, first) = lines.next().ok_or_else(|| perr(path, 1, "empty file"))?;
    let rest = first
        .strip_prefix("OFF")
        .ok_or_else(|| perr(path, ln, "missing OFF header"))?
        .trim();
    let counts_line = if rest.is_empty() {
        lines.next().ok_or_else(|| perr(path, ln, "missing counts"))?
    } else {
        (ln, rest)
    };
    let mut c = counts_line.1.split_whitespace();
    let nv = parse_usize(path, counts_line.0, c.next())?;
    let nf = parse_usize(path, counts_line.0, c.next())?;
    let mut verts = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| perr(path, counts_line.0, "truncated vertex list"))?;
        let mut t = l.split_whitespace();
        let x = parse_f64(path, ln, t.next())?;
        let y = parse_f64(path, ln, t.next())?;
        let z = parse_f64(path, ln, t.next())?;
        verts.push(Vector3::new(x, y, z));
    }
    let mut tris = Vec::new();
    for _ in 0..nf {
        let (ln, l) = lines.next().ok_or_else(|| perr(path, counts_line.0, "truncated face list"))?;
        let mut t = l.split_whitespace();
        let k = parse_usize(path, ln, t.next())?;
        if k < 3 {
            return Err(perr(path, ln, "face with fewer than 3 vertices"));
        }
        let idx: Vec<usize> = (0..k).map(|_| parse_usize(path, ln, t.next())).collect::<Result<_, _>>()?;
        for j in 1..k - 1 {
            tris.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Mesh::new(verts, Elements::Triangles(tris))
}

fn node_ele_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("node"), path.with_extension("ele"))
}

fn load_node_ele(path: &Path) -> Result<Mesh, MeshError> {
    let (node_path, ele_path) = node_ele_paths(path);
    let text = read(&node_path)?;
    let mut lines = content_lines(&text);
    let (hl, header) = lines.next().ok_or_else(|| perr(&node_path, 1, "empty file"))?;
    let mut h = header.split_whitespace();
    let nv = parse_usize(&node_path, hl, h.next())?;
    let dim = parse_usize(&node_path, hl, h.next())?;
    if dim != 3 {
        return Err(perr(&node_path, hl, format!("expected dimension 3, got {dim}")));
    }
    let mut verts = Vec::with_capacity(nv);
    let mut base = None;
    for k in 0..nv {
        let (ln, l) = lines.next().ok_or_else(|| perr(&node_path, hl, "truncated node list"))?;
        let mut t = l.split_whitespace();
        let id = parse_usize(&node_path, ln, t.next())?;
        let b = *base.get_or_insert(id);
        if b > 1 {
            return Err(perr(&node_path, ln, "node numbering must start at 0 or 1"));
        }
        if id != k + b {
            return Err(perr(&node_path, ln, format!("expected node {}, found {id}", k + b)));
        }
        let x = parse_f64(&node_path, ln, t.next())?;
        let y = parse_f64(&node_path, ln, t.next())?;
        let z = parse_f64(&node_path, ln, t.next())?;
        verts.push(Vector3::new(x, y, z));
    }
    let base = base.unwrap_or(0);

    let text = read(&ele_path)?;
    let mut lines = content_lines(&text);
    let (hl, header) = lines.next().ok_or_else(|| perr(&ele_path, 1, "empty file"))?;
    let mut h = header.split_whitespace();
    let ne = parse_usize(&ele_path, hl, h.next())?;
    let per = parse_usize(&ele_path, hl, h.next())?;
    if per != 4 {
        return Err(perr(&ele_path, hl, format!("only linear tetrahedra supported, got {per} nodes")));
    }
    let mut tets = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (ln, l) = lines.next().ok_or_else(|| perr(&ele_path, hl, "truncated element list"))?;
        let mut t = l.split_whitespace();
        parse_usize(&ele_path, ln, t.next())?;
        let mut tet = [0usize; 4];
        for v in tet.iter_mut() {
            let i = parse_usize(&ele_path, ln, t.next())?;
            *v = i
                .checked_sub(base)
                .ok_or_else(|| perr(&ele_path, ln, format!("index {i} below base {base}")))?;
        }
        tets.push(tet);
    }
    Mesh::new(verts, Elements::Tetrahedra(tets))
}

fn write(path: &Path, text: &str) -> Result<(), MeshError> {
    fs::write(path, text).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes triangles as OBJ; for solids, writes the boundary faces.
pub fn write_obj(path: &Path, vertices: &[Vector3<f64>], mesh: &Mesh) -> Result<(), MeshError> {
    let mut s = String::new();
    for v in vertices {
        let _ = writeln!(s, "v {:e} {:e} {:e}", v.x, v.y, v.z);
    }
    for f in boundary_faces(mesh) {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    write(path, &s)
}

/// Writes `stem.node` and `stem.ele` (0-based).
pub fn write_node_ele(path: &Path, vertices: &[Vector3<f64>], mesh: &Mesh) -> Result<(), MeshError> {
    let Elements::Tetrahedra(tets) = mesh.elements() else {
        return Err(MeshError::InvalidParameter("node/ele output requires a solid mesh".into()));
    };
    let (node_path, ele_path) = node_ele_paths(path);
    let mut s = format!("{} 3 0 0\n", vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        let _ = writeln!(s, "{i} {:e} {:e} {:e}", v.x, v.y, v.z);
    }
    write(&node_path, &s)?;
    let mut s = format!("{} 4 0\n", tets.len());
    for (i, t) in tets.iter().enumerate() {
        let _ = writeln!(s, "{i} {} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    write(&ele_path, &s)
}

/// OBJ for surfaces, `.node/.ele` for solids.
pub fn write_mesh(path: &Path, vertices: &[Vector3<f64>], mesh: &Mesh) -> Result<(), MeshError> {
    match mesh.kind() {
        MeshKind::Surface => write_obj(path, vertices, mesh),
        MeshKind::Solid => write_node_ele(path, vertices, mesh),
    }
}

/// Triangles of a surface, or outward boundary faces of a solid.
pub fn boundary_faces(mesh: &Mesh) -> Vec<[usize; 3]> {
    match mesh.elements() {
        Elements::Triangles(t) => t.clone(),
        Elements::Tetrahedra(tets) => {
            use std::collections::HashMap;
            let mut faces: HashMap<[usize; 3], ([usize; 3], usize)> = HashMap::new();
            for t in tets {
                for f in [[t[1], t[2], t[3]], [t[0], t[3], t[2]], [t[0], t[1], t[3]], [t[0], t[2], t[1]]] {
                    let mut key = f;
                    key.sort_unstable();
                    faces.entry(key).or_insert((f, 0)).1 += 1;
                }
            }
            let mut out: Vec<_> = faces.into_values().filter(|&(_, c)| c == 1).map(|(f, _)| f).collect();
            out.sort_unstable();
            out
        }
    }
}
