use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Elements, Mesh, MeshError};

/// Procedural test shapes. All are centred at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// `nx × ny` quads in the xy-plane, two triangles each.
    Plane { nx: usize, ny: usize, width: f64, height: f64 },
    /// Open tube around the z-axis.
    Cylinder { radial: usize, axial: usize, radius: f64, height: f64 },
    /// Solid box of `nx × ny × nz` cubes, six tetrahedra each.
    Bar { nx: usize, ny: usize, nz: usize, size: [f64; 3] },
    /// Solid cylinder around the z-axis built from a polar disk grid.
    SolidCylinder { radial: usize, axial: usize, radius: f64, height: f64 },
    /// Cube split into five tetrahedra.
    FiveTetCube { size: f64 },
    /// Subdivided icosahedron projected to a sphere.
    Icosphere { subdivisions: usize, radius: f64 },
}

impl Primitive {
    /// Surface cylinder with roughly `target` vertices and a 1:4
    /// circumference-to-height sampling ratio.
    pub fn cylinder_with_vertices(target: usize) -> Primitive {
        let radial = ((target as f64 / 1.2).sqrt().round() as usize).max(3);
        let axial = (target / radial).max(2) - 1;
        Primitive::Cylinder {
            radial,
            axial,
            radius: 1.0,
            height: 4.0,
        }
    }

    /// Short name used by the model listing.
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Plane { .. } => "plane",
            Primitive::Cylinder { .. } => "cylinder",
            Primitive::Bar { .. } => "bar",
            Primitive::SolidCylinder { .. } => "solid_cylinder",
            Primitive::FiveTetCube { .. } => "five_tet_cube",
            Primitive::Icosphere { .. } => "icosphere",
        }
    }
}

fn positive(name: &str, v: usize, min: usize) -> Result<(), MeshError> {
    if v < min {
        return Err(MeshError::InvalidParameter(format!("{name} must be at least {min}, got {v}")));
    }
    Ok(())
}

fn positive_len(name: &str, v: f64) -> Result<(), MeshError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(MeshError::InvalidParameter(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

pub fn generate_primitive(p: &Primitive) -> Result<Mesh, MeshError> {
    match *p {
        Primitive::Plane { nx, ny, width, height } => {
            positive("nx", nx, 1)?;
            positive("ny", ny, 1)?;
            positive_len("width", width)?;
            positive_len("height", height)?;
            plane(nx, ny, width, height)
        }
        Primitive::Cylinder {
            radial,
            axial,
            radius,
            height,
        } => {
            positive("radial", radial, 3)?;
            positive("axial", axial, 1)?;
            positive_len("radius", radius)?;
            positive_len("height", height)?;
            cylinder(radial, axial, radius, height)
        }
        Primitive::Bar { nx, ny, nz, size } => {
            positive("nx", nx, 1)?;
            positive("ny", ny, 1)?;
            positive("nz", nz, 1)?;
            for s in size {
                positive_len("size", s)?;
            }
            bar(nx, ny, nz, size)
        }
        Primitive::SolidCylinder {
            radial,
            axial,
            radius,
            height,
        } => {
            positive("radial", radial, 3)?;
            positive("axial", axial, 1)?;
            positive_len("radius", radius)?;
            positive_len("height", height)?;
            solid_cylinder(radial, axial, radius, height)
        }
        Primitive::FiveTetCube { size } => {
            positive_len("size", size)?;
            five_tet_cube(size)
        }
        Primitive::Icosphere { subdivisions, radius } => {
            positive_len("radius", radius)?;
            icosphere(subdivisions, radius)
        }
    }
}

fn plane(nx: usize, ny: usize, width: f64, height: f64) -> Result<Mesh, MeshError> {
    let mut v = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            v.push(Vector3::new(
                width * (i as f64 / nx as f64 - 0.5),
                height * (j as f64 / ny as f64 - 0.5),
                0.0,
            ));
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut t = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            t.push([a, b, c]);
            t.push([a, c, d]);
        }
    }
    Mesh::new(v, Elements::Triangles(t))
}

fn cylinder(radial: usize, axial: usize, radius: f64, height: f64) -> Result<Mesh, MeshError> {
    let mut v = Vec::with_capacity(radial * (axial + 1));
    for j in 0..=axial {
        let z = height * (j as f64 / axial as f64 - 0.5);
        for i in 0..radial {
            let th = 2.0 * PI * i as f64 / radial as f64;
            v.push(Vector3::new(radius * th.cos(), radius * th.sin(), z));
        }
    }
    let id = |i: usize, j: usize| j * radial + i % radial;
    let mut t = Vec::with_capacity(2 * radial * axial);
    for j in 0..axial {
        for i in 0..radial {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            t.push([a, b, c]);
            t.push([a, c, d]);
        }
    }
    Mesh::new(v, Elements::Triangles(t))
}

fn bar(nx: usize, ny: usize, nz: usize, size: [f64; 3]) -> Result<Mesh, MeshError> {
    let mut v = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                v.push(Vector3::new(
                    size[0] * (i as f64 / nx as f64 - 0.5),
                    size[1] * (j as f64 / ny as f64 - 0.5),
                    size[2] * (k as f64 / nz as f64 - 0.5),
                ));
            }
        }
    }
    let id = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut t = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for p in perms {
                    let mut c = [i, j, k];
                    let mut tet = [id(i, j, k), 0, 0, id(i + 1, j + 1, k + 1)];
                    c[p[0]] += 1;
                    tet[1] = id(c[0], c[1], c[2]);
                    c[p[1]] += 1;
                    tet[2] = id(c[0], c[1], c[2]);
                    t.push(tet);
                }
            }
        }
    }
    Mesh::new(v, Elements::Tetrahedra(t))
}

fn five_tet_cube(size: f64) -> Result<Mesh, MeshError> {
    let h = 0.5 * size;
    let v = [
        [-h, -h, -h],
        [h, -h, -h],
        [h, h, -h],
        [-h, h, -h],
        [-h, -h, h],
        [h, -h, h],
        [h, h, h],
        [-h, h, h],
    ]
    .iter()
    .map(|p| Vector3::new(p[0], p[1], p[2]))
    .collect();
    let t = vec![[0, 1, 3, 4], [1, 2, 3, 6], [1, 4, 5, 6], [3, 4, 6, 7], [1, 3, 4, 6]];
    Mesh::new(v, Elements::Tetrahedra(t))
}

fn solid_cylinder(radial: usize, axial: usize, radius: f64, height: f64) -> Result<Mesh, MeshError> {
    let rings = ((radial as f64 / (2.0 * PI)).round() as usize).max(1);
    // Disk: centre, then `rings` rings of `radial` vertices.
    let mut disk = vec![(0.0, 0.0)];
    for r in 1..=rings {
        let rad = radius * r as f64 / rings as f64;
        for i in 0..radial {
            let th = 2.0 * PI * i as f64 / radial as f64;
            disk.push((rad * th.cos(), rad * th.sin()));
        }
    }
    let ring = |r: usize, i: usize| 1 + (r - 1) * radial + i % radial;
    let mut tris = Vec::new();
    for i in 0..radial {
        tris.push([0, ring(1, i), ring(1, i + 1)]);
    }
    for r in 1..rings {
        for i in 0..radial {
            let (a, b, c, d) = (ring(r, i), ring(r, i + 1), ring(r + 1, i + 1), ring(r + 1, i));
            tris.push([a, b, c]);
            tris.push([a, c, d]);
        }
    }
    let nd = disk.len();
    let mut v = Vec::with_capacity(nd * (axial + 1));
    for k in 0..=axial {
        let z = height * (k as f64 / axial as f64 - 0.5);
        v.extend(disk.iter().map(|&(x, y)| Vector3::new(x, y, z)));
    }
    let mut t = Vec::with_capacity(3 * tris.len() * axial);
    for k in 0..axial {
        for tri in &tris {
            // Sorting by global index makes neighbouring prisms agree on the
            // diagonal of every shared quad.
            let mut s = *tri;
            s.sort_unstable();
            let [a, b, c] = s.map(|i| i + k * nd);
            let [a2, b2, c2] = [a + nd, b + nd, c + nd];
            t.push([a, b, c, a2]);
            t.push([b, c, a2, b2]);
            t.push([c, a2, b2, c2]);
        }
    }
    Mesh::new(v, Elements::Tetrahedra(t))
}

pub fn icosphere(subdivisions: usize, radius: f64) -> Result<Mesh, MeshError> {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vector3<f64>> = [
        [-1.0, p, 0.0],
        [1.0, p, 0.0],
        [-1.0, -p, 0.0],
        [1.0, -p, 0.0],
        [0.0, -1.0, p],
        [0.0, 1.0, p],
        [0.0, -1.0, -p],
        [0.0, 1.0, -p],
        [p, 0.0, -1.0],
        [p, 0.0, 1.0],
        [-p, 0.0, -1.0],
        [-p, 0.0, 1.0],
    ]
    .iter()
    .map(|c| Vector3::new(c[0], c[1], c[2]).normalize())
    .collect();
    let mut t: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(t.len() * 4);
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vector3<f64>>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        for &[a, b, c] in &t {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        t = next;
    }
    for x in &mut v {
        *x *= radius;
    }
    Mesh::new(v, Elements::Triangles(t))
}
