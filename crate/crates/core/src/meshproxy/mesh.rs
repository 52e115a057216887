use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::bvh::Bvh;
use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::math::{Aabb, UnitVec3, Vec3};

/// Triangles with an area below this are dropped on construction.
const MIN_AREA: f64 = 1e-14;
/// Möller–Trumbore determinant epsilon.
const MT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    face_normals: Vec<UnitVec3>,
}

impl TriangleMesh {
    /// Validates indices and drops zero-area triangles. Face normals follow
    /// the counter-clockwise winding `(v1 - v0) x (v2 - v0)`.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if let Some(v) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("vertex {v} is not finite")));
        }
        let n = vertices.len() as u32;
        let mut kept = Vec::with_capacity(triangles.len());
        let mut normals = Vec::with_capacity(triangles.len());
        for (i, t) in triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= n) {
                return Err(Error::InvalidInput(format!("triangle {i} references a missing vertex")));
            }
            let [a, b, c] = t.map(|k| vertices[k as usize]);
            let cr = (b - a).cross(c - a);
            if 0.5 * cr.length() <= MIN_AREA {
                continue;
            }
            kept.push(*t);
            normals.push(UnitVec3::new(cr)?);
        }
        Ok(TriangleMesh { vertices, triangles: kept, face_normals: normals })
    }

    pub fn empty() -> Self {
        TriangleMesh { vertices: Vec::new(), triangles: Vec::new(), face_normals: Vec::new() }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn face_normals(&self) -> &[UnitVec3] {
        &self.face_normals
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    #[inline]
    pub fn corners(&self, tri: usize) -> [Vec3; 3] {
        self.triangles[tri].map(|k| self.vertices[k as usize])
    }

    pub fn triangle_area(&self, tri: usize) -> f64 {
        let [a, b, c] = self.corners(tri);
        0.5 * (b - a).cross(c - a).length()
    }

    pub fn triangle_bounds(&self) -> Vec<Aabb> {
        (0..self.triangles.len()).map(|t| Aabb::from_points(self.corners(t))).collect()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter().copied())
    }

    /// Concatenates meshes, offsetting indices.
    pub fn merge(parts: &[TriangleMesh]) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for m in parts {
            let base = vertices.len() as u32;
            vertices.extend_from_slice(&m.vertices);
            triangles.extend(m.triangles.iter().map(|t| t.map(|k| k + base)));
        }
        TriangleMesh::new(vertices, triangles)
    }

    /// SHA-256 over vertex and index bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.vertices {
            for c in v.to_array() {
                h.update(c.to_le_bytes());
            }
        }
        for t in &self.triangles {
            for k in t {
                h.update(k.to_le_bytes());
            }
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 24);
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Reads vertices and faces from ASCII OBJ; polygons are fan-triangulated
    /// and texture/normal indices ignored.
    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, what: &str| Error::InvalidInput(format!("{}:{}: {what}", path.display(), line + 1));
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it.take(3).map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad(ln, "bad vertex"))?;
                    if c.len() != 3 {
                        return Err(bad(ln, "vertex needs 3 coordinates"));
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for tok in it {
                        let first = tok.split('/').next().unwrap_or("");
                        let k: i64 = first.parse().map_err(|_| bad(ln, "bad face index"))?;
                        let k = if k < 0 { vertices.len() as i64 + k } else { k - 1 };
                        if k < 0 {
                            return Err(bad(ln, "face index out of range"));
                        }
                        idx.push(k as u32);
                    }
                    if idx.len() < 3 {
                        return Err(bad(ln, "face needs at least 3 vertices"));
                    }
                    for i in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[i], idx[i + 1]]);
                    }
                }
                _ => {}
            }
        }
        TriangleMesh::new(vertices, triangles)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshHit {
    pub t: f64,
    pub tri: usize,
    /// Barycentric weights of vertices 0 and 1; vertex 2 gets `1 - b0 - b1`.
    pub bary: (f64, f64),
    pub point: Vec3,
    pub normal: UnitVec3,
}

/// Möller–Trumbore. Returns `(t, w1, w2)` where `w1`, `w2` weight the second
/// and third vertices.
#[inline]
pub fn intersect_triangle(origin: Vec3, dir: Vec3, v: &[Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = v[1] - v[0];
    let e2 = v[2] - v[0];
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < MT_EPS {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - v[0];
    let w1 = s.dot(p) * inv;
    if !(0.0..=1.0).contains(&w1) {
        return None;
    }
    let q = s.cross(e1);
    let w2 = dir.dot(q) * inv;
    if w2 < 0.0 || w1 + w2 > 1.0 {
        return None;
    }
    Some((e2.dot(q) * inv, w1, w2))
}

/// A mesh with its BVH, immutable after construction.
#[derive(Clone, Debug)]
pub struct MeshTracer {
    mesh: TriangleMesh,
    bvh: Bvh,
}

impl MeshTracer {
    pub fn new(mesh: TriangleMesh) -> Self {
        let bvh = build_bvh(&mesh);
        MeshTracer { mesh, bvh }
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn intersect(&self, ray: &Ray) -> Option<MeshHit> {
        ray_mesh_intersect(&self.bvh, &self.mesh, ray)
    }

    /// True when anything lies along the ray within `(t_min, t_max)`.
    pub fn occluded(&self, ray: &Ray, t_max: f64) -> bool {
        let mut hit = false;
        let (o, d) = (ray.origin, ray.dir.get());
        self.bvh.traverse(o, d, ray.t_min, t_max, |tri, _| {
            if let Some((t, _, _)) = intersect_triangle(o, d, &self.mesh.corners(tri)) {
                if t > ray.t_min && t < t_max {
                    hit = true;
                    return true;
                }
            }
            false
        });
        hit
    }
}

pub fn build_bvh(mesh: &TriangleMesh) -> Bvh {
    Bvh::build(&mesh.triangle_bounds())
}

/// Closest hit with `t > ray.t_min`; equal distances resolve to the lower
/// triangle index.
pub fn ray_mesh_intersect(bvh: &Bvh, mesh: &TriangleMesh, ray: &Ray) -> Option<MeshHit> {
    let (o, d) = (ray.origin, ray.dir.get());
    let mut best: Option<(f64, usize, f64, f64)> = None;
    bvh.traverse(o, d, ray.t_min, f64::INFINITY, |tri, t_max| {
        if let Some((t, w1, w2)) = intersect_triangle(o, d, &mesh.corners(tri)) {
            if t > ray.t_min && t <= *t_max {
                let better = match best {
                    None => true,
                    Some((bt, bi, _, _)) => t < bt || (t == bt && tri < bi),
                };
                if better {
                    best = Some((t, tri, w1, w2));
                    *t_max = t;
                }
            }
        }
        false
    });
    best.map(|(t, tri, w1, w2)| {
        let [a, b, c] = mesh.corners(tri);
        let b0 = 1.0 - w1 - w2;
        MeshHit {
            t,
            tri,
            bary: (b0, w1),
            point: a * b0 + b * w1 + c * w2,
            normal: mesh.face_normals()[tri],
        }
    })
}
