//! Marching cubes over a [`TsdfGrid`].
//!
//! The 256-entry triangle table is derived at first use instead of being
//! transcribed: for each corner sign pattern, iso-line segments are formed on
//! the six cube faces (ambiguous faces always separate the inside corners),
//! chained into closed loops and fan-triangulated. Because the face rule only
//! looks at that face's four corners, neighbouring cubes agree on shared
//! faces and the extracted surface is closed.

use std::collections::HashMap;
use std::sync::OnceLock;

use super::mesh::TriangleMesh;
use super::tsdf::TsdfGrid;
use crate::error::Result;
use crate::math::Vec3;

/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
const fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as corner pairs.
const EDGES: [[usize; 2]; 12] = [
    [0, 1], [2, 3], [4, 5], [6, 7], // along x
    [0, 2], [1, 3], [4, 6], [5, 7], // along y
    [0, 4], [1, 5], [2, 6], [3, 7], // along z
];

fn edge_between(a: usize, b: usize) -> usize {
    EDGES
        .iter()
        .position(|e| (e[0] == a && e[1] == b) || (e[0] == b && e[1] == a))
        .expect("corners share an edge")
}

/// Face corner cycles, counter-clockwise seen from outside the cube.
fn face_cycles() -> Vec<[usize; 4]> {
    let mut faces = Vec::new();
    for axis in 0..3 {
        for side in 0..2 {
            let mut corners: Vec<usize> = (0..8).filter(|&c| corner_offset(c)[axis] == side).collect();
            // Order cyclically: swap the last two of the bit-ordered list.
            corners.swap(2, 3);
            let p = |c: usize| {
                let o = corner_offset(c);
                Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64)
            };
            let n = (p(corners[1]) - p(corners[0])).cross(p(corners[2]) - p(corners[1]));
            let outward = if side == 1 { 1.0 } else { -1.0 };
            if n[axis] * outward < 0.0 {
                corners.reverse();
            }
            faces.push([corners[0], corners[1], corners[2], corners[3]]);
        }
    }
    faces
}

/// Triangles (as edge-index triples) for each of the 256 cases; bit `c` of
/// the case index is set when corner `c` is inside (below the iso value).
fn triangle_table() -> &'static Vec<Vec<[usize; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = face_cycles();
        let mut table: Vec<Vec<[usize; 3]>> = (0..256).map(|case| loops_to_triangles(case, &faces)).collect();
        // Orient so normals point from inside to outside: with only corner 0
        // inside the normal must point toward +(1, 1, 1).
        let tri = table[1][0];
        let mid = |e: usize| {
            let [a, b] = EDGES[e];
            let (pa, pb) = (corner_offset(a), corner_offset(b));
            Vec3::new(
                (pa[0] + pb[0]) as f64 * 0.5,
                (pa[1] + pb[1]) as f64 * 0.5,
                (pa[2] + pb[2]) as f64 * 0.5,
            )
        };
        let n = (mid(tri[1]) - mid(tri[0])).cross(mid(tri[2]) - mid(tri[0]));
        if n.dot(Vec3::ONE) < 0.0 {
            for tris in &mut table {
                for t in tris.iter_mut() {
                    t.swap(1, 2);
                }
            }
        }
        table
    })
}

fn loops_to_triangles(case: usize, faces: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    // next[edge] = edge that follows it on the iso-contour.
    let mut next: HashMap<usize, usize> = HashMap::new();
    for f in faces {
        let crossing = |k: usize| inside(f[k]) != inside(f[(k + 1) % 4]);
        let entries: Vec<usize> = (0..4).filter(|&k| crossing(k) && !inside(f[k])).collect();
        for &k in &entries {
            // Walk forward to the matching exit edge.
            let mut m = (k + 1) % 4;
            while !(crossing(m) && inside(f[m])) {
                m = (m + 1) % 4;
            }
            let e_in = edge_between(f[k], f[(k + 1) % 4]);
            let e_out = edge_between(f[m], f[(m + 1) % 4]);
            next.insert(e_in, e_out);
        }
    }
    let mut starts: Vec<usize> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for s in starts {
        if used[s] {
            continue;
        }
        let mut lp = vec![s];
        used[s] = true;
        let mut e = next[&s];
        while e != s {
            used[e] = true;
            lp.push(e);
            e = next[&e];
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0], lp[i], lp[i + 1]]);
        }
    }
    tris
}

/// Extracts the `iso` level set. Vertices on shared lattice edges are welded
/// exactly; a grid without sign changes yields an empty mesh.
pub fn marching_cubes(grid: &TsdfGrid, iso: f64) -> Result<TriangleMesh> {
    let table = triangle_table();
    let spec = grid.spec;
    let r = spec.resolution;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut vertex_of_edge: HashMap<(usize, usize), u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for k in 0..r - 1 {
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let mut vals = [0.0; 8];
                let mut case = 0usize;
                for (c, val) in vals.iter_mut().enumerate() {
                    let o = corner_offset(c);
                    *val = grid.extraction_value(spec.index(i + o[0], j + o[1], k + o[2]));
                    if *val < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                for tri in &table[case] {
                    let mut ids = [0u32; 3];
                    for (slot, &e) in tri.iter().enumerate() {
                        let [a, b] = EDGES[e];
                        let (oa, ob) = (corner_offset(a), corner_offset(b));
                        let pa = (i + oa[0], j + oa[1], k + oa[2]);
                        let pb = (i + ob[0], j + ob[1], k + ob[2]);
                        let axis = e / 4;
                        let key = (spec.index(pa.0, pa.1, pa.2), axis);
                        let id = *vertex_of_edge.entry(key).or_insert_with(|| {
                            let (va, vb) = (vals[a], vals[b]);
                            let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                            let p0 = spec.position(pa.0, pa.1, pa.2);
                            let p1 = spec.position(pb.0, pb.1, pb.2);
                            vertices.push(p0 + (p1 - p0) * t);
                            (vertices.len() - 1) as u32
                        });
                        ids[slot] = id;
                    }
                    triangles.push(ids);
                }
            }
        }
    }
    TriangleMesh::new(vertices, triangles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Aabb;
    use crate::meshproxy::tsdf::GridSpec;

    #[test]
    fn every_case_has_closed_loops() {
        let table = triangle_table();
        assert!(table[0].is_empty() && table[255].is_empty());
        for case in 1..255 {
            assert!(!table[case].is_empty(), "case {case}");
            // Complementary cases produce the same number of triangles when
            // no face is ambiguous.
        }
    }

    fn sphere_grid(res: usize, radius: f64) -> TsdfGrid {
        let spec = GridSpec::fit(&Aabb { min: Vec3::splat(-0.6), max: Vec3::splat(0.6) }, res, 0.05).unwrap();
        TsdfGrid::from_sdf(spec, 4.0, |p| p.length() - radius)
    }

    #[test]
    fn all_positive_grid_is_empty() {
        let spec = GridSpec::fit(&Aabb { min: Vec3::splat(-1.0), max: Vec3::splat(1.0) }, 8, 0.0).unwrap();
        let g = TsdfGrid::from_sdf(spec, 4.0, |_| 1.0);
        assert!(marching_cubes(&g, 0.0).unwrap().is_empty());
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let g = sphere_grid(24, 0.5);
        let m = marching_cubes(&g, 0.0).unwrap();
        assert!(m.triangle_count() > 100);
        // Closed 2-manifold: every undirected edge used exactly twice, and
        // each directed edge once.
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for t in m.triangles() {
            for e in 0..3 {
                *directed.entry((t[e], t[(e + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &c) in &directed {
            assert_eq!(c, 1);
            assert!(directed.contains_key(&(b, a)), "open edge {a}-{b}");
        }
        for (t, n) in m.face_normals().iter().enumerate() {
            let c = m.corners(t);
            let centroid = (c[0] + c[1] + c[2]) / 3.0;
            assert!(n.dot(centroid) > 0.0);
        }
    }

    #[test]
    fn half_space_gives_plane_aligned_with_gradient() {
        let spec = GridSpec::fit(&Aabb { min: Vec3::splat(-1.0), max: Vec3::splat(1.0) }, 12, 0.0).unwrap();
        let g = TsdfGrid::from_sdf(spec, 4.0, |p| p.y - 0.13);
        let m = marching_cubes(&g, 0.0).unwrap();
        assert!(!m.is_empty());
        for v in m.vertices() {
            assert!((v.y - 0.13).abs() < 1e-9);
        }
        for n in m.face_normals() {
            assert!((n.get() - Vec3::Y).length() < 1e-9);
        }
    }
}
