//! Seeding surfels on a known mesh.

use serde::{Deserialize, Serialize};

use super::sh::coeff_count;
use super::{roughness_logit, Gaussian2D, GaussianSet};
use crate::error::{Error, Result};
use crate::math::{logit, Vec3};
use crate::meshproxy::TriangleMesh;

/// Unit quaternion `(w, x, y, z)` whose rotation has columns `(tu, tv, n)`.
pub fn quat_from_frame(tu: Vec3, tv: Vec3, n: Vec3) -> [f64; 4] {
    // Rotation matrix entries m[row][col].
    let m = [[tu.x, tv.x, n.x], [tu.y, tv.y, n.y], [tu.z, tv.z, n.z]];
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
    } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
        let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
        [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
    } else if m[1][1] > m[2][2] {
        let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
        [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
    } else {
        let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
        [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
    };
    let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / len)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedOptions {
    /// Target edge length of the sub-triangles that each get one surfel.
    pub spacing: f64,
    /// Surfel scale as a fraction of `spacing`.
    pub scale_factor: f64,
    pub opacity: f64,
    pub albedo: f64,
    pub roughness: f64,
}

impl Default for SeedOptions {
    fn default() -> Self {
        SeedOptions { spacing: 0.05, scale_factor: 0.5, opacity: 0.99, albedo: 0.5, roughness: 0.5 }
    }
}

/// One isotropic surfel per sub-triangle of a uniform subdivision of every
/// face, lying in the face plane. SH colors start at 0.5 grey.
pub fn seed_on_mesh(mesh: &TriangleMesh, sh_degree: usize, opts: &SeedOptions) -> Result<GaussianSet> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh("cannot seed surfels on an empty mesh".into()));
    }
    if !(opts.spacing > 0.0 && opts.scale_factor > 0.0) || !(0.0..1.0).contains(&opts.opacity) {
        return Err(Error::Config("seed spacing/scale must be positive and opacity in (0, 1)".into()));
    }
    let mut set = GaussianSet::new(sh_degree)?;
    let log_s = (opts.spacing * opts.scale_factor).ln();
    let template = Gaussian2D {
        mu: Vec3::ZERO,
        quat: [1.0, 0.0, 0.0, 0.0],
        log_su: log_s,
        log_sv: log_s,
        opacity_logit: logit(opts.opacity),
        sh: vec![[0.0; 3]; coeff_count(sh_degree)],
        albedo_logit: [logit(opts.albedo); 3],
        roughness_logit: roughness_logit(opts.roughness),
    };
    for tri in 0..mesh.triangle_count() {
        let [a, b, c] = mesh.corners(tri);
        let n = mesh.face_normals()[tri].get();
        let e = b - a;
        let tu = e / e.length();
        let tv = n.cross(tu);
        let quat = quat_from_frame(tu, tv, n);
        let longest = (b - a).length().max((c - b).length()).max((a - c).length());
        let m = (longest / opts.spacing).ceil().max(1.0) as usize;
        let mf = m as f64;
        let at = |i: usize, j: usize| a + (b - a) * (i as f64 / mf) + (c - a) * (j as f64 / mf);
        for i in 0..m {
            for j in 0..m - i {
                // Upright sub-triangle.
                let cen = (at(i, j) + at(i + 1, j) + at(i, j + 1)) / 3.0;
                set.push(&Gaussian2D { mu: cen, quat, ..template.clone() })?;
                if i + j + 1 < m {
                    let cen = (at(i + 1, j) + at(i, j + 1) + at(i + 1, j + 1)) / 3.0;
                    set.push(&Gaussian2D { mu: cen, quat, ..template.clone() })?;
                }
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::blend::frame_from_quat;

    #[test]
    fn quat_round_trips_frames() {
        let frames = [
            (Vec3::X, Vec3::Y, Vec3::Z),
            (-Vec3::X, Vec3::Y, -Vec3::Z),
            (Vec3::Z, Vec3::X, Vec3::Y),
            (Vec3::Y, -Vec3::X, Vec3::Z),
        ];
        for (tu, tv, n) in frames {
            let (a, b, c) = frame_from_quat(quat_from_frame(tu, tv, n));
            assert!((a - tu).length() < 1e-12 && (b - tv).length() < 1e-12 && (c - n).length() < 1e-12);
        }
    }

    #[test]
    fn seeds_lie_on_faces_with_face_normals() {
        let mesh = TriangleMesh::new(
            vec![Vec3::ZERO, Vec3::X, Vec3::new(1.0, 0.0, 1.0), Vec3::Z],
            vec![[0, 2, 1], [0, 3, 2]],
        )
        .unwrap();
        let set = seed_on_mesh(&mesh, 1, &SeedOptions { spacing: 0.25, ..Default::default() }).unwrap();
        // The diagonal (length sqrt 2) sets a 6x6 subdivision per face.
        assert_eq!(set.len(), 72);
        for i in 0..set.len() {
            let g = set.get(i);
            assert!(g.mu.y.abs() < 1e-12);
            let (_, _, n) = frame_from_quat(g.quat);
            assert!((n - Vec3::Y).length() < 1e-12);
        }
    }
}
