use std::f64::consts::PI;

use super::mesh::TriangleMesh;
use crate::error::{Error, Result};
use crate::math::{local_to_world, orthonormal_basis, UnitVec3, Vec3};
use crate::rng::{domain, DetRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceSample {
    pub point: Vec3,
    pub normal: UnitVec3,
    /// Outgoing query direction, in the hemisphere of `normal`.
    pub dir: UnitVec3,
    pub tri: usize,
}

/// Uniform direction on the hemisphere around `n` from two uniforms.
#[inline]
pub fn uniform_hemisphere(n: UnitVec3, u1: f64, u2: f64) -> UnitVec3 {
    let z = u1;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    let (t, b) = orthonormal_basis(n);
    let d = local_to_world(n, t, b, Vec3::new(r * phi.cos(), r * phi.sin(), z));
    UnitVec3::new_unchecked(d / d.length())
}

/// Picks `n_samples` surface points and outgoing directions for the
/// radiance residual at optimization step `iteration`.
///
/// Triangles are drawn uniformly over indices unless `area_weighted`; points
/// are uniform within the triangle (square-root barycentrics) and directions
/// uniform over the hemisphere of the face normal.
pub fn sample_surface(
    mesh: &TriangleMesh,
    n_samples: usize,
    rng: &DetRng,
    iteration: u64,
    area_weighted: bool,
) -> Result<Vec<SurfaceSample>> {
    if mesh.is_empty() {
        return Err(Error::EmptyMesh("cannot sample an empty mesh".into()));
    }
    let cdf: Option<Vec<f64>> = area_weighted.then(|| {
        let mut acc = 0.0;
        (0..mesh.triangle_count())
            .map(|t| {
                acc += mesh.triangle_area(t);
                acc
            })
            .collect()
    });
    let samples = (0..n_samples)
        .map(|i| {
            let key = |dim: u64| [domain::SURFACE, iteration, i as u64, dim];
            let tri = match &cdf {
                None => rng.below(&key(0), mesh.triangle_count()),
                Some(cdf) => {
                    let target = rng.uniform(&key(0)) * cdf[cdf.len() - 1];
                    cdf.partition_point(|&c| c <= target).min(cdf.len() - 1)
                }
            };
            let [a, b, c] = mesh.corners(tri);
            let s = rng.uniform(&key(1)).sqrt();
            let r2 = rng.uniform(&key(2));
            let point = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
            let normal = mesh.face_normals()[tri];
            let dir = uniform_hemisphere(normal, rng.uniform(&key(3)), rng.uniform(&key(4)));
            SurfaceSample { point, normal, dir, tri }
        })
        .collect();
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_triangles() -> TriangleMesh {
        TriangleMesh::new(
            vec![Vec3::ZERO, Vec3::X, Vec3::Y, Vec3::new(5.0, 0.0, 0.0), Vec3::new(5.0, 0.0, 3.0), Vec3::new(5.0, 3.0, 0.0)],
            vec![[0, 1, 2], [3, 5, 4]],
        )
        .unwrap()
    }

    #[test]
    fn samples_lie_on_their_triangle_and_face_outward() {
        let m = two_triangles();
        let rng = DetRng::new(1);
        for s in sample_surface(&m, 2000, &rng, 0, false).unwrap() {
            assert!(s.dir.dot(*s.normal) >= 0.0);
            let [a, _, _] = m.corners(s.tri);
            assert!((s.point - a).dot(*s.normal).abs() < 1e-6);
        }
    }

    #[test]
    fn index_uniform_vs_area_weighted() {
        let m = two_triangles();
        let rng = DetRng::new(2);
        let count = |aw| {
            sample_surface(&m, 4000, &rng, 3, aw).unwrap().iter().filter(|s| s.tri == 1).count() as f64 / 4000.0
        };
        // Triangle 1 has 9x the area of triangle 0.
        assert!((count(false) - 0.5).abs() < 0.05);
        assert!((count(true) - 0.9).abs() < 0.05);
    }

    #[test]
    fn empty_mesh_errors() {
        assert!(sample_surface(&TriangleMesh::empty(), 1, &DetRng::new(0), 0, false).is_err());
    }
}
