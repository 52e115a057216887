//! Reference ambient occlusion.

use std::f64::consts::PI;

use crate::camera::Ray;
use crate::math::{UnitVec3, Vec3};
use crate::meshproxy::MeshTracer;
use crate::rng::{domain, DetRng};

/// Uniform hemisphere direction about `n` from its own frame construction.
pub(crate) fn hemisphere_dir(n: Vec3, u1: f64, u2: f64) -> Vec3 {
    let helper = if n.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
    let t = n.cross(helper);
    let t = t / t.length();
    let b = n.cross(t);
    let sin = (1.0 - u1 * u1).max(0.0).sqrt();
    let phi = 2.0 * PI * u2;
    t * (sin * phi.cos()) + b * (sin * phi.sin()) + n * u1
}

/// Visible fraction of the hemisphere at `p` when the only occluder is an
/// analytic sphere, by brute-force sampling.
pub fn sphere_ao_reference(p: Vec3, n: Vec3, center: Vec3, radius: f64, samples: usize, rng: &DetRng) -> f64 {
    let oc = p - center;
    let c = oc.dot(oc) - radius * radius;
    let mut visible = 0usize;
    for s in 0..samples as u64 {
        let d = hemisphere_dir(n, rng.uniform(&[domain::AO, 77, s, 0]), rng.uniform(&[domain::AO, 77, s, 1]));
        let b = oc.dot(d);
        let disc = b * b - c;
        let hit = disc >= 0.0 && -b + disc.sqrt() > 0.0;
        if !hit {
            visible += 1;
        }
    }
    visible as f64 / samples as f64
}

/// `sqrt(1 - R^2 / D^2)`: visible fraction for a sphere whose silhouette
/// cone lies entirely above the horizon of `p`.
pub fn sphere_ao_analytic(p: Vec3, center: Vec3, radius: f64) -> f64 {
    let d2 = (p - center).length_squared();
    (1.0 - radius * radius / d2).max(0.0).sqrt()
}

/// Mesh ambient occlusion with plain (unstratified) uniform sampling.
pub fn mesh_ao(tracer: &MeshTracer, p: Vec3, n: Vec3, t_min: f64, samples: usize, rng: &DetRng, key: u64) -> f64 {
    let mut visible = 0usize;
    for s in 0..samples as u64 {
        let d = hemisphere_dir(n, rng.uniform(&[domain::AO, key, s, 0]), rng.uniform(&[domain::AO, key, s, 1]));
        let ray = Ray::with_t_min(p, UnitVec3::new_unchecked(d), t_min);
        if tracer.intersect(&ray).is_none() {
            visible += 1;
        }
    }
    visible as f64 / samples as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_matches_closed_form_for_resting_sphere() {
        let rng = DetRng::new(3);
        let center = Vec3::new(0.0, 0.5, 0.0);
        for d in [0.6, 1.0, 2.0] {
            let p = Vec3::new(d, 0.0, 0.0);
            let bf = sphere_ao_reference(p, Vec3::Y, center, 0.5, 200_000, &rng);
            let an = sphere_ao_analytic(p, center, 0.5);
            assert!((bf - an).abs() < 5e-3, "d {d}: {bf} vs {an}");
        }
    }

    #[test]
    fn hemisphere_directions_are_unit_and_above() {
        let rng = DetRng::new(4);
        let n = Vec3::new(0.3, -0.4, 0.866);
        let n = n / n.length();
        for s in 0..1000u64 {
            let d = hemisphere_dir(n, rng.uniform(&[s, 0]), rng.uniform(&[s, 1]));
            assert!((d.length() - 1.0).abs() < 1e-12 && d.dot(n) >= 0.0);
        }
    }
}
