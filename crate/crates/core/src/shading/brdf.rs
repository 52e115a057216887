//! Two-parameter reflectance model: Fresnel-weighted Lambertian diffuse plus
//! a GGX / Smith / Schlick specular lobe with a fixed dielectric `F0`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsplat::ROUGHNESS_MIN;
use crate::math::Vec3;

pub const F0: f64 = 0.04;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrdfKind {
    #[default]
    DisneyGgx,
    /// Pure `a / pi`, used by analytic identities.
    Lambert,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Material {
    pub albedo: [f64; 3],
    pub roughness: f64,
}

impl Material {
    pub fn new(albedo: [f64; 3], roughness: f64) -> Result<Self> {
        if !albedo.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(Error::InvalidInput(format!("albedo {albedo:?} outside [0, 1]")));
        }
        if !(ROUGHNESS_MIN..=1.0).contains(&roughness) {
            return Err(Error::InvalidInput(format!("roughness {roughness} outside [{ROUGHNESS_MIN}, 1]")));
        }
        Ok(Material { albedo, roughness })
    }

    /// Clamps into the valid ranges.
    pub fn clamped(albedo: [f64; 3], roughness: f64) -> Self {
        Material { albedo: albedo.map(|a| a.clamp(0.0, 1.0)), roughness: roughness.clamp(ROUGHNESS_MIN, 1.0) }
    }
}

/// BRDF value with its derivatives. Albedo only enters the diffuse term, so
/// `df_dalbedo[c]` is `d f[c] / d a[c]`; the specular lobe is grey, so one
/// roughness derivative serves every channel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BrdfSample {
    pub f: [f64; 3],
    pub df_dalbedo: [f64; 3],
    pub df_droughness: f64,
}

#[inline]
fn fresnel_weight(c: f64) -> f64 {
    1.0 - (1.0 - F0) * (1.0 - c).powi(5)
}

#[inline]
fn smith_g1(c: f64, alpha: f64) -> (f64, f64) {
    let a2 = alpha * alpha;
    let s = (a2 + (1.0 - a2) * c * c).sqrt();
    let q = c + s;
    let g = 2.0 * c / q;
    let ds = alpha * (1.0 - c * c) / s;
    (g, -2.0 * c * ds / (q * q))
}

/// GGX distribution and its derivative in `alpha` for `x = (n.h)^2`.
#[inline]
fn ggx_d(x: f64, alpha: f64) -> (f64, f64) {
    let a2 = alpha * alpha;
    let k = x * (a2 - 1.0) + 1.0;
    let d = a2 / (PI * k * k);
    (d, 2.0 * alpha / (PI * k * k) * (1.0 - 2.0 * a2 * x / k))
}

pub fn brdf_eval(m: &Material, n: Vec3, wi: Vec3, wo: Vec3) -> [f64; 3] {
    brdf_eval_grad(BrdfKind::DisneyGgx, m, n, wi, wo).f
}

pub fn brdf_eval_kind(kind: BrdfKind, m: &Material, n: Vec3, wi: Vec3, wo: Vec3) -> [f64; 3] {
    brdf_eval_grad(kind, m, n, wi, wo).f
}

/// Value and derivatives; zero when either direction is below the surface.
pub fn brdf_eval_grad(kind: BrdfKind, m: &Material, n: Vec3, wi: Vec3, wo: Vec3) -> BrdfSample {
    let ci = n.dot(wi);
    let co = n.dot(wo);
    if ci <= 0.0 || co <= 0.0 {
        return BrdfSample::default();
    }
    let (ci, co) = (ci.min(1.0), co.min(1.0));
    let diffuse = match kind {
        BrdfKind::Lambert => 1.0 / PI,
        BrdfKind::DisneyGgx => fresnel_weight(ci) * fresnel_weight(co) / PI,
    };
    let (spec, dspec) = match kind {
        BrdfKind::Lambert => (0.0, 0.0),
        BrdfKind::DisneyGgx => {
            let h = wi + wo;
            let h = h / h.length();
            let nh = n.dot(h).clamp(0.0, 1.0);
            let ho = h.dot(wo).clamp(0.0, 1.0);
            let alpha = m.roughness * m.roughness;
            let (d, dd) = ggx_d(nh * nh, alpha);
            let (gi, dgi) = smith_g1(ci, alpha);
            let (go, dgo) = smith_g1(co, alpha);
            let f = F0 + (1.0 - F0) * (1.0 - ho).powi(5);
            let norm = f / (4.0 * ci * co);
            let g = gi * go;
            let dg = dgi * go + gi * dgo;
            (d * g * norm, (dd * g + d * dg) * norm * 2.0 * m.roughness)
        }
    };
    BrdfSample {
        f: m.albedo.map(|a| a * diffuse + spec),
        df_dalbedo: [diffuse; 3],
        df_droughness: dspec,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshproxy::uniform_hemisphere;
    use crate::rng::DetRng;
    use crate::UnitVec3;

    fn rand_unit(rng: &DetRng, key: u64) -> Vec3 {
        let v = Vec3::new(rng.normal(&[key, 0]), rng.normal(&[key, 1]), rng.normal(&[key, 2]));
        v / v.length()
    }

    fn flip_into(n: Vec3, v: Vec3) -> Vec3 {
        if n.dot(v) < 0.0 {
            -v
        } else {
            v
        }
    }

    #[test]
    fn normal_incidence_diffuse_is_one_over_pi() {
        let m = Material::new([1.0; 3], 1.0).unwrap();
        let s = brdf_eval_grad(BrdfKind::DisneyGgx, &m, Vec3::Z, Vec3::Z, Vec3::Z);
        assert_eq!(s.df_dalbedo[0], 1.0 / PI);
        assert!(s.f[0] > 1.0 / PI);
    }

    #[test]
    fn reciprocal_and_zero_below_horizon() {
        let rng = DetRng::new(1);
        for i in 0..500u64 {
            let n = rand_unit(&rng, 3 * i);
            let wi = flip_into(n, rand_unit(&rng, 3 * i + 1));
            let wo = flip_into(n, rand_unit(&rng, 3 * i + 2));
            let m = Material::clamped([rng.uniform(&[i, 9]), 0.5, 0.9], rng.uniform(&[i, 10]));
            let a = brdf_eval(&m, n, wi, wo);
            let b = brdf_eval(&m, n, wo, wi);
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-12 * a[c].abs().max(1.0));
                assert!(a[c] >= 0.0);
            }
            assert_eq!(brdf_eval(&m, n, -wi, wo), [0.0; 3]);
            assert_eq!(brdf_eval(&m, n, wi, -wo), [0.0; 3]);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let rng = DetRng::new(2);
        for i in 0..200u64 {
            let n = rand_unit(&rng, 3 * i);
            let wi = flip_into(n, rand_unit(&rng, 3 * i + 1));
            let wo = flip_into(n, rand_unit(&rng, 3 * i + 2));
            let a = [0.2, 0.5, 0.8];
            let r = 0.1 + 0.85 * rng.uniform(&[i, 7]);
            let m = Material { albedo: a, roughness: r };
            let s = brdf_eval_grad(BrdfKind::DisneyGgx, &m, n, wi, wo);
            let h = 1e-6;
            let fp = brdf_eval(&Material { albedo: a, roughness: r + h }, n, wi, wo);
            let fm = brdf_eval(&Material { albedo: a, roughness: r - h }, n, wi, wo);
            let fd = (fp[0] - fm[0]) / (2.0 * h);
            assert!((fd - s.df_droughness).abs() <= 1e-6 * fd.abs().max(1.0), "r {r}: fd {fd} vs {}", s.df_droughness);
            for c in 0..3 {
                let mut ap = a;
                ap[c] += h;
                let fd = (brdf_eval(&Material { albedo: ap, roughness: r }, n, wi, wo)[c] - s.f[c]) / h;
                assert!((fd - s.df_dalbedo[c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rough_white_furnace_stays_below_one() {
        // Uniform hemisphere sampling is only low-variance for wide lobes.
        let rng = DetRng::new(3);
        let n_samples = 1 << 16;
        for i in 0..8u64 {
            let n = UnitVec3::new_unchecked(rand_unit(&rng, i));
            let wo = uniform_hemisphere(n, rng.uniform(&[i, 5]), rng.uniform(&[i, 6]));
            let m = Material::clamped([1.0; 3], 0.4 + 0.6 * rng.uniform(&[i, 7]));
            let mut sum = 0.0;
            for s in 0..n_samples {
                let wi = uniform_hemisphere(n, rng.uniform(&[100 + i, s, 0]), rng.uniform(&[100 + i, s, 1]));
                sum += brdf_eval(&m, n.get(), wi.get(), wo.get())[0] * n.get().dot(wi.get()) * 2.0 * PI;
            }
            let est = sum / n_samples as f64;
            assert!(est <= 1.05 && est > 0.0, "draw {i}: {est}");
        }
    }

    #[test]
    fn lambert_kind_is_constant() {
        let m = Material::new([0.3, 0.6, 0.9], 0.2).unwrap();
        let wi = Vec3::new(0.6, 0.0, 0.8);
        let f = brdf_eval_kind(BrdfKind::Lambert, &m, Vec3::Z, wi, Vec3::Z);
        for c in 0..3 {
            assert!((f[c] - m.albedo[c] / PI).abs() < 1e-15);
        }
        assert!(Material::new([1.1, 0.0, 0.0], 0.5).is_err());
        assert!(Material::new([0.5; 3], 0.01).is_err());
    }
}
