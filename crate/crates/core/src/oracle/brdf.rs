//! Reference reflectance for the path tracer, written in the angle form
//! (GGX `D` with `tan`, Smith `G1 = 1 / (1 + Lambda)`) so it shares no code
//! with the renderer's implementation.

use std::f64::consts::PI;

use crate::math::Vec3;
use crate::shading::BrdfKind;

const F0: f64 = 0.04;

fn schlick(cos: f64) -> f64 {
    F0 + (1.0 - F0) * (1.0 - cos).powi(5)
}

fn lambda(cos: f64, alpha: f64) -> f64 {
    let tan2 = (1.0 - cos * cos).max(0.0) / (cos * cos);
    0.5 * (-1.0 + (1.0 + alpha * alpha * tan2).sqrt())
}

pub fn reference_brdf(kind: BrdfKind, albedo: [f64; 3], roughness: f64, n: Vec3, wi: Vec3, wo: Vec3) -> [f64; 3] {
    let cos_i = n.dot(wi);
    let cos_o = n.dot(wo);
    if cos_i <= 0.0 || cos_o <= 0.0 {
        return [0.0; 3];
    }
    if kind == BrdfKind::Lambert {
        return albedo.map(|a| a / PI);
    }
    // Diffuse scaled by one minus the Fresnel reflectance of each side
    // relative to a perfect dielectric at normal incidence.
    let diffuse_scale = (1.0 - schlick(cos_i) + F0) * (1.0 - schlick(cos_o) + F0);
    let half = (wi + wo) / (wi + wo).length();
    let cos_h = n.dot(half).clamp(1e-12, 1.0);
    let alpha = roughness * roughness;
    let tan2_h = (1.0 - cos_h * cos_h).max(0.0) / (cos_h * cos_h);
    let d = alpha * alpha / (PI * cos_h.powi(4) * (alpha * alpha + tan2_h).powi(2));
    let g = 1.0 / (1.0 + lambda(cos_i.min(1.0), alpha)) * 1.0 / (1.0 + lambda(cos_o.min(1.0), alpha));
    let spec = d * g * schlick(half.dot(wo).clamp(0.0, 1.0)) / (4.0 * cos_i * cos_o);
    albedo.map(|a| a / PI * diffuse_scale + spec)
}
