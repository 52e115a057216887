//! Exact ray/surfel intersection and front-to-back compositing, with the
//! hand-written backward pass used by both training stages.

use super::sh::{coeff_count, sh_basis};
use super::{roughness_from_logit, Gaussian2D, GaussianGrads, GaussianSet, GEOM_STRIDE, MAT_STRIDE, ROUGHNESS_MIN};
use crate::camera::{Camera, Ray};
use crate::error::Result;
use crate::exec;
use crate::image::ImageBuffer;
use crate::math::{sigmoid, Aabb, UnitVec3, Vec3};
use crate::meshproxy::Bvh;

/// Squared support radius in units of the surfel scale (3 sigma).
pub const CUTOFF_SQ: f64 = 9.0;
pub const WEIGHT_FLOOR: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
const PARALLEL_EPS: f64 = 1e-9;

#[inline]
pub fn gauss_value(u: f64, v: f64) -> f64 {
    let r2 = u * u + v * v;
    if r2 > CUTOFF_SQ {
        0.0
    } else {
        (-0.5 * r2).exp()
    }
}

/// Rotation frame `(t_u, t_v, n)` of a unit quaternion `(w, x, y, z)`.
#[inline]
pub fn frame_from_quat(q: [f64; 4]) -> (Vec3, Vec3, Vec3) {
    let [w, x, y, z] = q;
    (
        Vec3::new(1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z), 2.0 * (x * z - w * y)),
        Vec3::new(2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z + w * x)),
        Vec3::new(2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y)),
    )
}

/// Vector-Jacobian product of [`frame_from_quat`] at unit `q`.
fn frame_vjp(q: [f64; 4], dtu: Vec3, dtv: Vec3, dn: Vec3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = dtu.y * 2.0 * z - dtu.z * 2.0 * y - dtv.x * 2.0 * z + dtv.z * 2.0 * x + dn.x * 2.0 * y - dn.y * 2.0 * x;
    let dx = dtu.y * 2.0 * y + dtu.z * 2.0 * z + dtv.x * 2.0 * y - dtv.y * 4.0 * x + dtv.z * 2.0 * w + dn.x * 2.0 * z
        - dn.y * 2.0 * w
        - dn.z * 4.0 * x;
    let dy = -dtu.x * 4.0 * y + dtu.y * 2.0 * x - dtu.z * 2.0 * w + dtv.x * 2.0 * x + dtv.z * 2.0 * z + dn.x * 2.0 * w
        + dn.y * 2.0 * z
        - dn.z * 4.0 * y;
    let dz = -dtu.x * 4.0 * z + dtu.y * 2.0 * w + dtu.z * 2.0 * x - dtv.x * 2.0 * w - dtv.y * 4.0 * z
        + dtv.z * 2.0 * y
        + dn.x * 2.0 * x
        + dn.y * 2.0 * y;
    [dw, dx, dy, dz]
}

/// A surfel with its constrained quantities evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub mu: Vec3,
    pub quat: [f64; 4],
    pub quat_norm: f64,
    pub tu: Vec3,
    pub tv: Vec3,
    pub n: Vec3,
    pub su: f64,
    pub sv: f64,
    pub opacity: f64,
    pub albedo: [f64; 3],
    pub roughness: f64,
}

impl Surfel {
    fn from_raw(geom: &[f64], mat: &[f64]) -> Surfel {
        let q = [geom[3], geom[4], geom[5], geom[6]];
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let quat = q.map(|v| v / qn);
        let (tu, tv, n) = frame_from_quat(quat);
        Surfel {
            mu: Vec3::new(geom[0], geom[1], geom[2]),
            quat,
            quat_norm: qn,
            tu,
            tv,
            n,
            su: geom[7].exp(),
            sv: geom[8].exp(),
            opacity: sigmoid(geom[9]),
            albedo: [sigmoid(mat[0]), sigmoid(mat[1]), sigmoid(mat[2])],
            roughness: roughness_from_logit(mat[3]),
        }
    }

    pub fn from_gaussian(g: &Gaussian2D) -> Surfel {
        let geom = [g.mu.x, g.mu.y, g.mu.z, g.quat[0], g.quat[1], g.quat[2], g.quat[3], g.log_su, g.log_sv, g.opacity_logit];
        let mat = [g.albedo_logit[0], g.albedo_logit[1], g.albedo_logit[2], g.roughness_logit];
        Surfel::from_raw(&geom, &mat)
    }

    /// Box around the 3-sigma ellipse.
    pub fn bounds(&self) -> Aabb {
        let k = CUTOFF_SQ.sqrt();
        let half = Vec3::new(
            k * ((self.su * self.tu.x).powi(2) + (self.sv * self.tv.x).powi(2)).sqrt(),
            k * ((self.su * self.tu.y).powi(2) + (self.sv * self.tv.y).powi(2)).sqrt(),
            k * ((self.su * self.tu.z).powi(2) + (self.sv * self.tv.z).powi(2)).sqrt(),
        ) + Vec3::splat(1e-9);
        Aabb { min: self.mu - half, max: self.mu + half }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianHit {
    pub idx: usize,
    pub t: f64,
    pub u: f64,
    pub v: f64,
    /// `G(u, v)` before the opacity factor.
    pub g: f64,
    /// `opacity * G(u, v)`.
    pub weight: f64,
}

/// Intersects the surfel plane. `None` when the ray is parallel to it, the
/// hit is at or before `ray.t_min`, or the weight falls under 1/255.
#[inline]
pub fn ray_gaussian_hit(ray: &Ray, s: &Surfel) -> Option<(f64, f64, f64, f64)> {
    let d = ray.dir.get();
    let dn = d.dot(s.n);
    if dn.abs() < PARALLEL_EPS {
        return None;
    }
    let t = (s.mu - ray.origin).dot(s.n) / dn;
    if !(t > ray.t_min) {
        return None;
    }
    let r = ray.origin + d * t - s.mu;
    let u = r.dot(s.tu) / s.su;
    let v = r.dot(s.tv) / s.sv;
    let weight = s.opacity * gauss_value(u, v);
    if weight < WEIGHT_FLOOR {
        return None;
    }
    Some((t, u, v, weight))
}

/// Surfels with evaluated frames plus a BVH over their 3-sigma boxes.
#[derive(Clone, Debug)]
pub struct GaussianScene {
    pub surfels: Vec<Surfel>,
    pub sh_degree: usize,
    sh: Vec<f64>,
    bvh: Bvh,
}

impl GaussianScene {
    pub fn new(set: &GaussianSet) -> Result<Self> {
        set.validate()?;
        let surfels: Vec<Surfel> = (0..set.len())
            .map(|i| {
                Surfel::from_raw(
                    &set.geometry[i * GEOM_STRIDE..(i + 1) * GEOM_STRIDE],
                    &set.material[i * MAT_STRIDE..(i + 1) * MAT_STRIDE],
                )
            })
            .collect();
        let bounds: Vec<Aabb> = surfels.iter().map(Surfel::bounds).collect();
        Ok(GaussianScene { surfels, sh_degree: set.sh_degree, sh: set.sh.clone(), bvh: Bvh::build(&bounds) })
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn bounds(&self) -> Aabb {
        self.bvh.bounds()
    }

    fn sh_coeffs(&self, i: usize) -> &[f64] {
        let s = 3 * coeff_count(self.sh_degree);
        &self.sh[i * s..(i + 1) * s]
    }

    /// Every hit along the ray, sorted by `(t, index)`.
    pub fn collect_hits(&self, ray: &Ray) -> Vec<GaussianHit> {
        let mut hits = Vec::new();
        self.bvh.traverse(ray.origin, ray.dir.get(), ray.t_min, f64::INFINITY, |i, _| {
            if let Some((t, u, v, weight)) = ray_gaussian_hit(ray, &self.surfels[i]) {
                hits.push(GaussianHit { idx: i, t, u, v, g: weight / self.surfels[i].opacity, weight });
            }
            false
        });
        hits.sort_unstable_by(|a, b| a.t.total_cmp(&b.t).then(a.idx.cmp(&b.idx)));
        hits
    }
}

/// Composited per-ray quantities. When `valid` is false (`alpha == 0`) the
/// depth is `+inf` and normal/material carry placeholders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayBlend {
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
    pub normal: UnitVec3,
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub valid: bool,
}

impl RayBlend {
    fn empty(ray: &Ray) -> RayBlend {
        RayBlend {
            color: [0.0; 3],
            alpha: 0.0,
            depth: f64::INFINITY,
            normal: -ray.dir,
            albedo: [0.0; 3],
            roughness: 1.0,
            valid: false,
        }
    }
}

/// Upstream gradient on each [`RayBlend`] field.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayBlendGrad {
    pub color: [f64; 3],
    pub alpha: f64,
    pub depth: f64,
    pub normal: Vec3,
    pub albedo: [f64; 3],
    pub roughness: f64,
}

/// Forward state kept for the backward pass. Only composited hits are
/// stored (compositing stops once transmittance drops under 1e-4).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlendRecord {
    pub hits: Vec<GaussianHit>,
    /// Transmittance in front of each hit.
    pub trans: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// `+1` or `-1`: surfel normal flipped to face the ray origin.
    pub flips: Vec<f64>,
    /// Unnormalized composited normal.
    pub normal_sum: Vec3,
    pub view_dir: Vec3,
}

impl BlendRecord {
    /// `(gaussian index, w_i / alpha)` pairs: the splatting weights that
    /// produce the normalized depth/normal/material maps.
    pub fn normalized_weights(&self, alpha: f64) -> Vec<(u32, f64)> {
        if alpha <= 0.0 {
            return Vec::new();
        }
        self.hits.iter().zip(&self.trans).map(|(h, t)| (h.idx as u32, t * h.weight / alpha)).collect()
    }
}

/// Front-to-back compositing along `ray`; SH colors are evaluated at
/// `view_dir`.
pub fn blend_along_ray(scene: &GaussianScene, ray: &Ray, view_dir: Vec3) -> RayBlend {
    blend_recorded(scene, ray, view_dir).0
}

pub fn blend_recorded(scene: &GaussianScene, ray: &Ray, view_dir: Vec3) -> (RayBlend, BlendRecord) {
    let hits = scene.collect_hits(ray);
    let mut rec = BlendRecord { view_dir, ..Default::default() };
    if hits.is_empty() {
        return (RayBlend::empty(ray), rec);
    }
    let d = ray.dir.get();
    let basis = sh_basis(scene.sh_degree, view_dir);
    let nc = coeff_count(scene.sh_degree);
    let mut color = [0.0; 3];
    let mut albedo = [0.0; 3];
    let (mut depth, mut rough, mut normal) = (0.0, 0.0, Vec3::ZERO);
    let mut trans = 1.0;
    for h in hits {
        let s = &scene.surfels[h.idx];
        let coeffs = scene.sh_coeffs(h.idx);
        let mut c = [0.5; 3];
        for (k, b) in basis.iter().enumerate().take(nc) {
            for ch in 0..3 {
                c[ch] += b * coeffs[k * 3 + ch];
            }
        }
        let c = c.map(|v| v.max(0.0));
        let flip = if s.n.dot(d) > 0.0 { -1.0 } else { 1.0 };
        let w = trans * h.weight;
        for ch in 0..3 {
            color[ch] += w * c[ch];
            albedo[ch] += w * s.albedo[ch];
        }
        depth += w * h.t;
        rough += w * s.roughness;
        normal += s.n * (w * flip);
        rec.hits.push(h);
        rec.trans.push(trans);
        rec.colors.push(c);
        rec.flips.push(flip);
        trans *= 1.0 - h.weight;
        if trans < TRANSMITTANCE_EPS {
            break;
        }
    }
    let alpha = 1.0 - trans;
    rec.normal_sum = normal;
    let inv = 1.0 / alpha;
    let n = normal.normalized().unwrap_or(-ray.dir);
    let blend = RayBlend {
        color,
        alpha,
        depth: depth * inv,
        normal: n,
        albedo: albedo.map(|v| v * inv),
        roughness: rough * inv,
        valid: true,
    };
    (blend, rec)
}

/// Accumulates `d loss / d params` into `grads` given the upstream gradient
/// on a blend produced by [`blend_recorded`] for the same ray.
pub fn blend_backward(
    scene: &GaussianScene,
    ray: &Ray,
    rec: &BlendRecord,
    out: &RayBlend,
    up: &RayBlendGrad,
    grads: &mut GaussianGrads,
) {
    if rec.hits.is_empty() || !out.valid {
        return;
    }
    let d = ray.dir.get();
    let a = out.alpha;
    let inv_a = 1.0 / a;
    let m_len = rec.normal_sum.length();
    let d_m = if m_len > 0.0 {
        let nn = rec.normal_sum / m_len;
        (up.normal - nn * nn.dot(up.normal)) / m_len
    } else {
        Vec3::ZERO
    };
    let nh = rec.hits.len();
    // d loss / d w_i with every other weight held fixed.
    let g: Vec<f64> = (0..nh)
        .map(|i| {
            let h = &rec.hits[i];
            let s = &scene.surfels[h.idx];
            let c = rec.colors[i];
            let mut gi = up.alpha;
            for ch in 0..3 {
                gi += up.color[ch] * c[ch] + up.albedo[ch] * (s.albedo[ch] - out.albedo[ch]) * inv_a;
            }
            gi += up.depth * (h.t - out.depth) * inv_a;
            gi += up.roughness * (s.roughness - out.roughness) * inv_a;
            gi += d_m.dot(s.n * rec.flips[i]);
            gi
        })
        .collect();
    let basis = sh_basis(scene.sh_degree, rec.view_dir);
    let nc = coeff_count(scene.sh_degree);
    let sh_stride = 3 * nc;
    let mut behind = 0.0;
    for i in (0..nh).rev() {
        let h = &rec.hits[i];
        let s = &scene.surfels[h.idx];
        let t_i = rec.trans[i];
        let w = t_i * h.weight;
        let d_alpha = t_i * (g[i] - behind);
        behind = g[i] * h.weight + (1.0 - h.weight) * behind;

        // Color through SH (clamped channels pass no gradient).
        let sh_g = &mut grads.sh[h.idx * sh_stride..(h.idx + 1) * sh_stride];
        for ch in 0..3 {
            if rec.colors[i][ch] > 0.0 {
                let dc = w * up.color[ch];
                for k in 0..nc {
                    sh_g[k * 3 + ch] += basis[k] * dc;
                }
            }
        }
        // Material.
        let mat_g = &mut grads.material[h.idx * MAT_STRIDE..(h.idx + 1) * MAT_STRIDE];
        for ch in 0..3 {
            let al = s.albedo[ch];
            mat_g[ch] += w * inv_a * up.albedo[ch] * al * (1.0 - al);
        }
        let sr = (s.roughness - ROUGHNESS_MIN) / (1.0 - ROUGHNESS_MIN);
        mat_g[3] += w * inv_a * up.roughness * (1.0 - ROUGHNESS_MIN) * sr * (1.0 - sr);

        // Opacity and footprint.
        let geo = &mut grads.geometry[h.idx * GEOM_STRIDE..(h.idx + 1) * GEOM_STRIDE];
        geo[9] += d_alpha * h.g * s.opacity * (1.0 - s.opacity);
        let d_g = d_alpha * s.opacity;
        let du = -d_g * h.u * h.g;
        let dv = -d_g * h.v * h.g;
        let d_t = w * inv_a * up.depth;
        let d_n_flipped = d_m * w;

        let p = ray.origin + d * h.t;
        let r = p - s.mu;
        let dr = s.tu * (du / s.su) + s.tv * (dv / s.sv);
        let d_tu = r * (du / s.su);
        let d_tv = r * (dv / s.sv);
        geo[7] += -du * h.u;
        geo[8] += -dv * h.v;
        let dn_dot = d.dot(s.n);
        let dt_total = d_t + dr.dot(d);
        let d_mu = -dr + s.n * (dt_total / dn_dot);
        let d_n = d_n_flipped * rec.flips[i] + (s.mu - p) * (dt_total / dn_dot);
        geo[0] += d_mu.x;
        geo[1] += d_mu.y;
        geo[2] += d_mu.z;
        let dq_hat = frame_vjp(s.quat, d_tu, d_tv, d_n);
        let proj: f64 = (0..4).map(|k| s.quat[k] * dq_hat[k]).sum();
        for k in 0..4 {
            geo[3 + k] += (dq_hat[k] - s.quat[k] * proj) / s.quat_norm;
        }
    }
}

/// Per-pixel buffers from [`render_maps`]. Pixels with zero alpha hold 0 in
/// depth, normal and material.
#[derive(Clone, Debug)]
pub struct RenderMaps {
    pub color: ImageBuffer,
    pub alpha: ImageBuffer,
    pub depth: ImageBuffer,
    pub normal: ImageBuffer,
    pub albedo: ImageBuffer,
    pub roughness: ImageBuffer,
}

/// Blends the ray through every pixel center.
pub fn render_maps(camera: &Camera, scene: &GaussianScene) -> Result<RenderMaps> {
    let (w, h) = (camera.width, camera.height);
    let px = exec::map_indexed(w * h, |i| {
        let ray = camera.ray_for_pixel_center(i % w, i / w);
        blend_along_ray(scene, &ray, ray.dir.get())
    });
    let mut color = Vec::with_capacity(3 * w * h);
    let mut alpha = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut normal = Vec::with_capacity(3 * w * h);
    let mut albedo = Vec::with_capacity(3 * w * h);
    let mut rough = Vec::with_capacity(w * h);
    for b in &px {
        color.extend_from_slice(&b.color);
        alpha.push(b.alpha);
        if b.valid {
            depth.push(b.depth);
            normal.extend_from_slice(&b.normal.get().to_array());
            albedo.extend_from_slice(&b.albedo);
            rough.push(b.roughness);
        } else {
            depth.push(0.0);
            normal.extend_from_slice(&[0.0; 3]);
            albedo.extend_from_slice(&[0.0; 3]);
            rough.push(0.0);
        }
    }
    Ok(RenderMaps {
        color: ImageBuffer::from_data(w, h, 3, color)?,
        alpha: ImageBuffer::from_data(w, h, 1, alpha)?,
        depth: ImageBuffer::from_data(w, h, 1, depth)?,
        normal: ImageBuffer::from_data(w, h, 3, normal)?,
        albedo: ImageBuffer::from_data(w, h, 3, albedo)?,
        roughness: ImageBuffer::from_data(w, h, 1, rough)?,
    })
}

/// Integrates the surfels along an incident ray starting
/// `offset_factor * scene_extent` away from `origin`. Returns
/// `(color, alpha, depth)`; depth is `+inf` on a miss.
pub fn trace_gaussians(
    origin: Vec3,
    dir: UnitVec3,
    offset_factor: f64,
    scene_extent: f64,
    scene: &GaussianScene,
) -> ([f64; 3], f64, f64) {
    let ray = Ray::with_t_min(origin, dir, (offset_factor * scene_extent).max(0.0));
    let b = blend_along_ray(scene, &ray, dir.get());
    (b.color, b.alpha, b.depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::Gaussian2D;
    use crate::rng::DetRng;

    fn disk(mu: Vec3, quat: [f64; 4], s: (f64, f64), opacity_logit: f64, color: f64) -> Gaussian2D {
        Gaussian2D {
            mu,
            quat,
            log_su: s.0.ln(),
            log_sv: s.1.ln(),
            opacity_logit,
            sh: vec![[color / crate::gsplat::sh::SH_C0 - 0.5 / crate::gsplat::sh::SH_C0; 3]],
            albedo_logit: [0.0; 3],
            roughness_logit: 0.0,
        }
    }

    const UP: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    fn scene(gs: &[Gaussian2D], degree: usize) -> GaussianScene {
        GaussianScene::new(&GaussianSet::from_gaussians(degree, gs).unwrap()).unwrap()
    }

    fn down_ray(x: f64, y: f64) -> Ray {
        Ray::new(Vec3::new(x, y, 1.0), -UnitVec3::Z)
    }

    #[test]
    fn gauss_value_examples() {
        assert_eq!(gauss_value(0.0, 0.0), 1.0);
        assert!((gauss_value(1.0, 0.0) - 0.606_531).abs() < 1e-6);
        assert_eq!(gauss_value(3.0, 4.0), 0.0);
    }

    #[test]
    fn hit_at_center_and_scaled_offset() {
        let g = disk(Vec3::ZERO, UP, (1.0, 1.0), 2.0, 0.5);
        let s = Surfel::from_gaussian(&g);
        let (t, u, v, w) = ray_gaussian_hit(&down_ray(0.0, 0.0), &s).unwrap();
        assert!((t - 1.0).abs() < 1e-12 && u.abs() < 1e-12 && v.abs() < 1e-12);
        assert!((w - sigmoid(2.0)).abs() < 1e-12);

        let g2 = disk(Vec3::ZERO, UP, (2.0, 1.0), 2.0, 0.5);
        let (_, u, v, _) = ray_gaussian_hit(&down_ray(1.0, 0.0), &Surfel::from_gaussian(&g2)).unwrap();
        assert!((u - 0.5).abs() < 1e-12 && v.abs() < 1e-12);

        let in_plane = Ray::new(Vec3::new(-5.0, 0.0, 0.0), UnitVec3::X);
        assert!(ray_gaussian_hit(&in_plane, &s).is_none());
    }

    #[test]
    fn one_opaque_hit_and_two_layer_example() {
        // Opacity close enough to 1 that sigma*G rounds to 1.
        let g = disk(Vec3::ZERO, UP, (1.0, 1.0), 40.0, 0.3);
        let b = blend_along_ray(&scene(&[g.clone()], 0), &down_ray(0.0, 0.0), -Vec3::Z);
        assert_eq!(b.alpha, 1.0);
        assert!((b.color[0] - 0.3).abs() < 1e-12);
        assert!((b.depth - 1.0).abs() < 1e-12);

        let front = disk(Vec3::new(0.0, 0.0, 0.5), UP, (1.0, 1.0), 0.0, 0.2);
        let back = disk(Vec3::ZERO, UP, (1.0, 1.0), 40.0, 0.8);
        let b = blend_along_ray(&scene(&[back, front], 0), &down_ray(0.0, 0.0), -Vec3::Z);
        assert_eq!(b.alpha, 1.0);
        assert!((b.color[0] - (0.5 * 0.2 + 0.5 * 0.8)).abs() < 1e-12);
        assert!(b.normal.dot(Vec3::Z) > 0.999);
    }

    fn random_gaussians(rng: &DetRng, n: usize, degree: usize) -> Vec<Gaussian2D> {
        (0..n as u64)
            .map(|i| {
                let r = |k: u64| rng.uniform(&[i, k]) * 2.0 - 1.0;
                Gaussian2D {
                    mu: Vec3::new(r(0) * 0.3, r(1) * 0.3, r(2) * 0.5),
                    quat: [1.0 + r(3) * 0.3, r(4) * 0.4, r(5) * 0.4, r(6)],
                    log_su: -1.0 + 0.5 * r(7),
                    log_sv: -1.0 + 0.5 * r(8),
                    opacity_logit: 2.0 * r(9),
                    sh: (0..coeff_count(degree) as u64).map(|k| [r(20 + k), r(40 + k), r(60 + k)]).collect(),
                    albedo_logit: [r(10), r(11), r(12)],
                    roughness_logit: r(13),
                }
            })
            .collect()
    }

    /// Brute force over every surfel (no BVH), separately coded compositing.
    fn oracle_blend(gs: &[Gaussian2D], degree: usize, ray: &Ray) -> ([f64; 3], f64, f64) {
        // Parameters as stored (quaternions normalized on insertion).
        let set = GaussianSet::from_gaussians(degree, gs).unwrap();
        let gs: Vec<Gaussian2D> = (0..set.len()).map(|i| set.get(i)).collect();
        let mut hits: Vec<(f64, usize, f64)> = Vec::new();
        for (i, g) in gs.iter().enumerate() {
            let s = Surfel::from_gaussian(g);
            if let Some((t, _, _, w)) = ray_gaussian_hit(ray, &s) {
                hits.push((t, i, w));
            }
        }
        hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let (mut c, mut tr, mut dep) = ([0.0; 3], 1.0, 0.0);
        for (t, i, w) in hits {
            let col = crate::gsplat::sh::sh_eval(degree, &gs[i].sh, ray.dir.get());
            let wi = tr * w;
            for ch in 0..3 {
                c[ch] += wi * col[ch];
            }
            dep += wi * t;
            tr *= 1.0 - w;
            if tr < TRANSMITTANCE_EPS {
                break;
            }
        }
        (c, 1.0 - tr, dep)
    }

    #[test]
    fn matches_sequential_oracle_bitwise() {
        let rng = DetRng::new(11);
        let gs = random_gaussians(&rng, 20, 1);
        let sc = scene(&gs, 1);
        let mut hit_any = 0;
        for k in 0..400u64 {
            let o = Vec3::new(rng.uniform(&[99, k, 0]) - 0.5, rng.uniform(&[99, k, 1]) - 0.5, 2.0);
            let ray = Ray::new(o, UnitVec3::new(Vec3::new(0.05, -0.03, -1.0)).unwrap());
            let b = blend_along_ray(&sc, &ray, ray.dir.get());
            let (c, a, dep) = oracle_blend(&gs, 1, &ray);
            assert_eq!(b.alpha.to_bits(), a.to_bits());
            for ch in 0..3 {
                assert_eq!(b.color[ch].to_bits(), c[ch].to_bits());
            }
            if a > 0.0 {
                hit_any += 1;
                assert_eq!(b.depth.to_bits(), (dep * (1.0 / a)).to_bits());
            }
        }
        assert!(hit_any > 50);
    }

    #[test]
    fn permutation_invariant() {
        let rng = DetRng::new(3);
        let gs = random_gaussians(&rng, 20, 1);
        let mut rev = gs.clone();
        rev.reverse();
        let (a, b) = (scene(&gs, 1), scene(&rev, 1));
        for k in 0..100u64 {
            let o = Vec3::new(rng.uniform(&[5, k]) - 0.5, rng.uniform(&[6, k]) - 0.5, 2.0);
            let ray = Ray::new(o, -UnitVec3::Z);
            let (x, y) = (blend_along_ray(&a, &ray, -Vec3::Z), blend_along_ray(&b, &ray, -Vec3::Z));
            assert_eq!(x.alpha.to_bits(), y.alpha.to_bits());
            assert_eq!(x.color, y.color);
        }
    }

    #[test]
    fn alpha_monotone_in_opacity() {
        let rng = DetRng::new(4);
        let gs = random_gaussians(&rng, 12, 0);
        let ray = Ray::new(Vec3::new(0.02, 0.01, 2.0), -UnitVec3::Z);
        let base = blend_along_ray(&scene(&gs, 0), &ray, -Vec3::Z).alpha;
        for i in 0..gs.len() {
            let mut more = gs.clone();
            more[i].opacity_logit += 0.5;
            assert!(blend_along_ray(&scene(&more, 0), &ray, -Vec3::Z).alpha >= base - 1e-15);
        }
    }

    #[test]
    fn empty_scene_and_covering_disk_maps() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::ZERO, Vec3::Y, 0.6, 16, 12).unwrap();
        let empty = GaussianScene::new(&GaussianSet::new(0).unwrap()).unwrap();
        let m = render_maps(&cam, &empty).unwrap();
        assert!(m.alpha.data.iter().all(|&a| a == 0.0));

        let wall = disk(Vec3::ZERO, UP, (50.0, 50.0), 40.0, 0.5);
        let sc = scene(&[wall], 0);
        let m = render_maps(&cam, &sc).unwrap();
        for (i, &a) in m.alpha.data.iter().enumerate() {
            assert!(a > 0.999);
            let ray = cam.ray_for_pixel_center(i % 16, i / 16);
            assert!((m.depth.data[i] * ray.dir.z.abs() - 3.0).abs() < 1e-9);
            let b = blend_along_ray(&sc, &ray, ray.dir.get());
            assert_eq!(b.depth.to_bits(), m.depth.data[i].to_bits());
        }
    }

    #[test]
    fn trace_offset_contract() {
        let empty = GaussianScene::new(&GaussianSet::new(0).unwrap()).unwrap();
        let (c, a, d) = trace_gaussians(Vec3::ZERO, UnitVec3::Z, 0.05, 1.0, &empty);
        assert_eq!((c, a), ([0.0; 3], 0.0));
        assert!(d.is_infinite());

        let wall = disk(Vec3::new(0.0, 0.0, 0.1), UP, (5.0, 5.0), 40.0, 0.5);
        let sc = scene(&[wall], 0);
        assert!(trace_gaussians(Vec3::ZERO, UnitVec3::Z, 0.05, 1.0, &sc).1 > 0.99);
        assert_eq!(trace_gaussians(Vec3::ZERO, UnitVec3::Z, 0.2, 1.0, &sc).1, 0.0);
        let ray = Ray::new(Vec3::ZERO, UnitVec3::Z);
        let b = blend_along_ray(&sc, &ray, Vec3::Z);
        let (c, a, d) = trace_gaussians(Vec3::ZERO, UnitVec3::Z, 0.0, 1.0, &sc);
        assert_eq!((c, a, d), (b.color, b.alpha, b.depth));
    }

    /// Scalar test loss over every RayBlend field.
    fn probe(b: &RayBlend, up: &RayBlendGrad) -> f64 {
        let mut l = up.alpha * b.alpha + up.depth * b.depth + up.roughness * b.roughness;
        for ch in 0..3 {
            l += up.color[ch] * b.color[ch] + up.albedo[ch] * b.albedo[ch];
        }
        l + up.normal.dot(b.normal.get())
    }

    #[test]
    fn backward_matches_finite_differences() {
        let rng = DetRng::new(21);
        let gs = random_gaussians(&rng, 6, 1);
        let mut set = GaussianSet::from_gaussians(1, &gs).unwrap();
        // Make all six overlap the probe ray.
        for i in 0..set.len() {
            set.geometry[i * GEOM_STRIDE] *= 0.2;
            set.geometry[i * GEOM_STRIDE + 1] *= 0.2;
            set.geometry[i * GEOM_STRIDE + 7] = -0.5;
            set.geometry[i * GEOM_STRIDE + 8] = -0.6;
        }
        let ray = Ray::new(Vec3::new(0.01, -0.02, 2.0), UnitVec3::new(Vec3::new(0.02, 0.01, -1.0)).unwrap());
        let up = RayBlendGrad {
            color: [0.3, -0.7, 0.4],
            alpha: 0.9,
            depth: -0.5,
            normal: Vec3::new(0.2, 0.4, -0.3),
            albedo: [0.6, 0.1, -0.8],
            roughness: 0.35,
        };
        let eval = |s: &GaussianSet| {
            let sc = GaussianScene::new(s).unwrap();
            probe(&blend_along_ray(&sc, &ray, ray.dir.get()), &up)
        };
        let sc = GaussianScene::new(&set).unwrap();
        let (out, rec) = blend_recorded(&sc, &ray, ray.dir.get());
        assert!(rec.hits.len() >= 4, "only {} hits", rec.hits.len());
        let mut grads = GaussianGrads::zeros_like(&set);
        blend_backward(&sc, &ray, &rec, &out, &up, &mut grads);

        let h = 1e-6;
        let check = |name: &str, analytic: f64, fd: f64| {
            let err = (analytic - fd).abs() / fd.abs().max(1e-3);
            assert!(err < 1e-4, "{name}: analytic {analytic} fd {fd}");
        };
        for k in 0..set.geometry.len() {
            let (mut p, mut m) = (set.clone(), set.clone());
            p.geometry[k] += h;
            m.geometry[k] -= h;
            check(&format!("geometry[{k}]"), grads.geometry[k], (eval(&p) - eval(&m)) / (2.0 * h));
        }
        for k in 0..set.sh.len() {
            let (mut p, mut m) = (set.clone(), set.clone());
            p.sh[k] += h;
            m.sh[k] -= h;
            check(&format!("sh[{k}]"), grads.sh[k], (eval(&p) - eval(&m)) / (2.0 * h));
        }
        for k in 0..set.material.len() {
            let (mut p, mut m) = (set.clone(), set.clone());
            p.material[k] += h;
            m.material[k] -= h;
            check(&format!("material[{k}]"), grads.material[k], (eval(&p) - eval(&m)) / (2.0 * h));
        }
    }
}
