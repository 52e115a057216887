//! Ground-truth Monte Carlo path tracer.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ao::hemisphere_dir;
use super::brdf::reference_brdf;
use super::scene::{facing, SceneTracer};
use crate::camera::{Camera, Ray};
use crate::envlight::{rot_y, EnvironmentMap};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::ImageBuffer;
use crate::math::{Mat3, UnitVec3, Vec3};
use crate::rng::{domain, DetRng};
use crate::shading::BrdfKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathTraceConfig {
    pub spp: usize,
    /// Surface interactions per path; 1 is direct light only.
    pub max_bounces: usize,
    /// Bounce index from which Russian roulette applies.
    pub rr_start: usize,
    pub brdf: BrdfKind,
}

impl Default for PathTraceConfig {
    fn default() -> Self {
        PathTraceConfig { spp: 64, max_bounces: 4, rr_start: 3, brdf: BrdfKind::DisneyGgx }
    }
}

/// Relative start offset of secondary rays.
const RAY_EPS: f64 = 1e-6;

pub struct PathTracer<'a> {
    pub scene: &'a SceneTracer,
    pub env: &'a EnvironmentMap,
    pub rotation: Mat3,
    pub extent: f64,
    pub cfg: PathTraceConfig,
}

impl<'a> PathTracer<'a> {
    pub fn new(scene: &'a SceneTracer, env: &'a EnvironmentMap, phi: f64, extent: f64, cfg: PathTraceConfig) -> Result<Self> {
        if cfg.spp == 0 || cfg.max_bounces == 0 {
            return Err(Error::Config("path tracing needs spp >= 1 and max_bounces >= 1".into()));
        }
        Ok(PathTracer { scene, env, rotation: rot_y(phi), extent, cfg })
    }

    fn env_radiance(&self, d: Vec3) -> [f64; 3] {
        self.env.lookup_vec(self.rotation.mul_vec(d))
    }

    /// One path estimate for `ray`. Sample `s` of `count` stratifies the
    /// first bounce over `cos(theta)`.
    pub fn sample(&self, ray: &Ray, s: usize, count: usize, rng: &DetRng, key: &[u64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        let mut throughput = [1.0; 3];
        let mut ray = *ray;
        let draw = |bounce: usize, dim: u64| {
            let mut k = key.to_vec();
            k.extend([s as u64, bounce as u64, dim]);
            rng.uniform(&k)
        };
        for bounce in 0..=self.cfg.max_bounces {
            let Some(hit) = self.scene.tracer.intersect(&ray) else {
                let e = self.env_radiance(ray.dir.get());
                for c in 0..3 {
                    out[c] += throughput[c] * e[c];
                }
                break;
            };
            if bounce == self.cfg.max_bounces {
                break;
            }
            let info = self.scene.surface(hit);
            let wo = -ray.dir.get();
            let n = facing(hit.normal, wo).get();
            let u1 = if bounce == 0 { (s as f64 + draw(bounce, 0)) / count as f64 } else { draw(bounce, 0) };
            let wi = hemisphere_dir(n, u1, draw(bounce, 1));
            let f = reference_brdf(self.cfg.brdf, info.albedo, info.roughness, n, wi, wo);
            let w = n.dot(wi) * 2.0 * PI;
            for c in 0..3 {
                throughput[c] *= f[c] * w;
            }
            if bounce + 1 >= self.cfg.rr_start {
                let p = throughput.iter().fold(0.0f64, |a, &b| a.max(b)).min(0.95);
                if p <= 0.0 || draw(bounce, 2) >= p {
                    break;
                }
                throughput = throughput.map(|t| t / p);
            }
            ray = Ray::with_t_min(hit.point, UnitVec3::new_unchecked(wi), RAY_EPS * self.extent);
        }
        out
    }

    /// Mean and per-channel sample variance of the pixel estimate.
    pub fn pixel(&self, ray: &Ray, rng: &DetRng, key: &[u64]) -> ([f64; 3], [f64; 3]) {
        let n = self.cfg.spp;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for s in 0..n {
            let v = self.sample(ray, s, n, rng, key);
            for c in 0..3 {
                sum[c] += v[c];
                sq[c] += v[c] * v[c];
            }
        }
        let mean = sum.map(|v| v / n as f64);
        let var = if n > 1 {
            [0, 1, 2].map(|c| ((sq[c] - n as f64 * mean[c] * mean[c]) / (n - 1) as f64).max(0.0))
        } else {
            [0.0; 3]
        };
        (mean, var)
    }

    /// RGBA render: alpha is 1 where the primary ray hits the scene.
    pub fn render(&self, camera: &Camera, rng: &DetRng, view_key: u64) -> ImageBuffer {
        let pixels = exec::map_indexed(camera.pixel_count(), |p| {
            let (i, j) = (p % camera.width, p / camera.width);
            let ray = camera.ray_for_pixel_center(i, j);
            let alpha = if self.scene.tracer.intersect(&ray).is_some() { 1.0 } else { 0.0 };
            let (rgb, _) = self.pixel(&ray, rng, &[domain::PATH, view_key, p as u64]);
            [rgb[0], rgb[1], rgb[2], alpha]
        });
        let data = pixels.into_iter().flatten().collect();
        ImageBuffer::from_data(camera.width, camera.height, 4, data).expect("finite path-traced image")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshproxy::TriangleMesh;
    use crate::oracle::scene::{floor_mesh, SceneDescription, SceneObject, Texture};
    use crate::shading::{shade_recorded, IncidentBackend, IncidentGeometry, Indirect, Material, ShadeOptions, ShadePoint};
    use crate::LightAngleTable;

    fn scene_with(objects: Vec<SceneObject>, env: EnvironmentMap) -> SceneDescription {
        SceneDescription { name: "test".into(), objects, env, region: None, focus: Vec3::ZERO, orbit_radius: 3.0 }
    }

    fn plane(albedo: [f64; 3], roughness: f64) -> SceneObject {
        SceneObject { name: "floor".into(), mesh: floor_mesh(0.0, 50.0, 1).unwrap(), albedo: Texture::Constant(albedo), roughness }
    }

    #[test]
    fn env_only_furnace_is_exact() {
        let env = EnvironmentMap::constant(8, [1.0; 3]).unwrap();
        let one = env.texel_radiance(0)[0];
        let empty = SceneObject { name: "none".into(), mesh: TriangleMesh::empty(), albedo: Texture::Constant([1.0; 3]), roughness: 1.0 };
        let s = scene_with(vec![empty], env);
        let tr = SceneTracer::new(&s).unwrap();
        let pt = PathTracer::new(&tr, &s.env, 0.3, 1.0, PathTraceConfig { spp: 4, ..Default::default() }).unwrap();
        let cam = Camera::look_at(Vec3::new(0.0, 1.0, 3.0), Vec3::ZERO, Vec3::Y, 0.8, 8, 6).unwrap();
        let img = pt.render(&cam, &DetRng::new(1), 0);
        for p in 0..img.pixel_count() {
            assert!(img.rgb_at(p).iter().all(|&v| (v - one).abs() < 1e-12));
            assert_eq!(img.alpha_at(p), 0.0);
        }
    }

    #[test]
    fn lambert_plane_one_bounce_is_albedo_times_env() {
        let env = EnvironmentMap::constant(8, [0.8, 1.0, 1.2]).unwrap();
        let e0 = env.texel_radiance(0);
        let a = [0.3, 0.5, 0.7];
        let s = scene_with(vec![plane(a, 0.5)], env);
        let tr = SceneTracer::new(&s).unwrap();
        let cfg = PathTraceConfig { spp: 4096, max_bounces: 1, brdf: BrdfKind::Lambert, ..Default::default() };
        let pt = PathTracer::new(&tr, &s.env, 0.0, 1.0, cfg).unwrap();
        let ray = Ray::new(Vec3::new(0.2, 2.0, 0.1), UnitVec3::new(Vec3::new(0.1, -1.0, 0.2)).unwrap());
        let (mean, var) = pt.pixel(&ray, &DetRng::new(2), &[5]);
        for c in 0..3 {
            let se = (var[c] / 4096.0).sqrt();
            assert!((mean[c] - a[c] * e0[c]).abs() <= 3.0 * se + 1e-12, "{c}: {} vs {}", mean[c], a[c] * e0[c]);
        }
    }

    #[test]
    fn direct_only_agrees_with_renderer_shading() {
        let s = crate::oracle::scene::shadow_box().unwrap();
        let tr = SceneTracer::new(&s).unwrap();
        let cfg = PathTraceConfig { spp: 2048, max_bounces: 1, ..Default::default() };
        let pt = PathTracer::new(&tr, &s.env, 2.0, s.extent(), cfg).unwrap();
        let table = LightAngleTable::new(vec![2.0]).unwrap();
        let backend = IncidentBackend {
            geometry: IncidentGeometry::Mesh(&tr.tracer),
            env: &s.env,
            table: &table,
            indirect: Indirect::Zero,
            extent: s.extent(),
        };
        let rng = DetRng::new(3);
        let cam = Camera::look_at(Vec3::new(2.0, 2.0, 2.0), Vec3::new(0.0, 0.1, 0.0), Vec3::Y, 0.9, 16, 16).unwrap();
        let mut checked = 0;
        for p in (0..256).step_by(7) {
            let ray = cam.ray_for_pixel_center(p % 16, p / 16);
            let Some(hit) = tr.tracer.intersect(&ray) else { continue };
            let info = tr.surface(hit);
            let wo = UnitVec3::new(-ray.dir.get()).unwrap();
            let n = facing(hit.normal, wo.get());
            let sp = ShadePoint {
                x: hit.point,
                x_m: hit.point,
                n,
                wo,
                material: Material::new(info.albedo, info.roughness).unwrap(),
                k: 0,
            };
            let opts = ShadeOptions { n_samples: 2048, ..Default::default() };
            let rec = shade_recorded(&sp, &backend, &opts, &rng, &[p as u64]).unwrap();
            let (mean, var) = pt.pixel(&ray, &rng, &[9, p as u64]);
            let se_a = rec.standard_error();
            for c in 0..3 {
                let se = (se_a[c].powi(2) + var[c] / 2048.0).sqrt();
                assert!((mean[c] - rec.radiance[c]).abs() <= 3.0 * se + 1e-9, "pixel {p} ch {c}: {} vs {}", mean[c], rec.radiance[c]);
            }
            checked += 1;
        }
        assert!(checked >= 8, "only {checked} pixels hit");
    }

    #[test]
    fn variance_halves_with_double_spp() {
        let s = crate::oracle::scene::shadow_box().unwrap();
        let tr = SceneTracer::new(&s).unwrap();
        let ray = Ray::new(Vec3::new(1.5, 1.5, 1.5), UnitVec3::new(Vec3::new(-1.0, -1.2, -0.6)).unwrap());
        let var_of = |spp: usize| {
            let cfg = PathTraceConfig { spp, ..Default::default() };
            let pt = PathTracer::new(&tr, &s.env, 0.0, s.extent(), cfg).unwrap();
            let rng = DetRng::new(4);
            let v: Vec<f64> = (0..300u64).map(|r| pt.pixel(&ray, &rng, &[r]).0[0]).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let ratio = var_of(8) / var_of(16);
        assert!(ratio > 2.0 / 1.5 && ratio < 2.0 * 1.5, "ratio {ratio}");
    }

    #[test]
    fn diffuse_scene_never_exceeds_brightest_light() {
        let env = crate::oracle::scene::sun_sky_env(16, 0.7, 0.2, 3.0).unwrap();
        let max_env = env.max_radiance();
        let mut s = crate::oracle::scene::shadow_box().unwrap();
        s.env = env;
        let tr = SceneTracer::new(&s).unwrap();
        let cfg = PathTraceConfig { spp: 64, brdf: BrdfKind::Lambert, ..Default::default() };
        let pt = PathTracer::new(&tr, &s.env, 0.0, s.extent(), cfg).unwrap();
        let cam = Camera::look_at(Vec3::new(0.0, 2.5, 2.5), Vec3::ZERO, Vec3::Y, 0.9, 12, 12).unwrap();
        let rng = DetRng::new(5);
        for p in 0..cam.pixel_count() {
            let ray = cam.ray_for_pixel_center(p % 12, p / 12);
            let (mean, var) = pt.pixel(&ray, &rng, &[p as u64]);
            for c in 0..3 {
                assert!(mean[c] <= max_env + 3.0 * (var[c] / 64.0).sqrt());
            }
        }
    }
}
