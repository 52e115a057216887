//! Rendering a decomposed scene: the stage-2 forward model, relighting under
//! a new environment and ambient-occlusion maps.

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Ray};
use crate::envlight::{EnvironmentMap, LightAngleTable};
use crate::error::Result;
use crate::exec;
use crate::gsplat::{blend_along_ray, GaussianScene, RayBlend};
use crate::image::ImageBuffer;
use crate::math::{UnitVec3, Vec3};
use crate::meshproxy::{MeshHit, MeshTracer};
use crate::rng::{domain, DetRng};
use crate::shading::{
    ambient_occlusion, shade, IncidentBackend, IncidentGeometry, Indirect, Material, ShadeOptions, ShadePoint,
};

/// Step count in render keys, kept clear of any training step.
const RENDER_STEP: u64 = u64::MAX;

/// Shading frame of one camera pixel, or `None` where the surfels are
/// transparent.
fn pixel_frame(scene: &GaussianScene, tracer: Option<&MeshTracer>, ray: &Ray) -> Option<(RayBlend, Vec3, Vec3, UnitVec3)> {
    let b = blend_along_ray(scene, ray, ray.dir.get());
    if !(b.valid && b.alpha > 0.5) {
        return None;
    }
    let x = ray.point_at(b.depth);
    let x_m = tracer.and_then(|t| t.intersect(ray)).map_or(x, |h| h.point);
    let wo = -ray.dir;
    let n = if b.normal.get().dot(wo.get()) < 0.0 { -b.normal } else { b.normal };
    Some((b, x, x_m, n))
}

/// Pixels rendered by a stride: every `stride`-th pixel index.
pub fn strided_pixels(camera: &Camera, stride: usize) -> Vec<usize> {
    (0..camera.pixel_count()).step_by(stride.max(1)).collect()
}

/// Shades `pixels` of `camera` under light `k` with the given backend.
/// Returns RGBA per pixel; transparent pixels are black.
pub fn render_pixels(
    scene: &GaussianScene,
    backend: &IncidentBackend,
    camera: &Camera,
    k: usize,
    opts: &ShadeOptions,
    rng: &DetRng,
    view_key: u64,
    pixels: &[usize],
) -> Result<Vec<[f64; 4]>> {
    let tracer = match backend.geometry {
        IncidentGeometry::Mesh(t) => Some(t),
        IncidentGeometry::Gaussians { .. } => None,
    };
    let out = exec::map_indexed(pixels.len(), |i| -> Result<[f64; 4]> {
        let p = pixels[i];
        let ray = camera.ray_for_pixel_center(p % camera.width, p / camera.width);
        let Some((b, x, x_m, n)) = pixel_frame(scene, tracer, &ray) else {
            return Ok([0.0, 0.0, 0.0, blend_along_ray(scene, &ray, ray.dir.get()).alpha]);
        };
        let sp = ShadePoint { x, x_m, n, wo: -ray.dir, material: Material::clamped(b.albedo, b.roughness), k };
        let c = shade(&sp, backend, opts, rng, &[domain::SHADE, RENDER_STEP, view_key, p as u64])?;
        Ok([c[0], c[1], c[2], b.alpha])
    });
    out.into_iter().collect()
}

fn to_image(camera: &Camera, pixels: &[usize], rgba: &[[f64; 4]]) -> Result<ImageBuffer> {
    let mut img = ImageBuffer::new(camera.width, camera.height, 4)?;
    for (&p, v) in pixels.iter().zip(rgba) {
        img.data[p * 4..p * 4 + 4].copy_from_slice(v);
    }
    Ok(img)
}

/// Full-frame render of the stage-2 model.
pub fn render_view(
    scene: &GaussianScene,
    backend: &IncidentBackend,
    camera: &Camera,
    k: usize,
    opts: &ShadeOptions,
    rng: &DetRng,
    view_key: u64,
) -> Result<ImageBuffer> {
    let pixels = strided_pixels(camera, 1);
    let rgba = render_pixels(scene, backend, camera, k, opts, rng, view_key, &pixels)?;
    to_image(camera, &pixels, &rgba)
}

/// Relighting settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelightOptions {
    pub shade: ShadeOptions,
    /// Samples of the direct-lit bounce that replaces the caches.
    pub bounce_samples: usize,
    /// Material at a bounce hit is splatted along a ray starting this far
    /// (times the extent) off the surface.
    pub probe: f64,
}

impl Default for RelightOptions {
    fn default() -> Self {
        RelightOptions { shade: ShadeOptions::default(), bounce_samples: 8, probe: 0.02 }
    }
}

/// Relights `pixels` under `env` rotated by `angle` (radians). Indirect
/// light is one direct-lit bounce at the mesh, since the caches only know
/// the training illumination.
#[allow(clippy::too_many_arguments)]
pub fn relight_pixels(
    scene: &GaussianScene,
    tracer: &MeshTracer,
    env: &EnvironmentMap,
    angle: f64,
    extent: f64,
    camera: &Camera,
    opts: &RelightOptions,
    rng: &DetRng,
    view_key: u64,
    pixels: &[usize],
) -> Result<Vec<[f64; 4]>> {
    let table = LightAngleTable::new(vec![angle])?;
    let direct = IncidentBackend { geometry: IncidentGeometry::Mesh(tracer), env, table: &table, indirect: Indirect::Zero, extent };
    let bounce_opts = ShadeOptions { n_samples: opts.bounce_samples.max(1), ..opts.shade };
    let probe = opts.probe * extent;
    let bounce = |hit: &MeshHit, toward: Vec3, _k: usize| -> [f64; 3] {
        let Ok(wo) = UnitVec3::new(toward) else { return [0.0; 3] };
        let ray = Ray::new(hit.point + wo.get() * probe, -wo);
        let b = blend_along_ray(scene, &ray, ray.dir.get());
        if !(b.valid && b.alpha > 0.5) {
            return [0.0; 3];
        }
        let n = if hit.normal.get().dot(wo.get()) < 0.0 { -hit.normal } else { hit.normal };
        let sp = ShadePoint {
            x: hit.point,
            x_m: hit.point,
            n,
            wo,
            material: Material::clamped(b.albedo, b.roughness),
            k: 0,
        };
        let key = [domain::RELIGHT, hit.tri as u64, hit.bary.0.to_bits(), hit.bary.1.to_bits()];
        shade(&sp, &direct, &bounce_opts, rng, &key).unwrap_or([0.0; 3])
    };
    let backend = IncidentBackend { indirect: Indirect::Custom(&bounce), ..direct };
    render_pixels(scene, &backend, camera, 0, &opts.shade, rng, view_key, pixels)
}

#[allow(clippy::too_many_arguments)]
pub fn relight(
    scene: &GaussianScene,
    tracer: &MeshTracer,
    env: &EnvironmentMap,
    angle: f64,
    extent: f64,
    camera: &Camera,
    opts: &RelightOptions,
    rng: &DetRng,
    view_key: u64,
) -> Result<ImageBuffer> {
    let pixels = strided_pixels(camera, 1);
    let rgba = relight_pixels(scene, tracer, env, angle, extent, camera, opts, rng, view_key, &pixels)?;
    to_image(camera, &pixels, &rgba)
}

/// Ambient occlusion at every covered pixel, seen through `geometry`.
/// Incident rays start at the mesh hit of the camera ray for the mesh
/// backend and at the splatted point otherwise.
pub fn render_ao(
    scene: &GaussianScene,
    geometry: &IncidentGeometry,
    extent: f64,
    camera: &Camera,
    n_samples: usize,
    rng: &DetRng,
    view_key: u64,
) -> Result<ImageBuffer> {
    let tracer = match geometry {
        IncidentGeometry::Mesh(t) => Some(*t),
        IncidentGeometry::Gaussians { .. } => None,
    };
    let px = exec::map_indexed(camera.pixel_count(), |p| -> Result<[f64; 2]> {
        let ray = camera.ray_for_pixel_center(p % camera.width, p / camera.width);
        match pixel_frame(scene, tracer, &ray) {
            None => Ok([0.0, 0.0]),
            Some((b, _, x_m, n)) => {
                let ao = ambient_occlusion(geometry, extent, x_m, n, n_samples, rng, &[domain::AO, view_key, p as u64])?;
                Ok([ao, b.alpha])
            }
        }
    });
    let mut img = ImageBuffer::new(camera.width, camera.height, 4)?;
    for (p, v) in px.into_iter().enumerate() {
        let [ao, a] = v?;
        img.data[p * 4..p * 4 + 4].copy_from_slice(&[ao, ao, ao, a]);
    }
    Ok(img)
}
