//! Reflectance, incident radiance and Monte Carlo shading.
//!
//! Outgoing radiance at a splatted surface point `x` is estimated as
//!
//! ```text
//! L_o(x, wo) = 1/N sum_i f(wi, wo) L_i(x_m, wi) (n . wi) / pdf,   pdf = 1 / (2 pi)
//! ```
//!
//! with directions stratified over the hemisphere of the splatted normal.
//! Material and normal come from `x`; incident rays start at the proxy-mesh
//! hit `x_m`. Incident light is the rotated environment on a miss and the
//! light-angle's radiance cache at the hit point otherwise.

pub mod brdf;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

pub use brdf::{brdf_eval, brdf_eval_grad, brdf_eval_kind, BrdfKind, BrdfSample, Material, F0};

use crate::cache::RadianceCache;
use crate::camera::Ray;
use crate::envlight::{EnvironmentMap, LightAngleTable};
use crate::error::{Error, Result};
use crate::gsplat::{trace_gaussians, GaussianScene};
use crate::math::{UnitVec3, Vec3};
use crate::meshproxy::{uniform_hemisphere, MeshHit, MeshTracer};
use crate::rng::DetRng;

/// Start of incident mesh rays, as a fraction of the scene extent.
pub const MESH_RAY_EPS: f64 = 1e-4;

/// Offset used by the Gaussian comparison backend.
pub const GAUSSIAN_OFFSET: f64 = 0.05;

#[derive(Clone, Copy)]
pub enum IncidentGeometry<'a> {
    Mesh(&'a MeshTracer),
    /// Incident rays integrate the surfels themselves, starting
    /// `offset * extent` away from the query point.
    Gaussians { scene: &'a GaussianScene, offset: f64 },
}

/// Indirect light for mesh hits.
#[derive(Clone, Copy)]
pub enum Indirect<'a> {
    Zero,
    /// `caches[k]` serves light index `k`.
    Caches(&'a [RadianceCache]),
    /// Radiance leaving a hit toward the given direction under light `k`.
    Custom(&'a (dyn Fn(&MeshHit, Vec3, usize) -> [f64; 3] + Sync)),
}

#[derive(Clone, Copy)]
pub struct IncidentBackend<'a> {
    pub geometry: IncidentGeometry<'a>,
    pub env: &'a EnvironmentMap,
    pub table: &'a LightAngleTable,
    pub indirect: Indirect<'a>,
    /// Scene size used for ray offsets.
    pub extent: f64,
}

/// Incident radiance along one direction and where it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Incident {
    pub radiance: [f64; 3],
    /// Weight of the environment lookup in `radiance` (1 on a mesh miss,
    /// `1 - alpha` for the Gaussian backend, 0 on a mesh hit).
    pub env_weight: f64,
    /// Cache query point when the radiance came from a cache.
    pub cache_point: Option<Vec3>,
}

impl<'a> IncidentBackend<'a> {
    fn cache(&self, k: usize) -> Result<Option<&'a RadianceCache>> {
        match self.indirect {
            Indirect::Caches(caches) => {
                let c = caches.get(k).ok_or(Error::Index { index: k, len: caches.len() })?;
                if c.k != k {
                    return Err(Error::InvalidInput(format!("cache at slot {k} serves light {}", c.k)));
                }
                Ok(Some(c))
            }
            _ => Ok(None),
        }
    }
}

/// `L_i(x, wi)` under light index `k`.
pub fn incident_radiance(b: &IncidentBackend, x: Vec3, wi: UnitVec3, k: usize) -> Result<Incident> {
    let rot = b.table.rotation(k)?;
    match b.geometry {
        IncidentGeometry::Mesh(tracer) => {
            let ray = Ray::with_t_min(x, wi, MESH_RAY_EPS * b.extent);
            match tracer.intersect(&ray) {
                None => Ok(Incident {
                    radiance: b.env.lookup_vec(rot.mul_vec(wi.get())),
                    env_weight: 1.0,
                    cache_point: None,
                }),
                Some(hit) => {
                    let (radiance, cache_point) = match b.indirect {
                        Indirect::Zero => ([0.0; 3], None),
                        Indirect::Caches(_) => {
                            let cache = b.cache(k)?.expect("cache backend");
                            (cache.query(hit.point, -wi.get())?, Some(hit.point))
                        }
                        Indirect::Custom(f) => (f(&hit, -wi.get(), k), None),
                    };
                    Ok(Incident { radiance, env_weight: 0.0, cache_point })
                }
            }
        }
        IncidentGeometry::Gaussians { scene, offset } => {
            let (c, alpha, _) = trace_gaussians(x, wi, offset, b.extent, scene);
            let e = b.env.lookup_vec(rot.mul_vec(wi.get()));
            let w = 1.0 - alpha;
            Ok(Incident { radiance: [0, 1, 2].map(|i| c[i] + w * e[i]), env_weight: w, cache_point: None })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadePoint {
    /// Splatted surface point.
    pub x: Vec3,
    /// Origin of incident rays (proxy-mesh hit).
    pub x_m: Vec3,
    pub n: UnitVec3,
    /// Direction toward the viewer.
    pub wo: UnitVec3,
    pub material: Material,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadeOptions {
    pub n_samples: usize,
    pub brdf: BrdfKind,
}

impl Default for ShadeOptions {
    fn default() -> Self {
        ShadeOptions { n_samples: 16, brdf: BrdfKind::DisneyGgx }
    }
}

type Key = SmallVec<[u64; 8]>;

fn sub_key(prefix: &[u64], i: usize, dim: u64) -> Key {
    let mut k: Key = SmallVec::from_slice(prefix);
    k.push(i as u64);
    k.push(dim);
    k
}

/// Direction `i` of `count` stratified over `cos(theta)`, uniform in azimuth.
pub fn stratified_direction(n: UnitVec3, i: usize, count: usize, rng: &DetRng, key: &[u64]) -> UnitVec3 {
    let u1 = (i as f64 + rng.uniform(&sub_key(key, i, 0))) / count as f64;
    let u2 = rng.uniform(&sub_key(key, i, 1));
    uniform_hemisphere(n, u1, u2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadeSample {
    pub wi: UnitVec3,
    pub brdf: BrdfSample,
    pub incident: Incident,
    /// `(n . wi) / (pdf N)`.
    pub weight: f64,
}

impl ShadeSample {
    pub fn contribution(&self) -> [f64; 3] {
        [0, 1, 2].map(|c| self.brdf.f[c] * self.incident.radiance[c] * self.weight)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShadeRecord {
    pub radiance: [f64; 3],
    /// Empty when the point faces away from the viewer.
    pub samples: Vec<ShadeSample>,
}

impl ShadeRecord {
    /// Standard error of the estimate per channel, from the spread of the
    /// per-sample contributions.
    pub fn standard_error(&self) -> [f64; 3] {
        let n = self.samples.len();
        if n < 2 {
            return [0.0; 3];
        }
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = self.samples.iter().map(|s| s.contribution()[c] * n as f64).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            *o = (var / n as f64).sqrt();
        }
        out
    }
}

pub fn shade(sp: &ShadePoint, b: &IncidentBackend, opts: &ShadeOptions, rng: &DetRng, key: &[u64]) -> Result<[f64; 3]> {
    Ok(shade_recorded(sp, b, opts, rng, key)?.radiance)
}

/// Monte Carlo outgoing radiance keeping every sample for the backward pass.
/// Backfacing view directions give zero radiance and no samples.
pub fn shade_recorded(
    sp: &ShadePoint,
    b: &IncidentBackend,
    opts: &ShadeOptions,
    rng: &DetRng,
    key: &[u64],
) -> Result<ShadeRecord> {
    if opts.n_samples == 0 {
        return Err(Error::InvalidInput("shade needs at least one sample".into()));
    }
    let n = sp.n.get();
    if n.dot(sp.wo.get()) <= 0.0 {
        return Ok(ShadeRecord::default());
    }
    let count = opts.n_samples;
    let mut rec = ShadeRecord { radiance: [0.0; 3], samples: Vec::with_capacity(count) };
    for i in 0..count {
        let wi = stratified_direction(sp.n, i, count, rng, key);
        let cos = n.dot(wi.get()).max(0.0);
        let brdf = brdf_eval_grad(opts.brdf, &sp.material, n, wi.get(), sp.wo.get());
        let incident = incident_radiance(b, sp.x_m, wi, sp.k)?;
        let s = ShadeSample { wi, brdf, incident, weight: cos * 2.0 * PI / count as f64 };
        let c = s.contribution();
        for ch in 0..3 {
            rec.radiance[ch] += c[ch];
        }
        rec.samples.push(s);
    }
    if !rec.radiance.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("shade", format!("non-finite radiance {:?}", rec.radiance)));
    }
    Ok(rec)
}

/// Gradient sinks for the light: dense environment `raw` gradient and one
/// dense vector per cache. An empty vector switches that sink off.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LightGrads {
    pub env: Vec<f64>,
    pub caches: Vec<Vec<f64>>,
}

impl LightGrads {
    pub fn zeros(env: Option<&EnvironmentMap>, caches: Option<&[RadianceCache]>) -> Self {
        LightGrads {
            env: env.map(|e| vec![0.0; e.raw.len()]).unwrap_or_default(),
            caches: caches.map(|cs| cs.iter().map(|c| vec![0.0; c.param_count()]).collect()).unwrap_or_default(),
        }
    }

    pub fn add(&mut self, o: &LightGrads) {
        for (a, b) in self.env.iter_mut().zip(&o.env) {
            *a += b;
        }
        for (ca, cb) in self.caches.iter_mut().zip(&o.caches) {
            for (a, b) in ca.iter_mut().zip(cb) {
                *a += b;
            }
        }
    }
}

/// Derivatives of shaded radiance w.r.t. the material.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaterialGrad {
    pub albedo: [f64; 3],
    pub roughness: f64,
}

/// Propagates `d_out` (dLoss/dL_o) through a recorded shade into material
/// derivatives (returned) and the light sinks.
pub fn shade_backward(
    sp: &ShadePoint,
    b: &IncidentBackend,
    rec: &ShadeRecord,
    d_out: [f64; 3],
    light: &mut LightGrads,
) -> Result<MaterialGrad> {
    let mut g = MaterialGrad::default();
    if rec.samples.is_empty() {
        return Ok(g);
    }
    let rot = b.table.rotation(sp.k)?;
    let cache = if light.caches.is_empty() { None } else { b.cache(sp.k)? };
    for s in &rec.samples {
        let li = s.incident.radiance;
        let mut d_li = [0.0; 3];
        for c in 0..3 {
            let dl = d_out[c] * s.weight;
            g.albedo[c] += dl * s.brdf.df_dalbedo[c] * li[c];
            g.roughness += dl * s.brdf.df_droughness * li[c];
            d_li[c] = dl * s.brdf.f[c];
        }
        if d_li == [0.0; 3] {
            continue;
        }
        if s.incident.env_weight > 0.0 && !light.env.is_empty() {
            let w = s.incident.env_weight;
            b.env.accumulate_grad(s.wi.get(), rot, d_li.map(|v| v * w), &mut light.env);
        }
        if let (Some(y), Some(cache)) = (s.incident.cache_point, cache) {
            cache.accumulate_grad(y, -s.wi.get(), d_li, &mut light.caches[sp.k]);
        }
    }
    Ok(g)
}

/// Fraction of uniformly sampled hemisphere directions that see the
/// environment: mesh misses, or `1 - alpha` through the Gaussians.
pub fn ambient_occlusion(
    geometry: &IncidentGeometry,
    extent: f64,
    x_m: Vec3,
    n: UnitVec3,
    n_samples: usize,
    rng: &DetRng,
    key: &[u64],
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("ambient occlusion needs at least one sample".into()));
    }
    let mut visible = 0.0;
    for i in 0..n_samples {
        let wi = stratified_direction(n, i, n_samples, rng, key);
        visible += match geometry {
            IncidentGeometry::Mesh(tracer) => {
                let ray = Ray::with_t_min(x_m, wi, MESH_RAY_EPS * extent);
                if tracer.occluded(&ray, f64::INFINITY) {
                    0.0
                } else {
                    1.0
                }
            }
            IncidentGeometry::Gaussians { scene, offset } => 1.0 - trace_gaussians(x_m, wi, *offset, extent, scene).1,
        };
    }
    Ok(visible / n_samples as f64)
}
