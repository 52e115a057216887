//! Stage 2: per-surfel albedo and roughness, the shared environment map and
//! the per-light radiance caches, fitted under frozen geometry.
//!
//! Geometry never changes here, so every training pixel's splat (surface
//! point, normal, mesh hit and the normalized compositing weights of the
//! surfels it blends) is computed once. Splatted material is then a fixed
//! linear combination of per-surfel material, and its gradient is scattered
//! back through the same weights.

use serde::{Deserialize, Serialize};

use super::dataset::Frame;
use crate::cache::{CacheSample, CacheView, RadianceCache};
use crate::camera::Ray;
use crate::envlight::{EnvironmentMap, LightAngleTable};
use crate::error::{Error, Result};
use crate::exec;
use crate::gsplat::{blend_recorded, roughness_from_logit, GaussianScene, GaussianSet, MAT_STRIDE, ROUGHNESS_MIN};
use crate::math::{sigmoid, UnitVec3, Vec3};
use crate::meshproxy::{sample_surface, MeshTracer, SurfaceSample};
use crate::optim::{
    edge_weight, loss_light_smooth, loss_light_white, loss_mask, loss_residual, loss_smooth, residual_light_indices,
    AdamState, LossReport, LossWeights, ResidualPoint, SmoothPair,
};
use crate::rng::{domain, DetRng};
use crate::shading::{
    shade_backward, shade_recorded, IncidentBackend, IncidentGeometry, Indirect, LightGrads, Material, MaterialGrad,
    ShadeOptions, ShadePoint,
};

const CHUNKS: usize = 8;

/// Incident-light geometry: the proxy mesh (with caches for indirect light)
/// or the surfels themselves traced from an offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Mesh,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    /// Shaded pixels per step, drawn from one training view.
    pub pixels_per_step: usize,
    /// Surface samples per step for the residual.
    pub residual_samples: usize,
    pub shade: ShadeOptions,
    pub lr_material: f64,
    pub lr_env: f64,
    pub lr_cache: f64,
    /// Learning rates decay exponentially to this fraction at the last step.
    pub lr_final: f64,
    pub weights: LossWeights,
    pub backend: BackendKind,
    /// Start of Gaussian-traced incident rays, as a fraction of the extent.
    pub gaussian_offset: f64,
    /// Residual gradients reach only the cached side.
    pub stop_grad: bool,
    pub freeze_cache: bool,
    /// Area-weighted instead of index-uniform triangle choice.
    pub area_weighted: bool,
    pub env_height: usize,
    pub env_init: f64,
    /// Residual samples read their material by splatting a ray that starts
    /// this far (times the extent) along the sample direction.
    pub residual_probe: f64,
    pub log_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 1000,
            pixels_per_step: 1024,
            residual_samples: 1024,
            shade: ShadeOptions::default(),
            lr_material: 5e-3,
            lr_env: 1e-2,
            lr_cache: 1e-3,
            lr_final: 1.0,
            weights: LossWeights::default(),
            backend: BackendKind::Mesh,
            gaussian_offset: crate::shading::GAUSSIAN_OFFSET,
            stop_grad: false,
            freeze_cache: false,
            area_weighted: false,
            env_height: 16,
            env_init: 0.5,
            residual_probe: 0.02,
            log_every: 10,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.pixels_per_step == 0 || self.shade.n_samples == 0 {
            return Err(Error::Config("stage 2 needs pixels_per_step >= 1 and shade.n_samples >= 1".into()));
        }
        if !(self.env_init > 0.0) || self.env_height < 2 {
            return Err(Error::Config("env_init must be positive and env_height >= 2".into()));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= 1.0) {
            return Err(Error::Config("lr_final must be in (0, 1]".into()));
        }
        if self.gaussian_offset < 0.0 || self.residual_probe <= 0.0 {
            return Err(Error::Config("gaussian_offset must be >= 0 and residual_probe > 0".into()));
        }
        for (name, w) in [
            ("residual", self.weights.residual),
            ("mask", self.weights.mask),
            ("albedo_smooth", self.weights.albedo_smooth),
            ("rough_smooth", self.weights.rough_smooth),
            ("light_smooth", self.weights.light_smooth),
            ("light_white", self.weights.light_white),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// A training pixel whose splat is opaque, inside the capture mask and
/// facing the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelSplat {
    pub pixel: u32,
    /// Splatted surface point.
    pub x: Vec3,
    /// Proxy-mesh hit of the camera ray (`x` on a miss or for the Gaussian
    /// backend).
    pub x_m: Vec3,
    pub n: UnitVec3,
    pub wo: UnitVec3,
    pub gt: [f64; 3],
    start: u32,
    end: u32,
}

/// Frozen splats of one training view.
#[derive(Clone, Debug)]
pub struct ViewSplat {
    pub frame: usize,
    pub k: usize,
    pub width: usize,
    pub height: usize,
    /// Rendered alpha and capture mask of every pixel.
    pub alpha: Vec<f64>,
    pub gt_mask: Vec<f64>,
    /// Slot in `pixels` per image pixel, `u32::MAX` when not shaded.
    pub slot: Vec<u32>,
    pub pixels: Vec<PixelSplat>,
    weights: Vec<(u32, f64)>,
}

impl ViewSplat {
    pub fn weights(&self, p: &PixelSplat) -> &[(u32, f64)] {
        &self.weights[p.start as usize..p.end as usize]
    }
}

/// Everything stage 2 holds fixed.
pub struct Stage2Context {
    pub cfg: Stage2Config,
    pub views: Vec<ViewSplat>,
    /// Light tag of each training frame, for the per-batch audit.
    pub frame_k: Vec<usize>,
    pub scene: GaussianScene,
    pub tracer: MeshTracer,
    pub mesh_hash: String,
    pub geometry_hash: String,
    pub lights: LightAngleTable,
    pub extent: f64,
    pub n_gaussians: usize,
}

/// Trainable stage-2 parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2State {
    /// `albedo_logit.rgb, roughness_logit` per surfel.
    pub material: Vec<f64>,
    pub env: EnvironmentMap,
    pub caches: Vec<RadianceCache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Grads {
    pub material: Vec<f64>,
    pub env: Vec<f64>,
    /// Empty when the caches are frozen.
    pub caches: Vec<Vec<f64>>,
}

/// Which loss terms enter an objective evaluation (all by default).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub data: bool,
    pub cache: bool,
    pub residual: bool,
    pub mask: bool,
    pub smooth: bool,
    pub light: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Terms { data: true, cache: true, residual: true, mask: true, smooth: true, light: true }
    }
}

impl Terms {
    pub const NONE: Terms = Terms { data: false, cache: false, residual: false, mask: false, smooth: false, light: false };
}

fn hash_f64s(v: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

impl Stage2Context {
    /// Splats every training frame once. `frames[i].k` must be set.
    pub fn new(
        cfg: Stage2Config,
        frames: &[Frame],
        set: &GaussianSet,
        tracer: MeshTracer,
        lights: LightAngleTable,
        extent: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let scene = GaussianScene::new(set)?;
        let mut views = Vec::with_capacity(frames.len());
        let mut frame_k = Vec::with_capacity(frames.len());
        for (fi, f) in frames.iter().enumerate() {
            let k = f.k.ok_or_else(|| Error::Dataset(format!("{}: training frame without a light index", f.name)))?;
            if k >= lights.len() {
                return Err(Error::Index { index: k, len: lights.len() });
            }
            frame_k.push(k);
            views.push(splat_view(&cfg, fi, k, f, &scene, &tracer)?);
        }
        let shaded: usize = views.iter().map(|v| v.pixels.len()).sum();
        if shaded == 0 {
            return Err(Error::Dataset("no training pixel is covered by the surfels".into()));
        }
        log::info!("stage 2: {} views, {shaded} shaded pixels", views.len());
        Ok(Stage2Context {
            cfg,
            views,
            frame_k,
            scene,
            mesh_hash: tracer.mesh().content_hash(),
            tracer,
            geometry_hash: hash_f64s(&set.geometry),
            lights,
            extent,
            n_gaussians: set.len(),
        })
    }

    pub fn backend<'a>(&'a self, state: &'a Stage2State) -> IncidentBackend<'a> {
        let geometry = match self.cfg.backend {
            BackendKind::Mesh => IncidentGeometry::Mesh(&self.tracer),
            BackendKind::Gaussian => IncidentGeometry::Gaussians { scene: &self.scene, offset: self.cfg.gaussian_offset },
        };
        IncidentBackend {
            geometry,
            env: &state.env,
            table: &self.lights,
            indirect: Indirect::Caches(&state.caches),
            extent: self.extent,
        }
    }

    /// Initial parameters: material from `set`, a constant environment and
    /// the given caches.
    pub fn initial_state(&self, set: &GaussianSet, caches: Vec<RadianceCache>) -> Result<Stage2State> {
        if caches.len() != self.lights.len() || caches.iter().enumerate().any(|(k, c)| c.k != k) {
            return Err(Error::InvalidInput(format!("need caches 0..{} in order", self.lights.len())));
        }
        Ok(Stage2State {
            material: set.material.clone(),
            env: EnvironmentMap::constant(self.cfg.env_height, [self.cfg.env_init; 3])?,
            caches,
        })
    }

    /// Cache pretraining samples: every shaded pixel's mesh hit, seen from
    /// its camera, with the captured color.
    pub fn cache_views(&self) -> Vec<CacheView> {
        let mut out: Vec<CacheView> = (0..self.lights.len()).map(|k| CacheView { k, samples: Vec::new() }).collect();
        for v in &self.views {
            out[v.k].samples.extend(v.pixels.iter().map(|p| CacheSample { point: p.x_m, dir: p.wo.get(), target: p.gt }));
        }
        out
    }

    /// Panics-free check that geometry and mesh are what stage 2 started with.
    pub fn check_frozen(&self, set: &GaussianSet) -> Result<()> {
        if self.tracer.mesh().content_hash() != self.mesh_hash {
            return Err(Error::InvalidInput("proxy mesh changed during stage 2".into()));
        }
        if hash_f64s(&set.geometry) != self.geometry_hash {
            return Err(Error::InvalidInput("surfel geometry changed during stage 2".into()));
        }
        Ok(())
    }
}

fn splat_view(
    cfg: &Stage2Config,
    fi: usize,
    k: usize,
    f: &Frame,
    scene: &GaussianScene,
    tracer: &MeshTracer,
) -> Result<ViewSplat> {
    let cam = &f.camera;
    let npx = cam.pixel_count();
    let per_pixel = exec::map_indexed(npx, |p| {
        let ray = cam.ray_for_pixel_center(p % cam.width, p / cam.width);
        let (b, rec) = blend_recorded(scene, &ray, ray.dir.get());
        let wo = -ray.dir;
        let shaded = f.mask(p) && b.valid && b.alpha > 0.5 && b.normal.get().dot(wo.get()) > 0.0;
        if !shaded {
            return (b.alpha, None);
        }
        let x = ray.point_at(b.depth);
        let x_m = match cfg.backend {
            BackendKind::Mesh => tracer.intersect(&ray).map_or(x, |h| h.point),
            BackendKind::Gaussian => x,
        };
        (b.alpha, Some((x, x_m, b.normal, wo, rec.normalized_weights(b.alpha))))
    });
    let mut v = ViewSplat {
        frame: fi,
        k,
        width: cam.width,
        height: cam.height,
        alpha: Vec::with_capacity(npx),
        gt_mask: (0..npx).map(|p| f.image.alpha_at(p)).collect(),
        slot: vec![u32::MAX; npx],
        pixels: Vec::new(),
        weights: Vec::new(),
    };
    for (p, (alpha, s)) in per_pixel.into_iter().enumerate() {
        v.alpha.push(alpha);
        if let Some((x, x_m, n, wo, w)) = s {
            let start = v.weights.len() as u32;
            v.weights.extend(w);
            v.slot[p] = v.pixels.len() as u32;
            v.pixels.push(PixelSplat { pixel: p as u32, x, x_m, n, wo, gt: f.rgb(p), start, end: v.weights.len() as u32 });
        }
    }
    Ok(v)
}

/// Splatted material from per-surfel logits.
fn splat_material(material: &[f64], w: &[(u32, f64)]) -> Material {
    let mut a = [0.0; 3];
    let mut r = 0.0;
    for &(i, wi) in w {
        let m = &material[i as usize * MAT_STRIDE..(i as usize + 1) * MAT_STRIDE];
        for c in 0..3 {
            a[c] += wi * sigmoid(m[c]);
        }
        r += wi * roughness_from_logit(m[3]);
    }
    Material::clamped(a, r)
}

/// Adds `scale * g` (w.r.t. splatted albedo/roughness values) to per-surfel
/// value gradients.
fn scatter(dst: &mut [f64], w: &[(u32, f64)], g: &MaterialGrad, scale: f64) {
    for &(i, wi) in w {
        let d = &mut dst[i as usize * MAT_STRIDE..(i as usize + 1) * MAT_STRIDE];
        for c in 0..3 {
            d[c] += scale * wi * g.albedo[c];
        }
        d[3] += scale * wi * g.roughness;
    }
}

/// Value-space gradient to logit space.
fn to_logit_grad(material: &[f64], value_grad: &mut [f64]) {
    for (i, g) in value_grad.iter_mut().enumerate() {
        let l = material[i];
        let s = sigmoid(l);
        *g *= if i % MAT_STRIDE == 3 { (1.0 - ROUGHNESS_MIN) * s * (1.0 - s) } else { s * (1.0 - s) };
    }
}

/// A residual sample with the splat that supplies its material and normal.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSlot {
    pub sample: SurfaceSample,
    pub k: usize,
    pub normal: UnitVec3,
    pub weights: Vec<(u32, f64)>,
}

/// Pixels, mask pixels and residual samples for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub view: usize,
    /// Slots into the view's shaded pixels.
    pub pixels: Vec<u32>,
    /// Image pixels for the mask term.
    pub mask_pixels: Vec<u32>,
    pub residual: Vec<ResidualSlot>,
}

/// Deterministic batch for `step`.
pub fn select_batch(ctx: &Stage2Context, step: u64, rng: &DetRng) -> Result<StepBatch> {
    let usable: Vec<usize> = (0..ctx.views.len()).filter(|&v| !ctx.views[v].pixels.is_empty()).collect();
    let view = usable[rng.below(&[domain::VIEW_PICK, step], usable.len())];
    let v = &ctx.views[view];
    // Light-index audit: the light used to shade this view is its frame's tag.
    if v.k != ctx.frame_k[v.frame] {
        return Err(Error::InvalidInput(format!("view {view}: light {} but frame tagged {}", v.k, ctx.frame_k[v.frame])));
    }
    let n = ctx.cfg.pixels_per_step;
    let pixels = (0..n).map(|i| rng.below(&[domain::PIXEL_BATCH, step, 0, i as u64], v.pixels.len()) as u32).collect();
    let mask_pixels = (0..n).map(|i| rng.below(&[domain::PIXEL_BATCH, step, 1, i as u64], v.alpha.len()) as u32).collect();
    let residual = if ctx.cfg.residual_samples > 0 && ctx.cfg.weights.residual > 0.0 {
        residual_slots(ctx, step, rng)?
    } else {
        Vec::new()
    };
    Ok(StepBatch { view, pixels, mask_pixels, residual })
}

fn residual_slots(ctx: &Stage2Context, step: u64, rng: &DetRng) -> Result<Vec<ResidualSlot>> {
    let n = ctx.cfg.residual_samples;
    let samples = sample_surface(ctx.tracer.mesh(), n, rng, step, ctx.cfg.area_weighted)?;
    let ks = residual_light_indices(n, ctx.lights.len(), rng, step);
    let probe = ctx.cfg.residual_probe * ctx.extent;
    let slots = exec::map_indexed(n, |i| {
        let s = samples[i];
        let ray = Ray::new(s.point + s.dir.get() * probe, -s.dir);
        let (b, rec) = blend_recorded(&ctx.scene, &ray, ray.dir.get());
        if !(b.valid && b.alpha > 0.5) {
            return None;
        }
        Some(ResidualSlot { sample: s, k: ks[i], normal: b.normal, weights: rec.normalized_weights(b.alpha) })
    });
    Ok(slots.into_iter().flatten().collect())
}

type Acc = (f64, f64, Vec<f64>, LightGrads, Option<Error>);

/// Loss report and gradient of the weighted total over the enabled terms.
pub fn stage2_objective(
    ctx: &Stage2Context,
    state: &Stage2State,
    batch: &StepBatch,
    step: u64,
    rng: &DetRng,
    terms: Terms,
) -> Result<(LossReport, Stage2Grads)> {
    let cfg = &ctx.cfg;
    let w = &cfg.weights;
    let backend = ctx.backend(state);
    let v = &ctx.views[batch.view];
    let k = v.k;
    let n_mat = state.material.len();
    let cache_sink = !cfg.freeze_cache;
    let template = LightGrads::zeros(Some(&state.env), cache_sink.then_some(state.caches.as_slice()));
    let mut report = LossReport::default();
    let mut mat_grad = vec![0.0; n_mat];
    let mut light = template.clone();

    // Data and cache terms over the pixel batch.
    if terms.data || terms.cache {
        let scale = 1.0 / (3 * batch.pixels.len()) as f64;
        let chunk = batch.pixels.len().div_ceil(CHUNKS).max(1);
        let parts = exec::chunked_fold(
            batch.pixels.len(),
            chunk,
            || -> Acc { (0.0, 0.0, vec![0.0; n_mat], template.clone(), None) },
            |(data, cache_l, mg, lg, err), i| {
                if err.is_some() {
                    return;
                }
                let px = &v.pixels[batch.pixels[i] as usize];
                let wts = v.weights(px);
                let res = (|| -> Result<()> {
                    if terms.data {
                        let sp = ShadePoint { x: px.x, x_m: px.x_m, n: px.n, wo: px.wo, material: splat_material(&state.material, wts), k };
                        let key = [domain::SHADE, step, batch.view as u64, px.pixel as u64];
                        let rec = shade_recorded(&sp, &backend, &cfg.shade, rng, &key)?;
                        let mut d_out = [0.0; 3];
                        for c in 0..3 {
                            let d = rec.radiance[c] - px.gt[c];
                            *data += d.abs();
                            d_out[c] = scale * d.signum() * (d != 0.0) as u8 as f64;
                        }
                        let g = shade_backward(&sp, &backend, &rec, d_out, lg)?;
                        scatter(mg, wts, &g, 1.0);
                    }
                    if terms.cache {
                        let r = state.caches[k].query(px.x_m, px.wo.get())?;
                        let mut d_out = [0.0; 3];
                        for c in 0..3 {
                            let d = r[c] - px.gt[c];
                            *cache_l += d.abs();
                            d_out[c] = scale * d.signum() * (d != 0.0) as u8 as f64;
                        }
                        if cache_sink {
                            state.caches[k].accumulate_grad(px.x_m, px.wo.get(), d_out, &mut lg.caches[k]);
                        }
                    }
                    Ok(())
                })();
                if let Err(e) = res {
                    *err = Some(e);
                }
            },
        );
        for (d, c, mg, lg, err) in parts {
            if let Some(e) = err {
                return Err(e);
            }
            report.data += d;
            report.cache += c;
            for (a, b) in mat_grad.iter_mut().zip(&mg) {
                *a += b;
            }
            light.add(&lg);
        }
        report.data *= scale;
        report.cache *= scale;
        if !terms.data {
            report.data = 0.0;
        }
        if !terms.cache {
            report.cache = 0.0;
        }
    }

    // Mask entropy: alpha depends on geometry only, so it carries no gradient here.
    if terms.mask {
        let a: Vec<f64> = batch.mask_pixels.iter().map(|&p| v.alpha[p as usize]).collect();
        let m: Vec<f64> = batch.mask_pixels.iter().map(|&p| v.gt_mask[p as usize]).collect();
        report.mask = loss_mask(&a, &m).0;
    }

    // Edge-aware smoothness between each batch pixel and its right and lower
    // neighbours.
    if terms.smooth {
        let mut pairs_a = Vec::new();
        let mut pairs_r = Vec::new();
        let mut ends = Vec::new();
        for &s in &batch.pixels {
            let px = &v.pixels[s as usize];
            let (x, y) = (px.pixel as usize % v.width, px.pixel as usize / v.width);
            let ma = splat_material(&state.material, v.weights(px));
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx >= v.width || ny >= v.height {
                    continue;
                }
                let q = v.slot[ny * v.width + nx];
                if q == u32::MAX {
                    continue;
                }
                let qx = &v.pixels[q as usize];
                let mb = splat_material(&state.material, v.weights(qx));
                let weight = edge_weight(px.gt, qx.gt);
                pairs_a.push(SmoothPair { p: ma.albedo, q: mb.albedo, weight });
                pairs_r.push(SmoothPair { p: [ma.roughness], q: [mb.roughness], weight });
                ends.push((s, q));
            }
        }
        let (la, ga) = loss_smooth(&pairs_a);
        let (lr, gr) = loss_smooth(&pairs_r);
        report.albedo_smooth = la;
        report.rough_smooth = lr;
        for (i, &(s, q)) in ends.iter().enumerate() {
            let gp = MaterialGrad { albedo: ga[i].0.map(|g| g * w.albedo_smooth), roughness: gr[i].0[0] * w.rough_smooth };
            let gq = MaterialGrad { albedo: ga[i].1.map(|g| g * w.albedo_smooth), roughness: gr[i].1[0] * w.rough_smooth };
            scatter(&mut mat_grad, v.weights(&v.pixels[s as usize]), &gp, 1.0);
            scatter(&mut mat_grad, v.weights(&v.pixels[q as usize]), &gq, 1.0);
        }
    }

    if terms.light {
        let (ls, gs) = loss_light_smooth(&state.env);
        let (lw, gw) = loss_light_white(&state.env);
        report.light_smooth = ls;
        report.light_white = lw;
        for (i, g) in light.env.iter_mut().enumerate() {
            *g += w.light_smooth * gs[i] + w.light_white * gw[i];
        }
    }

    if terms.residual && !batch.residual.is_empty() {
        let points: Vec<ResidualPoint> = batch
            .residual
            .iter()
            .map(|r| ResidualPoint {
                sample: r.sample,
                k: r.k,
                material: splat_material(&state.material, &r.weights),
                normal: r.normal,
            })
            .collect();
        let out = loss_residual(&points, &state.caches, &backend, &cfg.shade, rng, step, cfg.stop_grad, &template)?;
        report.residual = out.value;
        for (r, g) in batch.residual.iter().zip(&out.material_grads) {
            scatter(&mut mat_grad, &r.weights, g, w.residual);
        }
        for (a, b) in light.env.iter_mut().zip(&out.light.env) {
            *a += w.residual * b;
        }
        for (ca, cb) in light.caches.iter_mut().zip(&out.light.caches) {
            for (a, b) in ca.iter_mut().zip(cb) {
                *a += w.residual * b;
            }
        }
    }

    to_logit_grad(&state.material, &mut mat_grad);
    let report = report.finalize(w)?;
    Ok((report, Stage2Grads { material: mat_grad, env: light.env, caches: light.caches }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub state: Stage2State,
    pub losses: Vec<(usize, LossReport)>,
}

/// Runs `cfg.steps` Adam steps from `state`. Aborts on a non-finite loss or
/// gradient, or if the frozen geometry or mesh changed.
pub fn stage2_decompose(ctx: &Stage2Context, set: &GaussianSet, mut state: Stage2State, rng: &DetRng) -> Result<Stage2Output> {
    let cfg = &ctx.cfg;
    if state.material.len() != ctx.n_gaussians * MAT_STRIDE {
        return Err(Error::InvalidInput("material vector does not match the surfel count".into()));
    }
    let mut adam_m = AdamState::new(state.material.len());
    let mut adam_e = AdamState::new(state.env.raw.len());
    let mut adam_c: Vec<AdamState> = state.caches.iter().map(|c| AdamState::new(c.param_count())).collect();
    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        let batch = select_batch(ctx, step as u64, rng)?;
        let (rep, grads) = stage2_objective(ctx, &state, &batch, step as u64, rng, Terms::default())
            .map_err(|e| match e {
                Error::Numeric { op, detail } => Error::numeric(op, format!("stage 2 step {step}, view {}: {detail}", batch.view)),
                other => other,
            })?;
        let bad = |name: &str, g: &[f64]| -> Result<()> {
            match g.iter().position(|v| !v.is_finite()) {
                Some(i) => Err(Error::numeric("stage2", format!("step {step}: {name} gradient[{i}] not finite ({rep:?})"))),
                None => Ok(()),
            }
        };
        bad("material", &grads.material)?;
        bad("env", &grads.env)?;
        for g in &grads.caches {
            bad("cache", g)?;
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log::info!("stage2 step {step}: total {:.5} data {:.5} cache {:.5} residual {:.5}", rep.total, rep.data, rep.cache, rep.residual);
        }
        losses.push((step, rep));
        let decay = cfg.lr_final.powf(step as f64 / (cfg.steps - 1).max(1) as f64);
        adam_m.step(&mut state.material, &grads.material, cfg.lr_material * decay);
        adam_e.step(&mut state.env.raw, &grads.env, cfg.lr_env * decay);
        if !cfg.freeze_cache {
            for (k, c) in state.caches.iter_mut().enumerate() {
                adam_c[k].step(&mut c.params, &grads.caches[k], cfg.lr_cache * decay);
            }
        }
    }
    ctx.check_frozen(set)?;
    for c in &state.caches {
        c.check_finite()?;
    }
    Ok(Stage2Output { state, losses })
}

/// `set` with its material replaced by stage-2 logits.
pub fn with_material(set: &GaussianSet, material: &[f64]) -> Result<GaussianSet> {
    if material.len() != set.material.len() {
        return Err(Error::InvalidInput("material length mismatch".into()));
    }
    let mut out = set.clone();
    out.material.copy_from_slice(material);
    Ok(out)
}

#[cfg(test)]
pub(super) mod tests_support {
    use super::*;
    use crate::cache::{CacheConfig, HashGridConfig};
    use crate::camera::Camera;
    use crate::gsplat::{seed_on_mesh, surfel::SeedOptions};
    use crate::image::ImageBuffer;
    use crate::math::Aabb;
    use crate::meshproxy::TriangleMesh;

    pub fn quad(y: f64, half: f64) -> TriangleMesh {
        TriangleMesh::new(
            vec![Vec3::new(-half, y, -half), Vec3::new(half, y, -half), Vec3::new(half, y, half), Vec3::new(-half, y, half)],
            vec![[0, 2, 1], [0, 3, 2]],
        )
        .unwrap()
    }

    pub fn small_cache(k: usize) -> RadianceCache {
        let cfg = CacheConfig {
            grid: HashGridConfig { levels: 2, table_size: 1 << 6, features: 2, base_resolution: 2, growth: 2.0 },
            hidden: 8,
            n_freq: 1,
            ..Default::default()
        };
        RadianceCache::new(k, cfg, Aabb { min: Vec3::splat(-1.0), max: Vec3::splat(1.0) }, &DetRng::new(k as u64)).unwrap()
    }

    pub fn frames(k_count: usize) -> Vec<Frame> {
        (0..2 * k_count)
            .map(|v| {
                let a = v as f64 * 1.3;
                let eye = Vec3::new(1.2 * a.sin(), 1.5, 1.2 * a.cos());
                let cam = Camera::look_at(eye, Vec3::ZERO, Vec3::Y, 0.9, 8, 8).unwrap();
                let mut img = ImageBuffer::new(8, 8, 4).unwrap();
                for p in 0..64 {
                    img.data[p * 4..p * 4 + 4].copy_from_slice(&[0.3 + 0.002 * p as f64, 0.25, 0.2, 1.0]);
                }
                Frame { name: format!("v{v}"), image: img, camera: cam, angle_deg: 0.0, k: Some(v % k_count) }
            })
            .collect()
    }

    pub fn setup(cfg: Stage2Config, k_count: usize) -> (Stage2Context, GaussianSet, Stage2State) {
        let mesh = quad(0.0, 0.6);
        let set = seed_on_mesh(&mesh, 0, &SeedOptions { spacing: 0.3, scale_factor: 0.7, ..Default::default() }).unwrap();
        let lights = LightAngleTable::new((0..k_count).map(|k| k as f64 * 2.0).collect()).unwrap();
        let ctx = Stage2Context::new(cfg, &frames(k_count), &set, MeshTracer::new(mesh), lights, 1.2).unwrap();
        let caches = (0..k_count).map(small_cache).collect();
        let state = ctx.initial_state(&set, caches).unwrap();
        (ctx, set, state)
    }

    pub fn cheap() -> Stage2Config {
        Stage2Config {
            steps: 30,
            pixels_per_step: 32,
            residual_samples: 16,
            shade: ShadeOptions { n_samples: 4, ..Default::default() },
            env_height: 4,
            lr_material: 5e-2,
            lr_env: 5e-2,
            ..Default::default()
        }
    }

}


#[cfg(test)]
mod fd_tests {
    use super::tests_support::*;
    use super::*;

    fn check(terms: Terms, cfg: Stage2Config) {
        let (ctx, _, mut state) = setup(cfg, 2);
        let rng = DetRng::new(11);
        // Away from the kinks of the L1 terms at a uniform start.
        for (i, v) in state.material.iter_mut().enumerate() {
            *v += rng.uniform(&[99, i as u64]) - 0.5;
        }
        for (i, v) in state.env.raw.iter_mut().enumerate() {
            *v += 0.5 * (rng.uniform(&[98, i as u64]) - 0.5);
        }
        let b = select_batch(&ctx, 1, &rng).unwrap();
        let (_, g) = stage2_objective(&ctx, &state, &b, 1, &rng, terms).unwrap();
        let f = |s: &Stage2State| stage2_objective(&ctx, s, &b, 1, &rng, terms).unwrap().0.total;
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in (0..state.material.len()).step_by(3) {
            let mut p = state.clone();
            p.material[i] += h;
            let mut m = state.clone();
            m.material[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            worst = worst.max((fd - g.material[i]).abs() / (1e-6 + fd.abs().max(g.material[i].abs())).max(1e-3));
        }
        for i in 0..state.env.raw.len() {
            let mut p = state.clone();
            p.env.raw[i] += h;
            let mut m = state.clone();
            m.env.raw[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            worst = worst.max((fd - g.env[i]).abs() / (1e-6 + fd.abs().max(g.env[i].abs())).max(1e-3));
        }
        assert!(worst < 1e-3, "{terms:?}: worst relative error {worst}");
    }

    #[test]
    fn data_gradient_matches_differences() {
        check(Terms { data: true, ..Terms::NONE }, cheap());
    }

    #[test]
    fn smooth_gradient_matches_differences() {
        check(Terms { smooth: true, ..Terms::NONE }, cheap());
    }

    #[test]
    fn light_gradient_matches_differences() {
        check(Terms { light: true, ..Terms::NONE }, cheap());
    }

    #[test]
    fn cache_term_has_no_material_or_env_gradient() {
        check(Terms { cache: true, mask: true, ..Terms::NONE }, cheap());
    }

    #[test]
    fn residual_gradient_matches_differences() {
        check(Terms { residual: true, ..Terms::NONE }, cheap());
    }
}
