//! Stage 1: surfel geometry and view-dependent color from captures under a
//! single light.

use serde::{Deserialize, Serialize};

use super::dataset::Frame;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec;
use crate::gsplat::{
    blend_backward, blend_recorded, coeff_count, quat_from_frame, roughness_logit, Gaussian2D, GaussianGrads,
    GaussianScene, GaussianSet, RayBlendGrad,
};
use crate::math::{logit, orthonormal_basis, Aabb, Vec3};
use crate::optim::{loss_l1, loss_mask, ParamStore};
use crate::rng::{domain, DetRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    /// Pixels per step, drawn from one view.
    pub batch: usize,
    pub lr_geometry: f64,
    pub lr_sh: f64,
    pub mask_weight: f64,
    /// Visual-hull voxels per axis.
    pub hull_resolution: usize,
    pub n_gaussians: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 2000,
            batch: 2048,
            lr_geometry: 1e-3,
            lr_sh: 1e-2,
            mask_weight: 0.1,
            hull_resolution: 48,
            n_gaussians: 2000,
        }
    }
}

/// Point closest (least squares) to every camera's optical axis.
pub fn look_at_center(cameras: &[Camera]) -> Vec3 {
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for c in cameras {
        let d = c.ray_for_pixel(c.cx, c.cy).dir.get().to_array();
        let o = c.center().to_array();
        for i in 0..3 {
            for j in 0..3 {
                let m = (i == j) as u8 as f64 - d[i] * d[j];
                a[i][j] += m;
                b[i] += m * o[j];
            }
        }
    }
    let det = crate::math::Mat3::from_rows(a).determinant();
    if det.abs() < 1e-12 {
        return Aabb::from_points(cameras.iter().map(Camera::center)).center();
    }
    // Cramer's rule.
    let solve = |col: usize| {
        let mut m = a;
        for r in 0..3 {
            m[r][col] = b[r];
        }
        crate::math::Mat3::from_rows(m).determinant() / det
    };
    Vec3::new(solve(0), solve(1), solve(2))
}

/// Cube around the look-at center reaching 60% of the way to the nearest
/// camera.
pub fn capture_bounds(cameras: &[Camera]) -> Aabb {
    let c = look_at_center(cameras);
    let r = cameras.iter().map(|cam| (cam.center() - c).length()).fold(f64::INFINITY, f64::min);
    let h = 0.6 * r;
    Aabb { min: c - Vec3::splat(h), max: c + Vec3::splat(h) }
}

/// Surfels on the boundary of the mask visual hull: voxels that project
/// inside every view's frame and mask, with at least one carved neighbour. Normals
/// point toward the carved neighbours; `count` voxels are taken at an even
/// stride.
pub fn visual_hull_init(frames: &[&Frame], bounds: Aabb, resolution: usize, count: usize, sh_degree: usize) -> Result<GaussianSet> {
    if resolution < 2 || count == 0 {
        return Err(Error::Config("hull resolution must be >= 2 and count >= 1".into()));
    }
    let r = resolution;
    let size = bounds.extent() / r as f64;
    let pos = |i: usize, j: usize, k: usize| {
        bounds.min + Vec3::new((i as f64 + 0.5) * size.x, (j as f64 + 0.5) * size.y, (k as f64 + 0.5) * size.z)
    };
    let inside: Vec<bool> = exec::map_indexed(r * r * r, |idx| {
        let (i, j, k) = (idx % r, (idx / r) % r, idx / (r * r));
        let p = pos(i, j, k);
        frames.iter().all(|f| match f.camera.project(p) {
            Some((x, y)) if x >= 0.0 && y >= 0.0 && x < f.camera.width as f64 && y < f.camera.height as f64 => {
                f.mask(y as usize * f.camera.width + x as usize)
            }
            // Outside a frame counts as carved (frustum intersection).
            _ => false,
        })
    });
    let at = |i: isize, j: isize, k: isize| {
        if i < 0 || j < 0 || k < 0 || i >= r as isize || j >= r as isize || k >= r as isize {
            return false;
        }
        inside[k as usize * r * r + j as usize * r + i as usize]
    };
    let mut shell = Vec::new();
    for k in 0..r as isize {
        for j in 0..r as isize {
            for i in 0..r as isize {
                if !at(i, j, k) {
                    continue;
                }
                let mut n = Vec3::ZERO;
                for (d, axis) in [(Vec3::X, 0), (Vec3::Y, 1), (Vec3::Z, 2)] {
                    let step = |s: isize| match axis {
                        0 => at(i + s, j, k),
                        1 => at(i, j + s, k),
                        _ => at(i, j, k + s),
                    };
                    if !step(1) {
                        n += d;
                    }
                    if !step(-1) {
                        n -= d;
                    }
                }
                if let Some(n) = n.normalized() {
                    shell.push((pos(i as usize, j as usize, k as usize), n));
                }
            }
        }
    }
    if shell.is_empty() {
        return Err(Error::Dataset("visual hull is empty: check masks and cameras".into()));
    }
    let stride = (shell.len() as f64 / count as f64).max(1.0);
    let scale = size.max_component();
    let mut set = GaussianSet::new(sh_degree)?;
    let mut t = 0.0;
    while (t as usize) < shell.len() && set.len() < count {
        let (p, n) = shell[t as usize];
        let (tu, tv) = orthonormal_basis(n);
        set.push(&Gaussian2D {
            mu: p,
            quat: quat_from_frame(tu.get(), tv.get(), n.get()),
            log_su: scale.ln(),
            log_sv: scale.ln(),
            opacity_logit: logit(0.7),
            sh: vec![[0.0; 3]; coeff_count(sh_degree)],
            albedo_logit: [0.0; 3],
            roughness_logit: roughness_logit(0.5),
        })?;
        t += stride;
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Report {
    /// `(step, masked L1, mask BCE)`.
    pub losses: Vec<(usize, f64, f64)>,
}

/// Fits surfels to `frames`. With `geometry_frozen` only SH colors move
/// (known-geometry mode). Zero steps return `init` unchanged.
pub fn stage1_fit(
    frames: &[&Frame],
    init: GaussianSet,
    cfg: &Stage1Config,
    geometry_frozen: bool,
    rng: &DetRng,
) -> Result<(GaussianSet, Stage1Report)> {
    if frames.is_empty() {
        return Err(Error::Dataset("stage 1 needs at least one view".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("stage-1 batch must be >= 1".into()));
    }
    let mut store = ParamStore::new();
    let g_geo = store.add_group("geometry", init.geometry.clone(), cfg.lr_geometry, !geometry_frozen)?;
    let g_sh = store.add_group("sh", init.sh.clone(), cfg.lr_sh, true)?;
    let mut set = init;
    let mut losses = Vec::new();
    for step in 0..cfg.steps {
        set.geometry.copy_from_slice(store.values(g_geo));
        set.sh.copy_from_slice(store.values(g_sh));
        let scene = GaussianScene::new(&set)?;
        let f = frames[rng.below(&[domain::STAGE1, step as u64], frames.len())];
        let npx = f.camera.pixel_count();
        let pix: Vec<usize> =
            (0..cfg.batch).map(|i| rng.below(&[domain::STAGE1, step as u64, 1, i as u64], npx)).collect();
        let fwd = exec::map_indexed(pix.len(), |i| {
            let p = pix[i];
            let ray = f.camera.ray_for_pixel_center(p % f.camera.width, p / f.camera.width);
            let (b, rec) = blend_recorded(&scene, &ray, ray.dir.get());
            (ray, b, rec)
        });
        let pred: Vec<[f64; 3]> = fwd.iter().map(|(_, b, _)| b.color).collect();
        let gt: Vec<[f64; 3]> = pix.iter().map(|&p| f.rgb(p)).collect();
        let mask: Vec<bool> = pix.iter().map(|&p| f.mask(p)).collect();
        let alpha: Vec<f64> = fwd.iter().map(|(_, b, _)| b.alpha).collect();
        let gt_mask: Vec<f64> = pix.iter().map(|&p| f.image.alpha_at(p)).collect();
        let (l1, d_color) = loss_l1(&pred, &gt, &mask);
        let (bce, d_alpha) = loss_mask(&alpha, &gt_mask);
        if !(l1.is_finite() && bce.is_finite()) {
            return Err(Error::numeric("stage1", format!("loss not finite at step {step}")));
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("stage1 step {step}: l1 {l1:.4} mask {bce:.4}");
            losses.push((step, l1, bce));
        }
        let chunk = pix.len().div_ceil(8).max(1);
        let parts = exec::chunked_fold(pix.len(), chunk, || GaussianGrads::zeros_like(&set), |g, i| {
            let (ray, b, rec) = &fwd[i];
            let up = RayBlendGrad { color: d_color[i], alpha: cfg.mask_weight * d_alpha[i], ..Default::default() };
            blend_backward(&scene, ray, rec, b, &up, g);
        });
        let mut grads = GaussianGrads::zeros_like(&set);
        for p in &parts {
            grads.add(p);
        }
        store.adam_step(&[grads.geometry, grads.sh])?;
    }
    set.geometry.copy_from_slice(store.values(g_geo));
    set.sh.copy_from_slice(store.values(g_sh));
    set.validate()?;
    Ok((set, Stage1Report { losses }))
}

/// Mean PSNR of rendered color against the capture over masked pixels.
pub fn masked_render_psnr(set: &GaussianSet, frames: &[&Frame]) -> Result<f64> {
    let scene = GaussianScene::new(set)?;
    let mut total = 0.0;
    for f in frames {
        let maps = crate::gsplat::render_maps(&f.camera, &scene)?;
        let (mut se, mut n) = (0.0, 0usize);
        for p in 0..f.camera.pixel_count() {
            if f.mask(p) {
                let (a, b) = (maps.color.rgb_at(p), f.rgb(p));
                se += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
                n += 3;
            }
        }
        total += super::metrics::psnr_from_mse(se / n.max(1) as f64, 1.0);
    }
    Ok(total / frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsplat::{seed_on_mesh, surfel::SeedOptions};
    use crate::image::ImageBuffer;
    use crate::oracle::scene::box_mesh;

    fn frames_of(set: &GaussianSet, n: usize) -> Vec<Frame> {
        let scene = GaussianScene::new(set).unwrap();
        (0..n)
            .map(|v| {
                let a = v as f64 * 2.0 * std::f64::consts::PI / n as f64;
                let eye = Vec3::new(2.5 * a.sin(), 1.2, 2.5 * a.cos());
                let cam = Camera::look_at(eye, Vec3::ZERO, Vec3::Y, 0.8, 24, 24).unwrap();
                let maps = crate::gsplat::render_maps(&cam, &scene).unwrap();
                let mut img = ImageBuffer::new(24, 24, 4).unwrap();
                for p in 0..cam.pixel_count() {
                    let c = maps.color.rgb_at(p);
                    img.data[p * 4..p * 4 + 3].copy_from_slice(&c);
                    img.data[p * 4 + 3] = if maps.alpha.data[p] > 0.5 { 1.0 } else { 0.0 };
                }
                Frame { name: format!("v{v}"), image: img, camera: cam, angle_deg: 0.0, k: Some(0) }
            })
            .collect()
    }

    fn cube_set(color: f64) -> GaussianSet {
        let mesh = box_mesh(Vec3::splat(-0.4), Vec3::splat(0.4), &[]).unwrap();
        let mut set = seed_on_mesh(&mesh, 0, &SeedOptions { spacing: 0.2, scale_factor: 0.9, ..Default::default() }).unwrap();
        let c0 = crate::gsplat::sh::SH_C0;
        for v in set.sh.iter_mut() {
            *v = (color - 0.5) / c0;
        }
        set
    }

    #[test]
    fn zero_steps_is_identity() {
        let set = cube_set(0.3);
        let frames = frames_of(&set, 2);
        let refs: Vec<&Frame> = frames.iter().collect();
        let cfg = Stage1Config { steps: 0, ..Default::default() };
        let (out, _) = stage1_fit(&refs, set.clone(), &cfg, false, &DetRng::new(1)).unwrap();
        assert_eq!(out, set);
    }

    #[test]
    fn known_geometry_fit_recovers_color_and_keeps_geometry() {
        let target = cube_set(0.3);
        let frames = frames_of(&target, 6);
        let refs: Vec<&Frame> = frames.iter().collect();
        let init = cube_set(0.8);
        let cfg = Stage1Config { steps: 150, batch: 256, lr_sh: 3e-2, ..Default::default() };
        let before = masked_render_psnr(&init, &refs).unwrap();
        let (out, rep) = stage1_fit(&refs, init.clone(), &cfg, true, &DetRng::new(2)).unwrap();
        assert_eq!(out.geometry, init.geometry);
        let after = masked_render_psnr(&out, &refs).unwrap();
        assert!(after > before + 10.0 && after > 30.0, "psnr {before} -> {after}");
        assert!(rep.losses.last().unwrap().1 < rep.losses[0].1);
    }

    #[test]
    fn free_geometry_fit_reduces_loss_from_the_hull() {
        let target = cube_set(0.6);
        let frames = frames_of(&target, 8);
        let refs: Vec<&Frame> = frames.iter().collect();
        let cams: Vec<Camera> = frames.iter().map(|f| f.camera.clone()).collect();
        let c = look_at_center(&cams);
        assert!(c.length() < 1e-6, "center {c:?}");
        let init = visual_hull_init(&refs, capture_bounds(&cams), 24, 400, 0).unwrap();
        assert!(init.len() > 100);
        for i in 0..init.len() {
            let p = init.mu(i);
            // Cameras all look down, so the hull is only bounded above the
            // cube's base; eight views and 0.14 voxels leave it loose by ~2 voxels.
            if p.y > 0.0 {
                assert!(p.x.abs().max(p.y.abs()).max(p.z.abs()) < 0.9, "{p:?} far outside the cube");
            }
        }
        let cfg = Stage1Config { steps: 120, batch: 256, lr_geometry: 2e-3, lr_sh: 3e-2, ..Default::default() };
        let before = masked_render_psnr(&init, &refs).unwrap();
        let (out, _) = stage1_fit(&refs, init, &cfg, false, &DetRng::new(3)).unwrap();
        let after = masked_render_psnr(&out, &refs).unwrap();
        assert!(after > before + 3.0, "psnr {before} -> {after}");
    }
}
