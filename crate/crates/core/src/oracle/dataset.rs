//! Synthetic rotated-light dataset generation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ao::mesh_ao;
use super::path::{PathTraceConfig, PathTracer};
use super::scene::{facing, SceneDescription, SceneTracer};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec;
use crate::image::{save_linear, write_pfm, ImageBuffer};
use crate::math::Vec3;
use crate::pipeline::schema::{write_json, DatasetMeta, FrameEntry, TransformsFile};
use crate::rng::{domain, DetRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub scene: String,
    pub angles_deg: Vec<f64>,
    pub views_per_angle: usize,
    pub n_test: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub path: PathTraceConfig,
    pub gt_ao_samples: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scene: "shadow-box".into(),
            angles_deg: vec![0.0, 120.0, 240.0],
            views_per_angle: 32,
            n_test: 8,
            width: 128,
            height: 128,
            fov_deg: 40.0,
            path: PathTraceConfig::default(),
            gt_ao_samples: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenReport {
    pub train_frames: usize,
    pub test_frames: usize,
}

/// Orbit camera `v` of `n` in ring `ring` (rings interleave azimuths).
fn orbit_camera(scene: &SceneDescription, cfg: &GenConfig, rng: &DetRng, v: usize, n: usize, ring: u64, rings: usize) -> Result<Camera> {
    let key = |dim: u64| [domain::DATASET, ring, v as u64, dim];
    let az = 2.0 * std::f64::consts::PI * (v as f64 + (ring as f64 + rng.uniform(&key(0))) / rings as f64) / n as f64;
    let el = (18.0 + 40.0 * rng.uniform(&key(1))).to_radians();
    let r = scene.orbit_radius;
    let eye = scene.focus + Vec3::new(r * el.cos() * az.sin(), r * el.sin(), r * el.cos() * az.cos());
    Camera::look_at(eye, scene.focus, Vec3::Y, cfg.fov_deg.to_radians(), cfg.width, cfg.height)
}

/// Ground-truth material, normal, AO and region maps of one view.
pub struct GtMaps {
    pub albedo: ImageBuffer,
    pub roughness: ImageBuffer,
    pub normal: ImageBuffer,
    pub ao: ImageBuffer,
    pub region: Option<ImageBuffer>,
}

pub fn gt_maps(scene: &SceneDescription, tracer: &SceneTracer, camera: &Camera, ao_samples: usize, rng: &DetRng, view_key: u64) -> GtMaps {
    let extent = scene.extent();
    let px = exec::map_indexed(camera.pixel_count(), |p| {
        let ray = camera.ray_for_pixel_center(p % camera.width, p / camera.width);
        match tracer.tracer.intersect(&ray) {
            None => ([0.0; 3], 0.0, [0.0; 3], 0.0, 0.0),
            Some(hit) => {
                let info = tracer.surface(hit);
                let n = facing(hit.normal, -ray.dir.get()).get();
                let ao = mesh_ao(&tracer.tracer, hit.point, n, 1e-4 * extent, ao_samples, rng, view_key * 1_000_003 + p as u64);
                let inside = scene.region.map_or(0.0, |r| if r.contains(hit.point, 0.0) { 1.0 } else { 0.0 });
                (info.albedo, info.roughness, n.to_array(), ao, inside)
            }
        }
    });
    let (w, h) = (camera.width, camera.height);
    let img = |ch: usize, f: &dyn Fn(&([f64; 3], f64, [f64; 3], f64, f64)) -> Vec<f64>| {
        ImageBuffer::from_data(w, h, ch, px.iter().flat_map(f).collect()).expect("finite maps")
    };
    GtMaps {
        albedo: img(3, &|p| p.0.to_vec()),
        roughness: img(1, &|p| vec![p.1]),
        normal: img(3, &|p| p.2.to_vec()),
        ao: img(1, &|p| vec![p.3]),
        region: scene.region.map(|_| img(1, &|p| vec![p.4])),
    }
}

fn frame(path: String, cam: &Camera, angle: f64) -> FrameEntry {
    FrameEntry { file_path: path, transform_matrix: cam.to_nerf_matrix(), light_angle_deg: Some(angle) }
}

/// Renders the scene under every light angle and writes a dataset
/// directory: `transforms_{train,test}.json`, `train/` and `test/` images
/// (PFM plus PNG preview), ground-truth maps for test views, `mesh.obj`,
/// `env.pfm` and `scene.json`.
pub fn gen_dataset(cfg: &GenConfig, out: &Path) -> Result<GenReport> {
    if cfg.angles_deg.is_empty() {
        return Err(Error::Config("at least one light angle is required".into()));
    }
    if cfg.views_per_angle == 0 {
        return Err(Error::Config("views_per_angle must be >= 1".into()));
    }
    let scene = SceneDescription::by_name(&cfg.scene)?;
    let tracer = SceneTracer::new(&scene)?;
    let rng = DetRng::new(cfg.seed);
    let extent = scene.extent();
    for d in ["train", "test"] {
        fs::create_dir_all(out.join(d)).map_err(|e| Error::io(out.join(d), e))?;
    }
    let k_count = cfg.angles_deg.len();
    let mut train = Vec::new();
    for (k, &deg) in cfg.angles_deg.iter().enumerate() {
        let pt = PathTracer::new(&tracer, &scene.env, deg.to_radians(), extent, cfg.path)?;
        for v in 0..cfg.views_per_angle {
            let idx = train.len();
            let cam = orbit_camera(&scene, cfg, &rng, v, cfg.views_per_angle, k as u64, k_count)?;
            let img = pt.render(&cam, &rng, idx as u64);
            save_linear(&out.join(format!("train/r_{idx}")), &img)?;
            train.push(frame(format!("./train/r_{idx}"), &cam, deg));
            log::info!("train view {idx} (light {deg} deg) rendered");
        }
    }
    let mut test = Vec::new();
    for t in 0..cfg.n_test {
        let k = t % k_count;
        let deg = cfg.angles_deg[k];
        let cam = orbit_camera(&scene, cfg, &rng, t, cfg.n_test, 1000, 1)?;
        let pt = PathTracer::new(&tracer, &scene.env, deg.to_radians(), extent, cfg.path)?;
        let key = 1_000_000 + t as u64;
        let img = pt.render(&cam, &rng, key);
        let base = out.join(format!("test/r_{t}"));
        save_linear(&base, &img)?;
        let maps = gt_maps(&scene, &tracer, &cam, cfg.gt_ao_samples, &rng, key);
        let p = |s: &str| out.join(format!("test/r_{t}_{s}.pfm"));
        write_pfm(&p("albedo"), &maps.albedo)?;
        write_pfm(&p("roughness"), &maps.roughness)?;
        write_pfm(&p("normal"), &maps.normal)?;
        write_pfm(&p("ao"), &maps.ao)?;
        if let Some(r) = &maps.region {
            write_pfm(&p("region"), r)?;
        }
        test.push(frame(format!("./test/r_{t}"), &cam, deg));
    }
    let fov_x = cfg.fov_deg.to_radians();
    write_json(&out.join("transforms_train.json"), &TransformsFile { camera_angle_x: fov_x, frames: train })?;
    write_json(&out.join("transforms_test.json"), &TransformsFile { camera_angle_x: fov_x, frames: test })?;
    scene.merged_mesh()?.write_obj(&out.join("mesh.obj"))?;
    scene.env.save(&out.join("env.pfm"))?;
    write_json(
        &out.join("scene.json"),
        &DatasetMeta {
            scene: scene.name.clone(),
            angles_deg: cfg.angles_deg.clone(),
            width: cfg.width,
            height: cfg.height,
            extent,
            seed: cfg.seed,
            region: scene.region,
        },
    )?;
    write_json(&out.join("gen_config.json"), cfg)?;
    Ok(GenReport { train_frames: k_count * cfg.views_per_angle, test_frames: cfg.n_test })
}
