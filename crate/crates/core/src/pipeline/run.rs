//! End-to-end runs: geometry, cache pretraining, decomposition, evaluation,
//! and the files each step leaves in the output directory.
//!
//! Output layout:
//!
//! | file | content |
//! |---|---|
//! | `config.json` | resolved [`RunConfig`] |
//! | `stage1_gaussians.txt`, `stage1_losses.csv` | fitted surfels, stage-1 loss log |
//! | `mesh.obj` | proxy mesh |
//! | `cache_{k}.bin` | radiance cache per light |
//! | `gaussians.txt` | surfels with decomposed material |
//! | `env.json`, `env.pfm` | environment parameters (exact) and preview |
//! | `losses.csv` | stage-2 loss log |
//! | `metrics.csv` | test-view metrics |
//! | `maps/` | predicted albedo, roughness and normal per test view |
//! | `manifest.json` | config, seed and content hashes of the above |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{load_dataset, Dataset, Frame};
use super::metrics::{compute_metrics, MetricsReport, ViewMaps};
use super::proxy::extract_proxy_mesh;
use super::schema::{read_json, write_json};
use super::stage1::{capture_bounds, stage1_fit, visual_hull_init, Stage1Report};
use super::stage2::{stage2_decompose, with_material, Stage2Context, Stage2Output};
use crate::cache::{pretrain_caches, PretrainReport, RadianceCache};
use crate::camera::Camera;
use crate::envlight::EnvironmentMap;
use crate::error::{Error, Result};
use crate::gsplat::{render_maps, seed_on_mesh, GaussianScene, GaussianSet};
use crate::image::{read_pfm, save_linear, ImageBuffer};
use crate::math::{Aabb, Vec3};
use crate::meshproxy::{MeshTracer, TriangleMesh};
use crate::optim::write_loss_csv;
use crate::rng::DetRng;

/// Surfels and the proxy mesh they are shaded against.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub set: GaussianSet,
    pub mesh: TriangleMesh,
    pub stage1: Stage1Report,
}

/// Training frames of the first light, which stage 1 fits.
fn stage1_frames(ds: &Dataset) -> Vec<&Frame> {
    ds.train.iter().filter(|f| f.k == Some(0)).collect()
}

/// Known geometry seeds surfels on `mesh.obj` and fits only their color;
/// otherwise a visual hull is fitted and a mesh extracted from it.
pub fn run_geometry(cfg: &RunConfig, ds: &Dataset, rng: &DetRng) -> Result<Geometry> {
    let frames = stage1_frames(ds);
    if cfg.known_geometry {
        let mesh = TriangleMesh::read_obj(&ds.root.join("mesh.obj"))?;
        let init = seed_on_mesh(&mesh, cfg.sh_degree, &cfg.seed_options)?;
        let (set, stage1) = stage1_fit(&frames, init, &cfg.stage1, true, rng)?;
        return Ok(Geometry { set, mesh, stage1 });
    }
    if frames.len() < 8 {
        log::warn!("stage 1 has only {} views of one light; the fit may be poor", frames.len());
    }
    let cams: Vec<Camera> = frames.iter().map(|f| f.camera.clone()).collect();
    let bounds = capture_bounds(&cams);
    let init = visual_hull_init(&frames, bounds, cfg.stage1.hull_resolution, cfg.stage1.n_gaussians, cfg.sh_degree)?;
    let (set, stage1) = stage1_fit(&frames, init, &cfg.stage1, false, rng)?;
    let mesh = extract_proxy_mesh(&set, &cams, Some(bounds), &cfg.tsdf)?;
    Ok(Geometry { set, mesh, stage1 })
}

pub fn stage2_context(cfg: &RunConfig, ds: &Dataset, geom: &Geometry) -> Result<Stage2Context> {
    Stage2Context::new(cfg.stage2.clone(), &ds.train, &geom.set, MeshTracer::new(geom.mesh.clone()), ds.lights.clone(), ds.extent())
}

/// Cache domain: the mesh box grown by a tenth of the scene extent.
pub fn cache_bounds(mesh: &TriangleMesh, extent: f64) -> Aabb {
    let b = mesh.bounds();
    let pad = Vec3::splat(0.1 * extent);
    Aabb { min: b.min - pad, max: b.max + pad }
}

pub fn init_caches(cfg: &RunConfig, ctx: &Stage2Context, rng: &DetRng) -> Result<Vec<RadianceCache>> {
    let bounds = cache_bounds(ctx.tracer.mesh(), ctx.extent);
    (0..ctx.lights.len()).map(|k| RadianceCache::new(k, cfg.cache.clone(), bounds, rng)).collect()
}

/// Fresh caches trained on every shaded training pixel.
pub fn run_pretrain(cfg: &RunConfig, ctx: &Stage2Context, rng: &DetRng) -> Result<(Vec<RadianceCache>, PretrainReport)> {
    let mut caches = init_caches(cfg, ctx, rng)?;
    let report = pretrain_caches(&mut caches, &ctx.cache_views(), &cfg.pretrain, rng)?;
    log::info!("cache pretraining MSE per light: {:?}", report.final_mse);
    Ok((caches, report))
}

pub fn run_stage2(ctx: &Stage2Context, set: &GaussianSet, caches: Vec<RadianceCache>, rng: &DetRng) -> Result<Stage2Output> {
    let state = ctx.initial_state(set, caches)?;
    stage2_decompose(ctx, set, state, rng)
}

fn test_frames<'a>(cfg: &RunConfig, ds: &'a Dataset) -> &'a [Frame] {
    let n = if cfg.eval.max_views == 0 { ds.test.len() } else { cfg.eval.max_views.min(ds.test.len()) };
    &ds.test[..n]
}

fn read_gt(root: &Path, frame: &Frame, what: &str) -> Result<Option<ImageBuffer>> {
    let p = root.join(format!("{}_{what}.pfm", frame.name));
    if p.exists() {
        read_pfm(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Predicted material maps of one view.
pub struct PredMaps {
    pub albedo: ImageBuffer,
    pub roughness: ImageBuffer,
    pub normal: ImageBuffer,
    pub alpha: ImageBuffer,
}

pub fn predict_maps(scene: &GaussianScene, camera: &Camera) -> Result<PredMaps> {
    let m = render_maps(camera, scene)?;
    Ok(PredMaps { albedo: m.albedo, roughness: m.roughness, normal: m.normal, alpha: m.alpha })
}

/// Metrics on the test views that carry ground-truth maps. `None` when
/// the dataset has none.
pub fn evaluate(cfg: &RunConfig, ds: &Dataset, set: &GaussianSet, maps_dir: Option<&Path>) -> Result<Option<MetricsReport>> {
    let scene = GaussianScene::new(set)?;
    let mut views = Vec::new();
    for f in test_frames(cfg, ds) {
        let pred = predict_maps(&scene, &f.camera)?;
        if let Some(dir) = maps_dir {
            let base = f.name.replace('/', "_");
            save_linear(&dir.join(format!("{base}_albedo")), &pred.albedo)?;
            save_linear(&dir.join(format!("{base}_roughness")), &pred.roughness)?;
            save_linear(&dir.join(format!("{base}_normal")), &pred.normal)?;
        }
        let (Some(gt_albedo), Some(gt_roughness)) = (read_gt(&ds.root, f, "albedo")?, read_gt(&ds.root, f, "roughness")?) else {
            continue;
        };
        let n = f.image.pixel_count();
        let region = read_gt(&ds.root, f, "region")?.map(|r| (0..n).map(|i| r.data[i] > 0.5).collect());
        views.push(ViewMaps {
            name: f.name.clone(),
            pred_albedo: pred.albedo,
            pred_roughness: pred.roughness,
            gt_albedo,
            gt_roughness,
            mask: (0..n).map(|i| f.mask(i)).collect(),
            region,
        });
    }
    if views.is_empty() {
        log::warn!("no test view has ground-truth maps; skipping metrics");
        return Ok(None);
    }
    compute_metrics(&views).map(Some)
}

/// Environment parameters stored exactly, next to a PFM preview.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvFile {
    height: usize,
    raw: Vec<f64>,
}

pub fn save_env(out: &Path, env: &EnvironmentMap) -> Result<()> {
    write_json(&out.join("env.json"), &EnvFile { height: env.height(), raw: env.raw.clone() })?;
    env.save(&out.join("env.pfm"))
}

pub fn load_env(out: &Path) -> Result<EnvironmentMap> {
    let f: EnvFile = read_json(&out.join("env.json"))?;
    EnvironmentMap::from_raw(f.height, 2 * f.height, f.raw)
}

pub fn save_caches(out: &Path, caches: &[RadianceCache]) -> Result<()> {
    caches.iter().try_for_each(|c| c.save(&out.join(format!("cache_{}.bin", c.k))))
}

pub fn load_caches(out: &Path, k_count: usize) -> Result<Vec<RadianceCache>> {
    (0..k_count).map(|k| RadianceCache::load(&out.join(format!("cache_{k}.bin")))).collect()
}

/// Content hash of a file the way git names blobs, with SHA-256.
pub fn blob_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub dataset: PathBuf,
    pub config: RunConfig,
    /// Relative path and hash of each output, sorted by path.
    pub files: Vec<(String, String)>,
}

fn collect_files(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, root, out)?;
        } else if p.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Hashes every file under `out` into `manifest.json`.
pub fn write_manifest(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.sort();
    let files = files
        .iter()
        .map(|p| Ok((p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/"), blob_hash(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        tool: "rotlight".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        dataset: dataset.to_path_buf(),
        config: cfg.clone(),
        files,
    };
    write_json(&out.join("manifest.json"), &m)?;
    Ok(m)
}

pub fn write_stage1_csv(path: &Path, report: &Stage1Report) -> Result<()> {
    let mut s = String::from("step,l1,bce\n");
    for (step, l1, bce) in &report.losses {
        s.push_str(&format!("{step},{l1},{bce}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Loads the dataset and applies the light restriction.
pub fn open_dataset(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let mut ds = load_dataset(dir)?;
    if let Some(ks) = &cfg.lights {
        ds = ds.restrict_lights(ks)?;
    }
    Ok(ds)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub geometry: Geometry,
    pub pretrain: PretrainReport,
    pub stage2: Stage2Output,
    /// Surfels carrying the decomposed material.
    pub decomposed: GaussianSet,
    pub metrics: Option<MetricsReport>,
}

/// Every step from dataset to metrics, writing the files listed in the
/// module docs.
pub fn run_pipeline(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("config.json"), cfg)?;
    let rng = DetRng::new(cfg.seed);
    let ds = open_dataset(cfg, dataset_dir)?;
    log::info!("dataset: {} train, {} test, lights {:?} deg", ds.train.len(), ds.test.len(), ds.lights.degrees());

    let geometry = run_geometry(cfg, &ds, &rng)?;
    geometry.set.write_checkpoint(&out.join("stage1_gaussians.txt"))?;
    write_stage1_csv(&out.join("stage1_losses.csv"), &geometry.stage1)?;
    geometry.mesh.write_obj(&out.join("mesh.obj"))?;

    let ctx = stage2_context(cfg, &ds, &geometry)?;
    let (caches, pretrain) = run_pretrain(cfg, &ctx, &rng)?;
    let stage2 = run_stage2(&ctx, &geometry.set, caches, &rng)?;
    let decomposed = with_material(&geometry.set, &stage2.state.material)?;
    decomposed.write_checkpoint(&out.join("gaussians.txt"))?;
    save_env(out, &stage2.state.env)?;
    save_caches(out, &stage2.state.caches)?;
    write_loss_csv(&out.join("losses.csv"), &stage2.losses)?;

    let maps_dir = out.join("maps");
    if cfg.eval.write_maps {
        fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    }
    let metrics = evaluate(cfg, &ds, &decomposed, cfg.eval.write_maps.then_some(maps_dir.as_path()))?;
    if let Some(m) = &metrics {
        m.write_csv(&out.join("metrics.csv"))?;
        log::info!("albedo PSNR {:.3} dB (raw {:.3}), SSIM {:.4}", m.aggregate.albedo_psnr, m.aggregate.albedo_psnr_raw, m.aggregate.albedo_ssim);
    }
    write_manifest(cfg, dataset_dir, out)?;
    Ok(RunSummary { geometry, pretrain, stage2, decomposed, metrics })
}
