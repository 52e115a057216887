use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rotlight::envlight::EnvironmentMap;
use rotlight::gsplat::{GaussianScene, GaussianSet};
use rotlight::image::save_linear;
use rotlight::meshproxy::{MeshTracer, TriangleMesh};
use rotlight::oracle::{gen_dataset, GenConfig};
use rotlight::pipeline::run::{load_caches, load_env, run_geometry, run_pretrain, save_caches, stage2_context, write_manifest, write_stage1_csv, Geometry};
use rotlight::pipeline::schema::{read_json, write_json};
use rotlight::pipeline::stage1::Stage1Report;
use rotlight::pipeline::{
    evaluate, extract_proxy_mesh, open_dataset, relight, render_ao, render_view, run_pipeline, BackendKind, Dataset, RunConfig,
};
use rotlight::shading::{IncidentBackend, IncidentGeometry, Indirect};
use rotlight::{DetRng, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rotlight", version, about = "Inverse rendering of 2D Gaussian surfels under rotated environment light")]
struct Cli {
    /// JSON config: a run config, or a generator config for `gen`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Incident-light geometry for stage 2 and AO.
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    /// Light indices to train with, e.g. `0,2`.
    #[arg(long, global = true, value_delimiter = ',')]
    lights: Option<Vec<usize>>,
    /// Gaussian-trace ray offset as a fraction of the scene extent.
    #[arg(long, global = true)]
    offset: Option<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Mesh,
    Gaussian,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a synthetic light-rotated dataset into `--out`.
    Gen {
        #[arg(long)]
        scene: Option<String>,
        /// Light angles in degrees, e.g. `0,120,240`.
        #[arg(long, value_delimiter = ',')]
        angles: Option<Vec<f64>>,
    },
    /// Fit surfel geometry and color under one light; writes the proxy mesh too.
    Stage1 {
        #[arg(long)]
        data: PathBuf,
    },
    /// Re-extract the proxy mesh from the stage-1 surfels.
    ExtractMesh {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the per-light radiance caches on the proxy mesh.
    PretrainCache {
        #[arg(long)]
        data: PathBuf,
    },
    /// Full decomposition: geometry, caches, materials and lighting, metrics.
    Stage2 {
        #[arg(long)]
        data: PathBuf,
    },
    /// Render test views with the decomposed model and its caches.
    Render {
        #[arg(long)]
        data: PathBuf,
    },
    /// Render test views under a new environment map.
    Relight {
        #[arg(long)]
        data: PathBuf,
        /// Environment map (PFM, equirectangular H x 2H).
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        angle_deg: f64,
    },
    /// Ambient-occlusion maps of test views through the chosen backend.
    Ao {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Metrics of the decomposed model against ground-truth maps.
    Metrics {
        #[arg(long)]
        data: PathBuf,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.backend {
        cfg.stage2.backend = match b {
            Backend::Mesh => BackendKind::Mesh,
            Backend::Gaussian => BackendKind::Gaussian,
        };
    }
    if let Some(l) = &cli.lights {
        cfg.lights = Some(l.clone());
    }
    if let Some(o) = cli.offset {
        cfg.stage2.gaussian_offset = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn need(out: &Path, name: &str, hint: &str) -> Result<PathBuf> {
    let p = out.join(name);
    if p.exists() {
        Ok(p)
    } else {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, format!("run `rotlight {hint}` first"));
        Err(Error::io(&p, e))
    }
}

/// Stage-1 surfels and mesh from a previous `stage1` run.
fn load_geometry(out: &Path) -> Result<Geometry> {
    let set = GaussianSet::read_checkpoint(&need(out, "stage1_gaussians.txt", "stage1")?)?;
    let mesh = TriangleMesh::read_obj(&need(out, "mesh.obj", "stage1")?)?;
    Ok(Geometry { set, mesh, stage1: Stage1Report { losses: Vec::new() } })
}

fn decomposed(out: &Path) -> Result<GaussianSet> {
    GaussianSet::read_checkpoint(&need(out, "gaussians.txt", "stage2")?)
}

fn frame_base(name: &str) -> String {
    name.replace('/', "_")
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = cli.out.as_path();
    match &cli.cmd {
        Cmd::Gen { scene, angles } => {
            let mut g: GenConfig = match &cli.config {
                Some(p) => read_json(p).map_err(|e| Error::Config(e.to_string()))?,
                None => GenConfig::default(),
            };
            if let Some(s) = scene {
                g.scene = s.clone();
            }
            if let Some(a) = angles {
                g.angles_deg = a.clone();
            }
            if let Some(s) = cli.seed {
                g.seed = s;
            }
            let r = gen_dataset(&g, out)?;
            log::info!("wrote {r:?}");
        }
        Cmd::Stage1 { data } => {
            let cfg = run_config(cli)?;
            let ds = open_dataset(&cfg, data)?;
            mkdir(out)?;
            let g = run_geometry(&cfg, &ds, &DetRng::new(cfg.seed))?;
            g.set.write_checkpoint(&out.join("stage1_gaussians.txt"))?;
            write_stage1_csv(&out.join("stage1_losses.csv"), &g.stage1)?;
            g.mesh.write_obj(&out.join("mesh.obj"))?;
            write_json(&out.join("config.json"), &cfg)?;
            log::info!("{} surfels, mesh with {} triangles", g.set.len(), g.mesh.triangle_count());
        }
        Cmd::ExtractMesh { data } => {
            let cfg = run_config(cli)?;
            let ds = open_dataset(&cfg, data)?;
            let g = load_geometry(out)?;
            let cams: Vec<_> = ds.train.iter().filter(|f| f.k == Some(0)).map(|f| f.camera.clone()).collect();
            let mesh = extract_proxy_mesh(&g.set, &cams, None, &cfg.tsdf)?;
            mesh.write_obj(&out.join("mesh.obj"))?;
            log::info!("mesh with {} triangles", mesh.triangle_count());
        }
        Cmd::PretrainCache { data } => {
            let cfg = run_config(cli)?;
            let ds = open_dataset(&cfg, data)?;
            let g = load_geometry(out)?;
            let ctx = stage2_context(&cfg, &ds, &g)?;
            let (caches, report) = run_pretrain(&cfg, &ctx, &DetRng::new(cfg.seed))?;
            save_caches(out, &caches)?;
            log::info!("final MSE per light {:?}", report.final_mse);
        }
        Cmd::Stage2 { data } => {
            let cfg = run_config(cli)?;
            let s = run_pipeline(&cfg, data, out)?;
            if let Some(m) = s.metrics {
                println!("{}", m.to_csv().trim_end());
            }
        }
        Cmd::Render { data } => {
            let cfg = run_config(cli)?;
            let ds = open_dataset(&cfg, data)?;
            let set = decomposed(out)?;
            let tracer = MeshTracer::new(TriangleMesh::read_obj(&need(out, "mesh.obj", "stage2")?)?);
            let env = load_env(out)?;
            let caches = load_caches(out, ds.lights.len())?;
            let scene = GaussianScene::new(&set)?;
            let geometry = geometry_for(&cfg, &tracer, &scene);
            let b = IncidentBackend { geometry, env: &env, table: &ds.lights, indirect: Indirect::Caches(&caches), extent: ds.extent() };
            let dir = out.join("renders");
            mkdir(&dir)?;
            let rng = DetRng::new(cfg.seed);
            for (t, f) in ds.test.iter().enumerate() {
                let Some(k) = f.k else { continue };
                let img = render_view(&scene, &b, &f.camera, k, &cfg.stage2.shade, &rng, t as u64)?;
                save_linear(&dir.join(frame_base(&f.name)), &img)?;
            }
        }
        Cmd::Relight { data, env, angle_deg } => {
            let cfg = run_config(cli)?;
            let ds = open_dataset(&cfg, data)?;
            let set = decomposed(out)?;
            let tracer = MeshTracer::new(TriangleMesh::read_obj(&need(out, "mesh.obj", "stage2")?)?);
            let env = EnvironmentMap::load(env)?;
            let scene = GaussianScene::new(&set)?;
            let dir = out.join("relight");
            mkdir(&dir)?;
            let rng = DetRng::new(cfg.seed);
            for (t, f) in ds.test.iter().enumerate() {
                let img = relight(&scene, &tracer, &env, angle_deg.to_radians(), ds.extent(), &f.camera, &cfg.relight, &rng, t as u64)?;
                save_linear(&dir.join(frame_base(&f.name)), &img)?;
            }
        }
        Cmd::Ao { data, samples } => {
            let cfg = run_config(cli)?;
            let ds = open_dataset(&cfg, data)?;
            let set = match decomposed(out) {
                Ok(s) => s,
                Err(_) => load_geometry(out)?.set,
            };
            let tracer = MeshTracer::new(TriangleMesh::read_obj(&need(out, "mesh.obj", "stage1")?)?);
            let scene = GaussianScene::new(&set)?;
            let geometry = geometry_for(&cfg, &tracer, &scene);
            let tag = match cfg.stage2.backend {
                BackendKind::Mesh => "mesh",
                BackendKind::Gaussian => "gaussian",
            };
            let dir = out.join("ao");
            mkdir(&dir)?;
            let rng = DetRng::new(cfg.seed);
            for (t, f) in ds.test.iter().enumerate() {
                let img = render_ao(&scene, &geometry, ds.extent(), &f.camera, samples.unwrap_or(cfg.eval.ao_samples), &rng, t as u64)?;
                save_linear(&dir.join(format!("{}_{tag}", frame_base(&f.name))), &img)?;
            }
        }
        Cmd::Metrics { data } => {
            let cfg = run_config(cli)?;
            let ds: Dataset = open_dataset(&cfg, data)?;
            let set = decomposed(out)?;
            match evaluate(&cfg, &ds, &set, None)? {
                Some(m) => {
                    m.write_csv(&out.join("metrics.csv"))?;
                    write_manifest(&cfg, data, out)?;
                    println!("{}", m.to_csv().trim_end());
                }
                None => return Err(Error::Dataset(format!("{}: no ground-truth maps for test views", data.display()))),
            }
        }
    }
    Ok(())
}

fn geometry_for<'a>(cfg: &RunConfig, tracer: &'a MeshTracer, scene: &'a GaussianScene) -> IncidentGeometry<'a> {
    match cfg.stage2.backend {
        BackendKind::Mesh => IncidentGeometry::Mesh(tracer),
        BackendKind::Gaussian => IncidentGeometry::Gaussians { scene, offset: cfg.stage2.gaussian_offset },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version print to stdout and succeed; usage errors exit 2.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
