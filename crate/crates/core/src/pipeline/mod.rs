//! Dataset I/O, the two optimization stages, relighting and metrics.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod proxy;
pub mod relight;
pub mod run;
pub mod schema;
pub mod stage1;
pub mod stage2;

pub use config::{EvalConfig, RunConfig};
pub use dataset::{load_dataset, Dataset, Frame};
pub use metrics::{compute_metrics, psnr_from_mse, MetricsReport, ViewMaps, ViewMetrics};
pub use proxy::extract_proxy_mesh;
pub use relight::{relight, relight_pixels, render_ao, render_pixels, render_view, strided_pixels, RelightOptions};
pub use run::{evaluate, open_dataset, run_geometry, run_pipeline, run_pretrain, run_stage2, Geometry, Manifest, RunSummary};
pub use stage1::{capture_bounds, stage1_fit, visual_hull_init, Stage1Config, Stage1Report};
pub use stage2::{
    select_batch, stage2_decompose, stage2_objective, with_material, BackendKind, Stage2Config, Stage2Context, Stage2Grads,
    Stage2Output, Stage2State, StepBatch, Terms,
};
