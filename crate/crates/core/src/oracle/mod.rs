//! Ground-truth renderer and synthetic dataset generator.
//!
//! Everything here is written independently of the renderer modules (own
//! reflectance code, hemisphere sampling and path construction) so the two
//! can check each other.

pub mod ao;
pub mod brdf;
pub mod dataset;
pub mod path;
pub mod scene;

pub use ao::{mesh_ao, sphere_ao_analytic, sphere_ao_reference};
pub use brdf::reference_brdf;
pub use dataset::{gen_dataset, gt_maps, GenConfig, GenReport, GtMaps};
pub use path::{PathTraceConfig, PathTracer};
pub use scene::{SceneDescription, SceneObject, SceneTracer, Texture, SCENE_NAMES};
