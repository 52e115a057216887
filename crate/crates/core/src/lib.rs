//! Rotated-light inverse rendering.
//!
//! Recovers per-surfel albedo and roughness plus an environment map from
//! images captured under several known rotations of the same illumination.
//! Geometry is represented by 2D Gaussian surfels; incident light queries go
//! through an opaque proxy mesh, and indirect light comes from one neural
//! radiance cache per light rotation, tied to the renderer by a radiosity
//! residual.

pub mod cache;
pub mod camera;
pub mod envlight;
pub mod error;
pub mod exec;
pub mod gsplat;
pub mod image;
pub mod math;
pub mod meshproxy;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod shading;

pub use camera::{Camera, Ray};
pub use envlight::{rot_y, EnvironmentMap, LightAngleTable};
pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use math::{orthonormal_basis, Aabb, Mat3, UnitVec3, Vec3};
pub use rng::DetRng;
