//! Proxy triangle mesh: TSDF fusion and extraction, BVH ray queries and
//! surface sampling for the radiance residual.

pub mod bvh;
pub mod marching_cubes;
pub mod mesh;
pub mod sampling;
pub mod tsdf;

pub use bvh::Bvh;
pub use marching_cubes::marching_cubes;
pub use mesh::{build_bvh, intersect_triangle, ray_mesh_intersect, MeshHit, MeshTracer, TriangleMesh};
pub use sampling::{sample_surface, uniform_hemisphere, SurfaceSample};
pub use tsdf::{tsdf_fuse, GridSpec, TsdfConfig, TsdfGrid};
