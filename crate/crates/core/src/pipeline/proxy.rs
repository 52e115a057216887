//! Proxy mesh from stage-1 surfels: fused rendered depth, then marching
//! cubes.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gsplat::{render_maps, GaussianScene, GaussianSet};
use crate::math::Aabb;
use crate::meshproxy::{marching_cubes, tsdf_fuse, GridSpec, TriangleMesh, TsdfConfig};

/// Renders depth and alpha for every camera, fuses them over a grid fitted
/// to `bounds` (or the surfel centers) and meshes the zero crossing.
pub fn extract_proxy_mesh(set: &GaussianSet, cameras: &[Camera], bounds: Option<Aabb>, cfg: &TsdfConfig) -> Result<TriangleMesh> {
    if set.is_empty() {
        return Err(Error::EmptyMesh("no surfels to extract a mesh from".into()));
    }
    let scene = GaussianScene::new(set)?;
    let mut depths = Vec::with_capacity(cameras.len());
    let mut alphas = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let maps = render_maps(cam, &scene)?;
        depths.push(maps.depth);
        alphas.push(maps.alpha);
    }
    let bounds = bounds.unwrap_or_else(|| set.center_bounds());
    let spec = GridSpec::fit(&bounds, cfg.resolution, cfg.padding)?;
    let grid = tsdf_fuse(&depths, &alphas, cameras, spec, cfg)?;
    let mesh = marching_cubes(&grid, 0.0)?;
    if mesh.is_empty() {
        return Err(Error::EmptyMesh(
            "TSDF has no zero crossing: raise the grid resolution or lower the alpha threshold".into(),
        ));
    }
    log::info!("proxy mesh: {} triangles, voxel {:.4}", mesh.triangle_count(), spec.voxel_size);
    Ok(mesh)
}
