//! Weighted TSDF fusion of rendered depth maps.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec;
use crate::image::ImageBuffer;
use crate::math::{Aabb, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsdfConfig {
    pub resolution: usize,
    /// Padding added on each side, as a fraction of the largest extent.
    pub padding: f64,
    /// Truncation distance in voxels.
    pub truncation_voxels: f64,
    /// Pixels at or below this alpha do not contribute.
    pub alpha_threshold: f64,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        TsdfConfig { resolution: 128, padding: 0.05, truncation_voxels: 4.0, alpha_threshold: 0.5 }
    }
}

/// Cubic voxel lattice: sample `(i, j, k)` sits at `origin + voxel * (i, j, k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub resolution: usize,
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl GridSpec {
    /// Cube around `bounds`, padded by `padding` times the largest extent.
    pub fn fit(bounds: &Aabb, resolution: usize, padding: f64) -> Result<Self> {
        if bounds.is_empty() || resolution < 2 {
            return Err(Error::Config("TSDF grid needs a non-empty box and resolution >= 2".into()));
        }
        let size = bounds.extent().max_component() * (1.0 + 2.0 * padding);
        if !(size > 0.0) {
            return Err(Error::Config("degenerate scene bounds".into()));
        }
        let voxel_size = size / (resolution - 1) as f64;
        let origin = bounds.center() - Vec3::splat(size * 0.5);
        Ok(GridSpec { resolution, voxel_size, origin })
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel_size
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsdfGrid {
    pub spec: GridSpec,
    pub truncation: f64,
    /// Normalized signed distance in `[-1, 1]`, positive outside.
    pub tsdf: Vec<f64>,
    pub weight: Vec<f64>,
    /// Set for voxels seen only behind an observed surface and never against
    /// the background; such voxels keep weight 0 but count as inside during
    /// extraction.
    pub carved_inside: Vec<bool>,
}

impl TsdfGrid {
    pub fn empty(spec: GridSpec, truncation_voxels: f64) -> Self {
        let n = spec.voxel_count();
        TsdfGrid {
            spec,
            truncation: truncation_voxels * spec.voxel_size,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
            carved_inside: vec![false; n],
        }
    }

    /// Builds a grid directly from a signed distance function (testing and
    /// known-geometry tooling).
    pub fn from_sdf(spec: GridSpec, truncation_voxels: f64, sdf: impl Fn(Vec3) -> f64) -> Self {
        let mut g = TsdfGrid::empty(spec, truncation_voxels);
        let r = spec.resolution;
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    let idx = spec.index(i, j, k);
                    let d = sdf(spec.position(i, j, k));
                    g.tsdf[idx] = (d / g.truncation).clamp(-1.0, 1.0);
                    g.weight[idx] = 1.0;
                }
            }
        }
        g
    }

    /// Value used by surface extraction: zero-weight voxels read as outside
    /// unless they were carved as interior.
    #[inline]
    pub fn extraction_value(&self, idx: usize) -> f64 {
        if self.weight[idx] > 0.0 {
            self.tsdf[idx]
        } else if self.carved_inside[idx] {
            -1.0
        } else {
            1.0
        }
    }

    /// Writes `<path>` as a text header (`dims`, `origin`, `voxel_size`,
    /// `truncation`) followed by `tsdf` then `weight` as little-endian f32.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let r = self.spec.resolution;
        let o = self.spec.origin;
        let mut out = Vec::new();
        let _ = writeln!(out, "TSDF1");
        let _ = writeln!(out, "dims {r} {r} {r}");
        let _ = writeln!(out, "origin {} {} {}", o.x, o.y, o.z);
        let _ = writeln!(out, "voxel_size {}", self.spec.voxel_size);
        let _ = writeln!(out, "truncation {}", self.truncation);
        let _ = writeln!(out, "end");
        for v in self.tsdf.iter().chain(self.weight.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Fuses per-view depth (ray distance) maps into a TSDF over `spec`.
pub fn tsdf_fuse(
    depth_maps: &[ImageBuffer],
    alphas: &[ImageBuffer],
    cameras: &[Camera],
    spec: GridSpec,
    config: &TsdfConfig,
) -> Result<TsdfGrid> {
    if depth_maps.len() != cameras.len() || alphas.len() != cameras.len() {
        return Err(Error::Config("depth maps, alphas and cameras must have equal counts".into()));
    }
    for (v, cam) in cameras.iter().enumerate() {
        let (d, a) = (&depth_maps[v], &alphas[v]);
        if d.width != cam.width || d.height != cam.height || a.width != cam.width || a.height != cam.height {
            return Err(Error::Config(format!("view {v}: image size does not match camera")));
        }
        if d.channels != 1 || a.channels != 1 {
            return Err(Error::Config(format!("view {v}: depth and alpha must be single-channel")));
        }
    }
    let mut grid = TsdfGrid::empty(spec, config.truncation_voxels);
    let trunc = grid.truncation;
    let r = spec.resolution;
    // One slab per z-slice; each voxel is independent.
    let slabs = exec::map_indexed(r, |k| {
        let mut tsdf = vec![1.0; r * r];
        let mut weight = vec![0.0; r * r];
        let mut carved = vec![false; r * r];
        for j in 0..r {
            for i in 0..r {
                let p = spec.position(i, j, k);
                let local = j * r + i;
                let (mut acc, mut wsum, mut behind, mut free) = (0.0, 0.0, false, false);
                for (v, cam) in cameras.iter().enumerate() {
                    let Some((px, py)) = cam.project(p) else { continue };
                    if px < 0.0 || py < 0.0 || px >= cam.width as f64 || py >= cam.height as f64 {
                        continue;
                    }
                    let pix = py as usize * cam.width + px as usize;
                    if alphas[v].data[pix] <= config.alpha_threshold {
                        // Seen against the background: empty space.
                        free = true;
                        continue;
                    }
                    let sdf = depth_maps[v].data[pix] - (p - cam.center()).length();
                    if sdf < -trunc {
                        behind = true;
                        continue;
                    }
                    acc += (sdf / trunc).min(1.0);
                    wsum += 1.0;
                }
                if wsum > 0.0 {
                    tsdf[local] = acc / wsum;
                    weight[local] = wsum;
                } else {
                    carved[local] = behind && !free;
                }
            }
        }
        (tsdf, weight, carved)
    });
    for (k, (t, w, c)) in slabs.into_iter().enumerate() {
        let base = k * r * r;
        grid.tsdf[base..base + r * r].copy_from_slice(&t);
        grid.weight[base..base + r * r].copy_from_slice(&w);
        grid.carved_inside[base..base + r * r].copy_from_slice(&c);
    }
    Ok(grid)
}
