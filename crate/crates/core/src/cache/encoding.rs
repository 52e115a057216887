//! Multiresolution hash-grid position encoding and sinusoidal direction
//! encoding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Entries per level; a power of two.
    pub table_size: usize,
    pub features: usize,
    pub base_resolution: usize,
    pub growth: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig { levels: 8, table_size: 1 << 14, features: 2, base_resolution: 16, growth: 1.5 }
    }
}

/// Per-level lattice resolution and table layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Level {
    pub resolution: usize,
    pub entries: usize,
    pub dense: bool,
    /// Offset of the level's first entry in the flat table array.
    pub offset: usize,
}

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features == 0 || self.base_resolution == 0 {
            return Err(Error::Config("hash grid needs levels, features and base resolution >= 1".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!("hash table size {} is not a power of two", self.table_size)));
        }
        if !(self.growth.is_finite() && self.growth >= 1.0) {
            return Err(Error::Config("hash grid growth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn level_layout(&self) -> Vec<Level> {
        let mut offset = 0;
        (0..self.levels)
            .map(|l| {
                let resolution = (self.base_resolution as f64 * self.growth.powi(l as i32)).floor() as usize;
                let dense_entries = (resolution + 1).pow(3);
                let dense = dense_entries <= self.table_size;
                let entries = if dense { dense_entries } else { self.table_size };
                let lvl = Level { resolution, entries, dense, offset };
                offset += entries * self.features;
                lvl
            })
            .collect()
    }

    pub fn table_len(&self) -> usize {
        self.level_layout().iter().map(|l| l.entries * self.features).sum()
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }
}

/// Entry index of lattice corner `(x, y, z)` within its level.
#[inline]
pub fn corner_index(level: &Level, x: usize, y: usize, z: usize) -> usize {
    if level.dense {
        let r = level.resolution + 1;
        x + y * r + z * r * r
    } else {
        let h = (x as u64).wrapping_mul(PRIMES[0]) ^ (y as u64).wrapping_mul(PRIMES[1]) ^ (z as u64).wrapping_mul(PRIMES[2]);
        (h % level.entries as u64) as usize
    }
}

/// Trilinear corner taps `(flat table offset of the entry, weight)`, 8 per
/// level, for a position in the unit cube (clamped).
pub fn position_taps(levels: &[Level], features: usize, x: Vec3) -> Vec<[(usize, f64); 8]> {
    let p = [x.x.clamp(0.0, 1.0), x.y.clamp(0.0, 1.0), x.z.clamp(0.0, 1.0)];
    levels
        .iter()
        .map(|lvl| {
            let n = lvl.resolution;
            let mut i0 = [0usize; 3];
            let mut f = [0.0; 3];
            for a in 0..3 {
                let s = p[a] * n as f64;
                let c = (s.floor() as usize).min(n - 1);
                i0[a] = c;
                f[a] = s - c as f64;
            }
            let mut taps = [(0usize, 0.0); 8];
            for (c, tap) in taps.iter_mut().enumerate() {
                let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                let w = (if bx == 1 { f[0] } else { 1.0 - f[0] })
                    * (if by == 1 { f[1] } else { 1.0 - f[1] })
                    * (if bz == 1 { f[2] } else { 1.0 - f[2] });
                let idx = corner_index(lvl, i0[0] + bx, i0[1] + by, i0[2] + bz);
                *tap = (lvl.offset + idx * features, w);
            }
            taps
        })
        .collect()
}

/// Hash-grid features of a unit-cube position, concatenated over levels.
pub fn encode_position(cfg: &HashGridConfig, tables: &[f64], x: Vec3) -> Vec<f64> {
    let levels = cfg.level_layout();
    let mut out = vec![0.0; cfg.output_dim()];
    for (l, taps) in position_taps(&levels, cfg.features, x).iter().enumerate() {
        for &(off, w) in taps {
            for f in 0..cfg.features {
                out[l * cfg.features + f] += w * tables[off + f];
            }
        }
    }
    out
}

/// Per frequency `j`: `[sin(2^j pi d_x), sin(.. d_y), sin(.. d_z), cos(.. d_x), cos(.. d_y), cos(.. d_z)]`.
pub fn encode_direction(d: Vec3, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * n_freq);
    encode_direction_into(d, n_freq, &mut out);
    out
}

pub fn encode_direction_into(d: Vec3, n_freq: usize, out: &mut Vec<f64>) {
    for j in 0..n_freq {
        let s = (1u64 << j) as f64 * PI;
        let (sx, cx) = (s * d.x).sin_cos();
        let (sy, cy) = (s * d.y).sin_cos();
        let (sz, cz) = (s * d.z).sin_cos();
        out.extend_from_slice(&[sx, sy, sz, cx, cy, cz]);
    }
}
