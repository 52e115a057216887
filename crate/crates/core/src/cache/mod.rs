//! Per-light-angle neural radiance caches `R_k(x, d)`.
//!
//! Each cache owns one flat parameter vector laid out as
//! `[hash tables | W1 (H x E) | b1 | W2 (H x H) | b2 | W3 (3 x H) | b3]`
//! with row-major weight matrices and `E = levels * features + 6 * n_freq`.

pub mod encoding;
pub mod pretrain;

use std::cell::RefCell;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{inverse_softplus, sigmoid, softplus, Aabb, Vec3};
use crate::rng::{domain, DetRng};

pub use encoding::{encode_direction, encode_position, HashGridConfig, Level};
pub use pretrain::{pretrain_caches, CacheSample, CacheView, PretrainConfig, PretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub grid: HashGridConfig,
    pub hidden: usize,
    pub n_freq: usize,
    /// Initial output radiance, set through the output bias.
    pub init_radiance: f64,
    /// Half-width of the uniform initialization of table entries.
    pub table_init: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { grid: HashGridConfig::default(), hidden: 256, n_freq: 4, init_radiance: 0.1, table_init: 1e-4 }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("cache hidden width must be >= 1".into()));
        }
        if !(self.init_radiance > 0.0) {
            return Err(Error::Config("cache init_radiance must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.grid.output_dim() + 6 * self.n_freq
    }
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Layout {
    e: usize,
    h: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Layout {
    fn new(cfg: &CacheConfig) -> Layout {
        let e = cfg.input_dim();
        let h = cfg.hidden;
        let w1 = cfg.grid.table_len();
        let b1 = w1 + h * e;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + 3 * h;
        Layout { e, h, w1, b1, w2, b2, w3, b3, len: b3 + 3 }
    }
}

/// Forward activations of one query, kept for the backward pass.
#[derive(Clone, Debug, Default)]
struct Scratch {
    taps: Vec<[(usize, f64); 8]>,
    enc: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    o: [f64; 3],
    dz: Vec<f64>,
    dh: Vec<f64>,
}

/// Dense gradient accumulators used by [`RadianceCache::batch_grad`].
const GRAD_CHUNKS: usize = 8;

thread_local! {
    static SCRATCH: RefCell<Scratch> = RefCell::new(Scratch::default());
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceCache {
    pub k: usize,
    pub config: CacheConfig,
    /// Scene box mapped onto the unit cube (as a cube around its center).
    pub bounds: Aabb,
    pub params: Vec<f64>,
    levels: Vec<Level>,
    layout: Layout,
}

impl RadianceCache {
    /// Fan-in scaled uniform weights for the hidden layers, zero last layer,
    /// output bias at `inverse_softplus(init_radiance)`.
    pub fn new(k: usize, config: CacheConfig, bounds: Aabb, rng: &DetRng) -> Result<Self> {
        config.validate()?;
        if bounds.is_empty() {
            return Err(Error::Config("cache bounds are empty".into()));
        }
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len];
        let key = |block: u64, i: usize| [domain::INIT, 1000 + k as u64, block, i as u64];
        for (i, p) in params[..layout.w1].iter_mut().enumerate() {
            *p = config.table_init * (2.0 * rng.uniform(&key(0, i)) - 1.0);
        }
        let a1 = (6.0 / layout.e as f64).sqrt();
        for i in 0..layout.h * layout.e {
            params[layout.w1 + i] = a1 * (2.0 * rng.uniform(&key(1, i)) - 1.0);
        }
        let a2 = (6.0 / layout.h as f64).sqrt();
        for i in 0..layout.h * layout.h {
            params[layout.w2 + i] = a2 * (2.0 * rng.uniform(&key(2, i)) - 1.0);
        }
        let b = inverse_softplus(config.init_radiance);
        params[layout.b3..layout.b3 + 3].fill(b);
        let levels = config.grid.level_layout();
        Ok(RadianceCache { k, config, bounds, params, levels, layout })
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    /// Range of the hash-table entries inside `params`.
    pub fn table_range(&self) -> std::ops::Range<usize> {
        0..self.layout.w1
    }

    pub fn normalize(&self, x: Vec3) -> Vec3 {
        let size = self.bounds.extent().max_component().max(1e-12);
        let lo = self.bounds.center() - Vec3::splat(0.5 * size);
        (x - lo) / size
    }

    fn forward(&self, params: &[f64], x: Vec3, d: Vec3, s: &mut Scratch) -> [f64; 3] {
        let ly = &self.layout;
        let f = self.config.grid.features;
        s.taps = encoding::position_taps(&self.levels, f, self.normalize(x));
        s.enc.clear();
        s.enc.resize(self.config.grid.output_dim(), 0.0);
        for (l, taps) in s.taps.iter().enumerate() {
            for &(off, w) in taps {
                for j in 0..f {
                    s.enc[l * f + j] += w * params[off + j];
                }
            }
        }
        encoding::encode_direction_into(d, self.config.n_freq, &mut s.enc);
        let h = ly.h;
        s.z1.clear();
        s.z1.extend_from_slice(&params[ly.b1..ly.b1 + h]);
        for r in 0..h {
            let row = &params[ly.w1 + r * ly.e..ly.w1 + (r + 1) * ly.e];
            s.z1[r] += row.iter().zip(&s.enc).map(|(a, b)| a * b).sum::<f64>();
        }
        s.z2.clear();
        s.z2.extend_from_slice(&params[ly.b2..ly.b2 + h]);
        for r in 0..h {
            let row = &params[ly.w2 + r * h..ly.w2 + (r + 1) * h];
            s.z2[r] += row.iter().zip(&s.z1).map(|(a, &z)| a * z.max(0.0)).sum::<f64>();
        }
        let mut out = [0.0; 3];
        for c in 0..3 {
            let row = &params[ly.w3 + c * h..ly.w3 + (c + 1) * h];
            s.o[c] = params[ly.b3 + c] + row.iter().zip(&s.z2).map(|(a, &z)| a * z.max(0.0)).sum::<f64>();
            out[c] = softplus(s.o[c]);
        }
        out
    }

    fn backward(&self, params: &[f64], s: &mut Scratch, d_out: [f64; 3], grad: &mut [f64]) {
        let ly = &self.layout;
        let h = ly.h;
        let d_o = [0, 1, 2].map(|c| d_out[c] * sigmoid(s.o[c]));
        // Output layer.
        s.dh.clear();
        s.dh.resize(h, 0.0);
        for c in 0..3 {
            if d_o[c] == 0.0 {
                continue;
            }
            grad[ly.b3 + c] += d_o[c];
            for r in 0..h {
                grad[ly.w3 + c * h + r] += d_o[c] * s.z2[r].max(0.0);
                s.dh[r] += params[ly.w3 + c * h + r] * d_o[c];
            }
        }
        // Second hidden layer.
        s.dz.clear();
        s.dz.extend(s.dh.iter().zip(&s.z2).map(|(g, &z)| if z > 0.0 { *g } else { 0.0 }));
        s.dh.clear();
        s.dh.resize(h, 0.0);
        for r in 0..h {
            let g = s.dz[r];
            if g == 0.0 {
                continue;
            }
            grad[ly.b2 + r] += g;
            for c in 0..h {
                grad[ly.w2 + r * h + c] += g * s.z1[c].max(0.0);
                s.dh[c] += params[ly.w2 + r * h + c] * g;
            }
        }
        // First hidden layer and the encoding.
        let n_pos = self.config.grid.output_dim();
        let mut d_enc = vec![0.0; n_pos];
        for r in 0..h {
            let g = if s.z1[r] > 0.0 { s.dh[r] } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            grad[ly.b1 + r] += g;
            let row = ly.w1 + r * ly.e;
            for c in 0..ly.e {
                grad[row + c] += g * s.enc[c];
            }
            for (c, de) in d_enc.iter_mut().enumerate() {
                *de += params[row + c] * g;
            }
        }
        let f = self.config.grid.features;
        for (l, taps) in s.taps.iter().enumerate() {
            for &(off, w) in taps {
                for j in 0..f {
                    grad[off + j] += w * d_enc[l * f + j];
                }
            }
        }
    }

    /// `R_k(x, d)` without the finiteness check.
    pub fn eval(&self, x: Vec3, d: Vec3) -> [f64; 3] {
        SCRATCH.with(|s| self.forward(&self.params, x, d, &mut s.borrow_mut()))
    }

    /// `R_k(x, d)`; non-finite output (from non-finite parameters) is a
    /// numeric error.
    pub fn query(&self, x: Vec3, d: Vec3) -> Result<[f64; 3]> {
        let out = self.eval(x, d);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::numeric("cache_query", format!("cache {} produced {out:?}", self.k)))
        }
    }

    /// Adds `d_out`-weighted parameter gradients of `R_k(x, d)` to `grad`
    /// (length [`Self::param_count`]). Returns the forward value.
    pub fn accumulate_grad(&self, x: Vec3, d: Vec3, d_out: [f64; 3], grad: &mut [f64]) -> [f64; 3] {
        SCRATCH.with(|s| {
            let s = &mut s.borrow_mut();
            let out = self.forward(&self.params, x, d, s);
            self.backward(&self.params, s, d_out, grad);
            out
        })
    }

    /// Sum over `n` queries of their parameter gradients. `item(i)` gives
    /// `(x, d, d_out)`; the sum runs over a fixed number of chunks so the
    /// result does not depend on the thread count.
    pub fn batch_grad<F>(&self, n: usize, item: F) -> Vec<f64>
    where
        F: Fn(usize) -> (Vec3, Vec3, [f64; 3]) + Sync + Send,
    {
        let chunk = n.div_ceil(GRAD_CHUNKS).max(1);
        let parts = crate::exec::chunked_fold(n, chunk, || vec![0.0; self.layout.len], |g, i| {
            let (x, d, d_out) = item(i);
            self.accumulate_grad(x, d, d_out, g);
        });
        let mut parts = parts.into_iter();
        let mut total = parts.next().unwrap_or_else(|| vec![0.0; self.layout.len]);
        for p in parts {
            for (a, b) in total.iter_mut().zip(&p) {
                *a += b;
            }
        }
        total
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric("cache parameters", format!("cache {} param[{i}] is not finite", self.k))),
        }
    }

    /// Versioned binary blob: `RLCACHE1`, JSON config length (u64) and
    /// bytes, `k` (u64), bounds (6 x f64), parameter count (u64), parameters
    /// (f64); all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Json { path: path.into(), source: e })?;
        let mut out = Vec::with_capacity(64 + cfg.len() + 8 * self.params.len());
        out.extend_from_slice(b"RLCACHE1");
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.k as u64).to_le_bytes());
        for v in self.bounds.min.to_array().iter().chain(self.bounds.max.to_array().iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated cache checkpoint"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != b"RLCACHE1" {
            return Err(bad("not a cache checkpoint"));
        }
        let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
        let cfg_len = u64_at(take(8)?) as usize;
        let config: CacheConfig =
            serde_json::from_slice(take(cfg_len)?).map_err(|e| Error::Json { path: path.into(), source: e })?;
        let k = u64_at(take(8)?) as usize;
        let mut b = [0.0; 6];
        for v in &mut b {
            *v = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        let n = u64_at(take(8)?) as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            params.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        config.validate()?;
        let layout = Layout::new(&config);
        if layout.len != n {
            return Err(bad("parameter count does not match the config"));
        }
        let levels = config.grid.level_layout();
        let bounds = Aabb { min: Vec3::new(b[0], b[1], b[2]), max: Vec3::new(b[3], b[4], b[5]) };
        Ok(RadianceCache { k, config, bounds, params, levels, layout })
    }
}
