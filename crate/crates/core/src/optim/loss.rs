//! Loss terms with their gradients, and the weighted total.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envlight::EnvironmentMap;
use crate::error::{Error, Result};
use crate::math::sigmoid;

/// Mean absolute error over masked pixels and all three channels, with the
/// gradient w.r.t. `pred`. An empty mask gives 0 (and a warning).
pub fn loss_l1(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: &[bool]) -> (f64, Vec<[f64; 3]>) {
    assert_eq!(pred.len(), gt.len());
    assert_eq!(pred.len(), mask.len());
    let n = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![[0.0; 3]; pred.len()];
    if n == 0 {
        log::warn!("L1 loss over an empty mask");
        return (0.0, grad);
    }
    let scale = 1.0 / (3 * n) as f64;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        for c in 0..3 {
            let d = pred[i][c] - gt[i][c];
            sum += d.abs();
            grad[i][c] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
    }
    (sum * scale, grad)
}

/// Photometric term: rendered outgoing radiance against the capture.
pub fn loss_data(rendered: &[[f64; 3]], gt: &[[f64; 3]], mask: &[bool]) -> (f64, Vec<[f64; 3]>) {
    loss_l1(rendered, gt, mask)
}

/// Cache term: cache outputs at camera-ray hits against the capture.
pub fn loss_cache(cached: &[[f64; 3]], gt: &[[f64; 3]], mask: &[bool]) -> (f64, Vec<[f64; 3]>) {
    loss_l1(cached, gt, mask)
}

const BCE_EPS: f64 = 1e-6;

/// Mean binary cross-entropy of `alpha` against the mask, with d/d alpha.
pub fn loss_mask(alpha: &[f64], gt_mask: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(alpha.len(), gt_mask.len());
    if alpha.is_empty() {
        return (0.0, Vec::new());
    }
    let inv_n = 1.0 / alpha.len() as f64;
    let mut sum = 0.0;
    let grad = alpha
        .iter()
        .zip(gt_mask)
        .map(|(&a, &m)| {
            let a = a.clamp(BCE_EPS, 1.0 - BCE_EPS);
            // Exact targets give exactly zero loss.
            if m == 1.0 {
                sum -= a.ln() * (a < 1.0 - BCE_EPS) as u8 as f64;
            } else if m == 0.0 {
                sum -= (1.0 - a).ln() * (a > BCE_EPS) as u8 as f64;
            } else {
                sum -= m * a.ln() + (1.0 - m) * (1.0 - a).ln();
            }
            inv_n * ((1.0 - m) / (1.0 - a) - m / a)
        })
        .collect();
    (sum * inv_n, grad)
}

/// One neighbouring-pixel pair for the edge-aware smoothness terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothPair<const C: usize> {
    pub p: [f64; C],
    pub q: [f64; C],
    /// `exp(-|gt(p) - gt(q)|)`.
    pub weight: f64,
}

/// `mean_pairs( weight * mean_c |p_c - q_c| )`, with gradients for `p`
/// and `q` of each pair.
pub fn loss_smooth<const C: usize>(pairs: &[SmoothPair<C>]) -> (f64, Vec<([f64; C], [f64; C])>) {
    if pairs.is_empty() {
        return (0.0, Vec::new());
    }
    let scale = 1.0 / (pairs.len() * C) as f64;
    let mut sum = 0.0;
    let grads = pairs
        .iter()
        .map(|pr| {
            let mut gp = [0.0; C];
            let mut gq = [0.0; C];
            for c in 0..C {
                let d = pr.p[c] - pr.q[c];
                sum += pr.weight * d.abs();
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                gp[c] = pr.weight * s * scale;
                gq[c] = -gp[c];
            }
            (gp, gq)
        })
        .collect();
    (sum * scale, grads)
}

/// Edge weight from the ground-truth colors of two pixels.
pub fn edge_weight(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
    (-d).exp()
}

/// Mean squared difference of horizontally (wrapping) and vertically
/// adjacent texel radiances; gradient w.r.t. the raw parameters.
pub fn loss_light_smooth(env: &EnvironmentMap) -> (f64, Vec<f64>) {
    let (h, w) = (env.height(), env.width());
    let rad = env.radiance_data();
    let mut d_rad = vec![0.0; rad.len()];
    let n_terms = (h * w + (h - 1) * w) * 3;
    let scale = 1.0 / n_terms as f64;
    let mut sum = 0.0;
    let mut pair = |a: usize, b: usize, sum: &mut f64| {
        for c in 0..3 {
            let d = rad[a * 3 + c] - rad[b * 3 + c];
            *sum += d * d;
            d_rad[a * 3 + c] += 2.0 * d * scale;
            d_rad[b * 3 + c] -= 2.0 * d * scale;
        }
    };
    for i in 0..h {
        for j in 0..w {
            pair(i * w + j, i * w + (j + 1) % w, &mut sum);
            if i + 1 < h {
                pair(i * w + j, (i + 1) * w + j, &mut sum);
            }
        }
    }
    let grad = d_rad.iter().zip(&env.raw).map(|(d, &r)| d * sigmoid(r)).collect();
    (sum * scale, grad)
}

/// Mean absolute deviation of each texel channel from that texel's channel
/// mean; gradient w.r.t. the raw parameters.
pub fn loss_light_white(env: &EnvironmentMap) -> (f64, Vec<f64>) {
    let rad = env.radiance_data();
    let n = rad.len();
    let scale = 1.0 / n as f64;
    let mut d_rad = vec![0.0; n];
    let mut sum = 0.0;
    for t in 0..n / 3 {
        let px = &rad[t * 3..t * 3 + 3];
        let mean = (px[0] + px[1] + px[2]) / 3.0;
        let mut s = [0.0; 3];
        for c in 0..3 {
            let d = px[c] - mean;
            sum += d.abs();
            s[c] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        let s_mean = (s[0] + s[1] + s[2]) / 3.0;
        for c in 0..3 {
            d_rad[t * 3 + c] = scale * (s[c] - s_mean);
        }
    }
    let grad = d_rad.iter().zip(&env.raw).map(|(d, &r)| d * sigmoid(r)).collect();
    (sum * scale, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub residual: f64,
    pub mask: f64,
    pub albedo_smooth: f64,
    pub rough_smooth: f64,
    pub light_smooth: f64,
    pub light_white: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            residual: 10.0,
            mask: 0.1,
            albedo_smooth: 0.01,
            rough_smooth: 0.01,
            light_smooth: 0.001,
            light_white: 0.001,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub data: f64,
    pub cache: f64,
    pub residual: f64,
    pub mask: f64,
    pub albedo_smooth: f64,
    pub light_smooth: f64,
    pub rough_smooth: f64,
    pub light_white: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,data,cache,residual,mask,albedo_smooth,light_smooth,rough_smooth,light_white,total";

    /// `data + cache + w.residual * residual + weighted regularizers`,
    /// always summed in this order.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.data
            + self.cache
            + w.residual * self.residual
            + w.mask * self.mask
            + w.albedo_smooth * self.albedo_smooth
            + w.light_smooth * self.light_smooth
            + w.rough_smooth * self.rough_smooth
            + w.light_white * self.light_white
    }

    pub fn finalize(mut self, w: &LossWeights) -> Result<Self> {
        self.total = self.weighted_total(w);
        if !self.total.is_finite() {
            return Err(Error::numeric("loss total", format!("{self:?}")));
        }
        Ok(self)
    }

    pub fn csv_row(&self, step: usize) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{step},{},{},{},{},{},{},{},{},{}",
            self.data,
            self.cache,
            self.residual,
            self.mask,
            self.albedo_smooth,
            self.light_smooth,
            self.rough_smooth,
            self.light_white,
            self.total
        );
        s
    }
}

/// Writes a loss curve as CSV.
pub fn write_loss_csv(path: &Path, rows: &[(usize, LossReport)]) -> Result<()> {
    let mut out = Vec::new();
    let _ = writeln!(out, "{}", LossReport::CSV_HEADER);
    for (step, r) in rows {
        let _ = writeln!(out, "{}", r.csv_row(*step));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn l1_examples() {
        let a = vec![[0.2, 0.4, 0.6]; 5];
        let m = vec![true; 5];
        assert_eq!(loss_data(&a, &a, &m).0, 0.0);
        let b: Vec<[f64; 3]> = a.iter().map(|p| p.map(|v| v + 0.1)).collect();
        assert!((loss_data(&b, &a, &m).0 - 0.1).abs() < 1e-12);
        assert!((loss_cache(&a.iter().map(|p| p.map(|v| v + 0.2)).collect::<Vec<_>>(), &a, &m).0 - 0.2).abs() < 1e-12);
        assert_eq!(loss_data(&a, &b, &[false; 5]).0, 0.0);
    }

    #[test]
    fn l1_matches_scripted_oracle_and_gradient() {
        let rng = DetRng::new(8);
        let n = 50;
        let pred: Vec<[f64; 3]> = (0..n).map(|i| [0, 1, 2].map(|c| rng.uniform(&[i, c]))).collect();
        let gt: Vec<[f64; 3]> = (0..n).map(|i| [0, 1, 2].map(|c| rng.uniform(&[i, 10 + c]))).collect();
        let mask: Vec<bool> = (0..n).map(|i| rng.uniform(&[i, 99]) < 0.7).collect();
        let (l, g) = loss_data(&pred, &gt, &mask);
        let mut s = 0.0;
        let mut cnt = 0.0;
        for i in 0..n as usize {
            if mask[i] {
                for c in 0..3 {
                    s += (pred[i][c] - gt[i][c]).abs();
                    cnt += 1.0;
                }
            }
        }
        assert!((l - s / cnt).abs() < 1e-12);
        let h = 1e-7;
        let mut p2 = pred.clone();
        p2[3][1] += h;
        let fd = (loss_data(&p2, &gt, &mask).0 - l) / h;
        assert!((fd - g[3][1]).abs() < 1e-6);
    }

    #[test]
    fn mask_bce_zero_on_exact_match() {
        let m = vec![0.0, 1.0, 1.0, 0.0];
        assert_eq!(loss_mask(&m, &m).0, 0.0);
        let (l, g) = loss_mask(&[0.3, 0.8], &[0.0, 1.0]);
        let want = -((0.7f64).ln() + (0.8f64).ln()) / 2.0;
        assert!((l - want).abs() < 1e-12);
        assert!((g[0] - 0.5 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn constant_white_env_has_zero_light_terms() {
        let env = EnvironmentMap::constant(4, [1.0; 3]).unwrap();
        assert!(loss_light_smooth(&env).0.abs() < 1e-20);
        assert!(loss_light_white(&env).0.abs() < 1e-20);
    }

    #[test]
    fn checkerboard_light_smooth_oracle() {
        let (h, w) = (4, 8);
        let env = EnvironmentMap::from_fn(h, |_| [0.0; 3]).unwrap();
        let mut rad = vec![0.0; h * w * 3];
        for i in 0..h {
            for j in 0..w {
                let v = if (i + j) % 2 == 0 { 2.0 } else { 0.5 };
                rad[(i * w + j) * 3..(i * w + j) * 3 + 3].copy_from_slice(&[v; 3]);
            }
        }
        let env = EnvironmentMap::from_radiance(env.height(), env.width(), &rad).unwrap();
        // Every neighbour pair differs by 1.5 (w even, so wrapping keeps the
        // pattern), squared 2.25.
        let (l, _) = loss_light_smooth(&env);
        assert!((l - 2.25).abs() < 1e-9, "{l}");
    }

    #[test]
    fn light_terms_gradients_match_fd() {
        let rng = DetRng::new(2);
        let env = EnvironmentMap::from_fn(3, |d| [d.x + 1.5, d.y * 0.5 + 1.0, 0.3 + d.z.abs()]).unwrap();
        let mut env = env;
        for (i, r) in env.raw.iter_mut().enumerate() {
            *r += 0.1 * rng.normal(&[i as u64]);
        }
        for f in [loss_light_smooth as fn(&EnvironmentMap) -> (f64, Vec<f64>), loss_light_white] {
            let (_, g) = f(&env);
            for k in [0, 5, 17, 40] {
                let h = 1e-6;
                let (mut p, mut m) = (env.clone(), env.clone());
                p.raw[k] += h;
                m.raw[k] -= h;
                let fd = (f(&p).0 - f(&m).0) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7, "k={k} fd={fd} g={}", g[k]);
            }
        }
    }

    #[test]
    fn total_decomposition() {
        let w = LossWeights::default();
        let r = LossReport {
            data: 0.1,
            cache: 0.2,
            residual: 0.03,
            mask: 0.4,
            albedo_smooth: 0.5,
            light_smooth: 0.6,
            rough_smooth: 0.7,
            light_white: 0.8,
            total: 0.0,
        }
        .finalize(&w)
        .unwrap();
        let expect: f64 = 0.1 + 0.2 + 10.0 * 0.03 + 0.1 * 0.4 + 0.01 * 0.5 + 0.001 * 0.6 + 0.01 * 0.7 + 0.001 * 0.8;
        assert_eq!(r.total.to_bits(), expect.to_bits());
        assert_eq!(w.residual, 10.0);
    }

    #[test]
    fn smoothness_zero_on_constant_and_gradient_sign() {
        let pairs = [SmoothPair { p: [0.3, 0.3, 0.3], q: [0.3, 0.3, 0.3], weight: 1.0 }];
        assert_eq!(loss_smooth(&pairs).0, 0.0);
        let pairs = [SmoothPair { p: [0.5], q: [0.2], weight: 0.5 }];
        let (l, g) = loss_smooth(&pairs);
        assert!((l - 0.15).abs() < 1e-12);
        assert_eq!(g[0].0[0], 0.5);
        assert_eq!(g[0].1[0], -0.5);
    }
}
