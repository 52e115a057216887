//! Material-map metrics: masked PSNR, SSIM and roughness MSE, with and
//! without a global per-channel albedo scale alignment.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const PSNR_CAP: f64 = 100.0;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

/// `10 log10(peak^2 / mse)`, capped at 100 dB.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

fn gauss_window() -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let x = i as f64 - SSIM_RADIUS as f64;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter with edge clamping.
fn blur(img: &[f64], w: usize, h: usize, win: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                s += wk * img[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                s += wk * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Per-pixel SSIM map of one channel (dynamic range 1).
pub fn ssim_map(a: &[f64], b: &[f64], w: usize, h: usize) -> Vec<f64> {
    let win = gauss_window();
    let mu_a = blur(a, w, h, &win);
    let mu_b = blur(b, w, h, &win);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let s_aa = blur(&sq(a, a), w, h, &win);
    let s_bb = blur(&sq(b, b), w, h, &win);
    let s_ab = blur(&sq(a, b), w, h, &win);
    (0..w * h)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = s_aa[i] - ma * ma;
            let vb = s_bb[i] - mb * mb;
            let cov = s_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .collect()
}

/// SSIM averaged over channels and masked pixels.
pub fn masked_ssim(pred: &ImageBuffer, gt: &ImageBuffer, mask: &[bool]) -> f64 {
    let (w, h, c) = (pred.width, pred.height, pred.channels);
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for ch in 0..c {
        let a: Vec<f64> = (0..w * h).map(|i| pred.data[i * c + ch]).collect();
        let b: Vec<f64> = (0..w * h).map(|i| gt.data[i * c + ch]).collect();
        let m = ssim_map(&a, &b, w, h);
        total += m.iter().zip(mask).filter(|(_, &k)| k).map(|(v, _)| v).sum::<f64>() / n as f64;
    }
    total / c as f64
}

/// Mean squared error over masked pixels and channels.
pub fn masked_mse(pred: &ImageBuffer, gt: &ImageBuffer, mask: &[bool]) -> f64 {
    let c = pred.channels;
    let (mut s, mut n) = (0.0, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for ch in 0..c {
                s += (pred.data[i * c + ch] - gt.data[i * c + ch]).powi(2);
            }
            n += c;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Predicted and ground-truth maps of one view. `region` optionally marks a
/// sub-area (e.g. a cavity) for an extra albedo MSE.
#[derive(Clone, Debug)]
pub struct ViewMaps {
    pub name: String,
    pub pred_albedo: ImageBuffer,
    pub pred_roughness: ImageBuffer,
    pub gt_albedo: ImageBuffer,
    pub gt_roughness: ImageBuffer,
    pub mask: Vec<bool>,
    pub region: Option<Vec<bool>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub albedo_psnr: f64,
    pub albedo_ssim: f64,
    pub albedo_psnr_raw: f64,
    pub albedo_ssim_raw: f64,
    pub roughness_mse: f64,
    pub region_albedo_mse: Option<f64>,
    pub region_albedo_mse_raw: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-channel factor applied to predicted albedo before the aligned
    /// metrics.
    pub albedo_scale: [f64; 3],
    pub views: Vec<ViewMetrics>,
    /// Mean over views.
    pub aggregate: ViewMetrics,
}

/// Least-squares per-channel scale from predicted to ground-truth albedo
/// pooled over every masked pixel.
pub fn albedo_scale(views: &[ViewMaps]) -> [f64; 3] {
    let mut num = [0.0; 3];
    let mut den = [0.0; 3];
    for v in views {
        for (i, &m) in v.mask.iter().enumerate() {
            if m {
                let (p, g) = (v.pred_albedo.rgb_at(i), v.gt_albedo.rgb_at(i));
                for c in 0..3 {
                    num[c] += p[c] * g[c];
                    den[c] += p[c] * p[c];
                }
            }
        }
    }
    [0, 1, 2].map(|c| if den[c] > 0.0 { num[c] / den[c] } else { 1.0 })
}

fn region_mask(v: &ViewMaps) -> Option<Vec<bool>> {
    v.region.as_ref().map(|r| r.iter().zip(&v.mask).map(|(a, b)| *a && *b).collect())
}

pub fn compute_metrics(views: &[ViewMaps]) -> Result<MetricsReport> {
    if views.is_empty() {
        return Err(Error::InvalidInput("metrics need at least one view".into()));
    }
    for v in views {
        let n = v.mask.len();
        if v.pred_albedo.pixel_count() != n || v.gt_albedo.pixel_count() != n || v.pred_roughness.pixel_count() != n
            || v.gt_roughness.pixel_count() != n
        {
            return Err(Error::InvalidInput(format!("{}: map sizes disagree", v.name)));
        }
        if v.pred_albedo.channels != 3 || v.gt_albedo.channels != 3 {
            return Err(Error::InvalidInput(format!("{}: albedo maps need 3 channels", v.name)));
        }
        if !v.mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput(format!("{}: empty mask", v.name)));
        }
    }
    let scale = albedo_scale(views);
    let mut out = Vec::with_capacity(views.len());
    for v in views {
        let mut aligned = v.pred_albedo.clone();
        for (i, val) in aligned.data.iter_mut().enumerate() {
            *val *= scale[i % 3];
        }
        let region = region_mask(v);
        out.push(ViewMetrics {
            name: v.name.clone(),
            albedo_psnr: psnr_from_mse(masked_mse(&aligned, &v.gt_albedo, &v.mask), 1.0),
            albedo_ssim: masked_ssim(&aligned, &v.gt_albedo, &v.mask),
            albedo_psnr_raw: psnr_from_mse(masked_mse(&v.pred_albedo, &v.gt_albedo, &v.mask), 1.0),
            albedo_ssim_raw: masked_ssim(&v.pred_albedo, &v.gt_albedo, &v.mask),
            roughness_mse: masked_mse(&v.pred_roughness, &v.gt_roughness, &v.mask),
            region_albedo_mse: region.as_ref().map(|r| masked_mse(&aligned, &v.gt_albedo, r)),
            region_albedo_mse_raw: region.as_ref().map(|r| masked_mse(&v.pred_albedo, &v.gt_albedo, r)),
        });
    }
    let n = out.len() as f64;
    let mean = |f: &dyn Fn(&ViewMetrics) -> f64| out.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&ViewMetrics) -> Option<f64>| {
        let vals: Vec<f64> = out.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let aggregate = ViewMetrics {
        name: "mean".into(),
        albedo_psnr: mean(&|m| m.albedo_psnr),
        albedo_ssim: mean(&|m| m.albedo_ssim),
        albedo_psnr_raw: mean(&|m| m.albedo_psnr_raw),
        albedo_ssim_raw: mean(&|m| m.albedo_ssim_raw),
        roughness_mse: mean(&|m| m.roughness_mse),
        region_albedo_mse: mean_opt(&|m| m.region_albedo_mse),
        region_albedo_mse_raw: mean_opt(&|m| m.region_albedo_mse_raw),
    };
    Ok(MetricsReport { albedo_scale: scale, views: out, aggregate })
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "view,albedo_psnr,albedo_ssim,albedo_psnr_raw,albedo_ssim_raw,roughness_mse,region_albedo_mse,region_albedo_mse_raw";

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", Self::CSV_HEADER);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in self.views.iter().chain(std::iter::once(&self.aggregate)) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                m.name,
                m.albedo_psnr,
                m.albedo_ssim,
                m.albedo_psnr_raw,
                m.albedo_ssim_raw,
                m.roughness_mse,
                opt(m.region_albedo_mse),
                opt(m.region_albedo_mse_raw)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
