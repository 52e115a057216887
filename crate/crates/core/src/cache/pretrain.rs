//! Supervised pretraining of the caches on observed surface radiance.

use serde::{Deserialize, Serialize};

use super::RadianceCache;
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::optim::AdamState;
use crate::rng::{domain, DetRng};

/// One observed surface point: the radiance `target` leaves `point` along
/// `dir` (pointing toward the camera).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CacheSample {
    pub point: Vec3,
    pub dir: Vec3,
    pub target: [f64; 3],
}

/// All samples observed under light angle `k`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CacheView {
    pub k: usize,
    pub samples: Vec<CacheSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 20_000, batch: 4096, lr: 1e-2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Per cache, the MSE over all its samples after training.
    pub final_mse: Vec<f64>,
}

/// Mean squared error of a cache over samples (mean over samples and
/// channels).
pub fn cache_mse(cache: &RadianceCache, samples: &[CacheSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let parts = crate::exec::map_indexed(samples.len(), |i| {
        let s = &samples[i];
        cache.query(s.point, s.dir).map(|o| (0..3).map(|c| (o[c] - s.target[c]).powi(2)).sum::<f64>())
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / (3.0 * samples.len() as f64))
}

/// Fits cache `k` to the samples of view `k` with an MSE loss and its own
/// Adam state; every cache needs a matching view.
pub fn pretrain_caches(
    caches: &mut [RadianceCache],
    views: &[CacheView],
    cfg: &PretrainConfig,
    rng: &DetRng,
) -> Result<PretrainReport> {
    if cfg.batch == 0 {
        return Err(Error::Config("pretrain batch must be >= 1".into()));
    }
    let mut final_mse = Vec::with_capacity(caches.len());
    for cache in caches.iter_mut() {
        let view = views
            .iter()
            .find(|v| v.k == cache.k)
            .ok_or_else(|| Error::InvalidInput(format!("no pretraining samples for cache {}", cache.k)))?;
        let samples = &view.samples;
        if samples.is_empty() {
            log::warn!("cache {}: no pretraining samples, keeping its initialization", cache.k);
            final_mse.push(0.0);
            continue;
        }
        let mut adam = AdamState::new(cache.param_count());
        let n = cfg.batch.min(samples.len());
        let scale = 2.0 / (3.0 * n as f64);
        for step in 0..cfg.steps {
            let pick = |i: usize| {
                if n == samples.len() {
                    i
                } else {
                    rng.below(&[domain::INIT, 2000 + cache.k as u64, step as u64, i as u64], samples.len())
                }
            };
            let c: &RadianceCache = cache;
            let grad = c.batch_grad(n, |i| {
                let s = &samples[pick(i)];
                let o = c.eval(s.point, s.dir);
                let d = [0, 1, 2].map(|ch| scale * (o[ch] - s.target[ch]));
                (s.point, s.dir, d)
            });
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::numeric("cache_pretrain", format!("cache {} gradient[{i}] at step {step}", cache.k)));
            }
            adam.step(&mut cache.params, &grad, cfg.lr);
        }
        cache.check_finite()?;
        let mse = cache_mse(cache, samples)?;
        log::info!("cache {} pretrained: mse {mse:.3e}", cache.k);
        final_mse.push(mse);
    }
    Ok(PretrainReport { final_mse })
}
