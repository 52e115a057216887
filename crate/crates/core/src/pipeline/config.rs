//! Run configuration: every knob of every stage, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::relight::RelightOptions;
use super::schema::read_json;
use super::stage1::Stage1Config;
use super::stage2::Stage2Config;
use crate::cache::{CacheConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::gsplat::surfel::SeedOptions;
use crate::meshproxy::TsdfConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Test views evaluated, 0 for all.
    pub max_views: usize,
    /// Also write predicted albedo, roughness and normal maps.
    pub write_maps: bool,
    /// Samples per pixel for rendered AO maps.
    pub ao_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_views: 0, write_maps: true, ao_samples: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Light indices (into the dataset's sorted angles) to train with;
    /// `None` keeps all.
    pub lights: Option<Vec<usize>>,
    /// Seed surfels on the dataset's `mesh.obj` and use it as the proxy.
    pub known_geometry: bool,
    pub sh_degree: usize,
    pub seed_options: SeedOptions,
    pub stage1: Stage1Config,
    pub tsdf: TsdfConfig,
    pub cache: CacheConfig,
    pub pretrain: PretrainConfig,
    pub stage2: Stage2Config,
    pub relight: RelightOptions,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            lights: None,
            known_geometry: false,
            sh_degree: 1,
            seed_options: SeedOptions::default(),
            stage1: Stage1Config::default(),
            tsdf: TsdfConfig::default(),
            cache: CacheConfig::default(),
            pretrain: PretrainConfig::default(),
            stage2: Stage2Config::default(),
            relight: RelightOptions::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates; unknown keys are an error.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path).map_err(|e| match e {
            Error::Json { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > 3 {
            return Err(Error::Config("sh_degree must be 0..=3".into()));
        }
        if self.lights.as_ref().is_some_and(|l| l.is_empty()) {
            return Err(Error::Config("lights must name at least one index".into()));
        }
        if self.pretrain.batch == 0 || !(self.pretrain.lr > 0.0) {
            return Err(Error::Config("pretrain needs batch >= 1 and lr > 0".into()));
        }
        if self.tsdf.resolution < 4 || self.stage1.hull_resolution < 4 {
            return Err(Error::Config("tsdf and hull resolutions must be >= 4".into()));
        }
        if self.eval.ao_samples == 0 || self.relight.shade.n_samples == 0 {
            return Err(Error::Config("ao and relight sample counts must be >= 1".into()));
        }
        self.cache.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.stage2.validate()
    }
}
