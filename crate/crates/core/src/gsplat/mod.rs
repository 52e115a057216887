//! 2D Gaussian surfels and exact per-ray compositing.
//!
//! Parameters live in three flat arrays so they map one-to-one onto
//! optimizer groups:
//!
//! | group      | per Gaussian | layout                                            |
//! |------------|--------------|---------------------------------------------------|
//! | `geometry` | 10           | `mu.xyz, quat.wxyz, log_su, log_sv, opacity_logit` |
//! | `sh`       | 3·(d+1)²     | RGB triple per SH coefficient                      |
//! | `material` | 4            | `albedo_logit.rgb, roughness_logit`                |

pub mod blend;
pub mod sh;
pub mod surfel;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{sigmoid, Aabb, Vec3};

pub use blend::{
    blend_along_ray, blend_backward, blend_recorded, gauss_value, ray_gaussian_hit, render_maps, trace_gaussians,
    BlendRecord, GaussianHit, GaussianScene, RayBlend, RayBlendGrad, RenderMaps, Surfel,
};
pub use sh::{coeff_count, sh_eval};
pub use surfel::{quat_from_frame, seed_on_mesh};

pub const GEOM_STRIDE: usize = 10;
pub const MAT_STRIDE: usize = 4;
pub const ROUGHNESS_MIN: f64 = 0.04;

/// Roughness from its logit, in `[0.04, 1]`.
#[inline]
pub fn roughness_from_logit(l: f64) -> f64 {
    ROUGHNESS_MIN + (1.0 - ROUGHNESS_MIN) * sigmoid(l)
}

/// Inverse of [`roughness_from_logit`] for `r` strictly inside the range.
pub fn roughness_logit(r: f64) -> f64 {
    let s = ((r - ROUGHNESS_MIN) / (1.0 - ROUGHNESS_MIN)).clamp(1e-6, 1.0 - 1e-6);
    (s / (1.0 - s)).ln()
}

/// One surfel with its raw (unconstrained) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian2D {
    pub mu: Vec3,
    /// `(w, x, y, z)`; normalized on use.
    pub quat: [f64; 4],
    pub log_su: f64,
    pub log_sv: f64,
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
    pub albedo_logit: [f64; 3],
    pub roughness_logit: f64,
}

impl Gaussian2D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn albedo(&self) -> [f64; 3] {
        self.albedo_logit.map(sigmoid)
    }

    pub fn roughness(&self) -> f64 {
        roughness_from_logit(self.roughness_logit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: usize,
    pub geometry: Vec<f64>,
    pub sh: Vec<f64>,
    pub material: Vec<f64>,
}

impl GaussianSet {
    pub fn new(sh_degree: usize) -> Result<Self> {
        if sh_degree > 3 {
            return Err(Error::Config(format!("SH degree {sh_degree} not in 0..=3")));
        }
        Ok(GaussianSet { sh_degree, geometry: Vec::new(), sh: Vec::new(), material: Vec::new() })
    }

    pub fn from_gaussians(sh_degree: usize, gs: &[Gaussian2D]) -> Result<Self> {
        let mut set = GaussianSet::new(sh_degree)?;
        for g in gs {
            set.push(g)?;
        }
        Ok(set)
    }

    pub fn sh_stride(&self) -> usize {
        3 * coeff_count(self.sh_degree)
    }

    pub fn len(&self) -> usize {
        self.geometry.len() / GEOM_STRIDE
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn push(&mut self, g: &Gaussian2D) -> Result<()> {
        let nc = coeff_count(self.sh_degree);
        if g.sh.len() != nc {
            return Err(Error::InvalidInput(format!("expected {nc} SH coefficients, got {}", g.sh.len())));
        }
        let qn = g.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(qn > 1e-12) || !qn.is_finite() {
            return Err(Error::InvalidInput("quaternion must be non-zero".into()));
        }
        self.geometry.extend_from_slice(&[g.mu.x, g.mu.y, g.mu.z]);
        self.geometry.extend(g.quat.iter().map(|v| v / qn));
        self.geometry.extend_from_slice(&[g.log_su, g.log_sv, g.opacity_logit]);
        for c in &g.sh {
            self.sh.extend_from_slice(c);
        }
        self.material.extend_from_slice(&g.albedo_logit);
        self.material.push(g.roughness_logit);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Gaussian2D {
        let p = &self.geometry[i * GEOM_STRIDE..(i + 1) * GEOM_STRIDE];
        let s = self.sh_coeffs(i);
        let m = &self.material[i * MAT_STRIDE..(i + 1) * MAT_STRIDE];
        Gaussian2D {
            mu: Vec3::new(p[0], p[1], p[2]),
            quat: [p[3], p[4], p[5], p[6]],
            log_su: p[7],
            log_sv: p[8],
            opacity_logit: p[9],
            sh: s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            albedo_logit: [m[0], m[1], m[2]],
            roughness_logit: m[3],
        }
    }

    #[inline]
    pub fn mu(&self, i: usize) -> Vec3 {
        let p = &self.geometry[i * GEOM_STRIDE..];
        Vec3::new(p[0], p[1], p[2])
    }

    #[inline]
    pub fn sh_coeffs(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn albedo(&self, i: usize) -> [f64; 3] {
        let m = &self.material[i * MAT_STRIDE..];
        [sigmoid(m[0]), sigmoid(m[1]), sigmoid(m[2])]
    }

    #[inline]
    pub fn roughness(&self, i: usize) -> f64 {
        roughness_from_logit(self.material[i * MAT_STRIDE + 3])
    }

    /// Bounding box of the centers.
    pub fn center_bounds(&self) -> Aabb {
        Aabb::from_points((0..self.len()).map(|i| self.mu(i)))
    }

    /// Checks finiteness and that every quaternion is non-degenerate.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.geometry.len() != n * GEOM_STRIDE
            || self.sh.len() != n * self.sh_stride()
            || self.material.len() != n * MAT_STRIDE
        {
            return Err(Error::InvalidInput("parameter arrays disagree on the Gaussian count".into()));
        }
        for (name, v) in [("geometry", &self.geometry), ("sh", &self.sh), ("material", &self.material)] {
            if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::numeric("gaussian parameters", format!("{name}[{k}] is not finite")));
            }
        }
        for i in 0..n {
            let q = &self.geometry[i * GEOM_STRIDE + 3..i * GEOM_STRIDE + 7];
            if q.iter().map(|v| v * v).sum::<f64>() < 1e-24 {
                return Err(Error::numeric("gaussian parameters", format!("quaternion {i} is zero")));
            }
        }
        Ok(())
    }

    /// Text checkpoint: a `ROTLIGHT-GAUSSIANS 1` header, `sh_degree`,
    /// `count`, a `fields` line, then one whitespace-separated row per
    /// Gaussian in the order geometry, sh, material (see module docs).
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "ROTLIGHT-GAUSSIANS 1");
        let _ = writeln!(s, "sh_degree {}", self.sh_degree);
        let _ = writeln!(s, "count {}", self.len());
        let _ = writeln!(
            s,
            "fields mu_x mu_y mu_z q_w q_x q_y q_z log_su log_sv opacity_logit sh[{}] albedo_logit_r albedo_logit_g albedo_logit_b roughness_logit",
            self.sh_stride()
        );
        let ss = self.sh_stride();
        for i in 0..self.len() {
            let row = self.geometry[i * GEOM_STRIDE..(i + 1) * GEOM_STRIDE]
                .iter()
                .chain(&self.sh[i * ss..(i + 1) * ss])
                .chain(&self.material[i * MAT_STRIDE..(i + 1) * MAT_STRIDE]);
            let cells: Vec<String> = row.map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
        let mut lines = text.lines();
        if lines.next() != Some("ROTLIGHT-GAUSSIANS 1") {
            return Err(bad("unknown checkpoint header"));
        }
        let mut field = |name: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(name)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(&format!("expected `{name}`")))
        };
        let degree = field("sh_degree")?;
        let count = field("count")?;
        let mut set = GaussianSet::new(degree)?;
        if !lines.next().is_some_and(|l| l.starts_with("fields")) {
            return Err(bad("missing fields line"));
        }
        let ss = set.sh_stride();
        let width = GEOM_STRIDE + ss + MAT_STRIDE;
        for (row_idx, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("row {row_idx}: bad number `{t}`"))))
                .collect::<Result<_>>()?;
            if vals.len() != width {
                return Err(bad(&format!("row {row_idx}: expected {width} values, got {}", vals.len())));
            }
            set.geometry.extend_from_slice(&vals[..GEOM_STRIDE]);
            set.sh.extend_from_slice(&vals[GEOM_STRIDE..GEOM_STRIDE + ss]);
            set.material.extend_from_slice(&vals[GEOM_STRIDE + ss..]);
        }
        if set.len() != count {
            return Err(bad(&format!("header says {count} Gaussians, found {}", set.len())));
        }
        set.validate()?;
        Ok(set)
    }
}

/// Gradients with the same layout as [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub geometry: Vec<f64>,
    pub sh: Vec<f64>,
    pub material: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros_like(set: &GaussianSet) -> Self {
        GaussianGrads {
            geometry: vec![0.0; set.geometry.len()],
            sh: vec![0.0; set.sh.len()],
            material: vec![0.0; set.material.len()],
        }
    }

    pub fn add(&mut self, o: &GaussianGrads) {
        for (a, b) in [(&mut self.geometry, &o.geometry), (&mut self.sh, &o.sh), (&mut self.material, &o.material)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}
