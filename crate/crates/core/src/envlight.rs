//! Optimizable equirectangular environment light with rotated lookups.
//!
//! Radiance is `softplus(raw)` per texel so that any raw parameter vector
//! is a valid, non-negative light. The up axis is `+y`; a light index `k`
//! rotates the query direction about it by the angle `phi_k` before the
//! lookup.

use std::f64::consts::PI;
use std::path::Path;

use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::image::{read_pfm, write_pfm, ImageBuffer};
use crate::math::{inverse_softplus, sigmoid, softplus, Mat3, UnitVec3, Vec3};

/// Rotation about the `+y` axis:
/// rows `(cos, 0, sin)`, `(0, 1, 0)`, `(-sin, 0, cos)`.
pub fn rot_y(phi: f64) -> Mat3 {
    let (s, c) = phi.sin_cos();
    Mat3::from_rows([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
}

/// Rotation angles `phi_k`, one per light index.
#[derive(Clone, Debug, PartialEq)]
pub struct LightAngleTable {
    angles: Vec<f64>,
    rotations: Vec<Mat3>,
}

impl LightAngleTable {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidInput("light angle table needs at least one angle".into()));
        }
        for &a in &angles {
            if !(a.is_finite() && (0.0..2.0 * PI).contains(&a)) {
                return Err(Error::InvalidInput(format!("light angle {a} outside [0, 2pi)")));
            }
        }
        let rotations = angles.iter().map(|&a| rot_y(a)).collect();
        Ok(LightAngleTable { angles, rotations })
    }

    /// Angles in degrees, wrapped into `[0, 360)`.
    pub fn from_degrees(degrees: &[f64]) -> Result<Self> {
        let rad = degrees
            .iter()
            .map(|d| {
                let r = d.rem_euclid(360.0).to_radians();
                if r >= 2.0 * PI { 0.0 } else { r }
            })
            .collect();
        LightAngleTable::new(rad)
    }

    pub fn single() -> Self {
        LightAngleTable::new(vec![0.0]).expect("valid")
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn angle(&self, k: usize) -> Result<f64> {
        self.angles.get(k).copied().ok_or(Error::Index { index: k, len: self.angles.len() })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.angles.iter().map(|a| a.to_degrees()).collect()
    }

    pub fn rotation(&self, k: usize) -> Result<&Mat3> {
        self.rotations.get(k).ok_or(Error::Index { index: k, len: self.angles.len() })
    }

    /// Restricts the table to the given light indices.
    pub fn subset(&self, ks: &[usize]) -> Result<Self> {
        let angles = ks.iter().map(|&k| self.angle(k)).collect::<Result<Vec<_>>>()?;
        LightAngleTable::new(angles)
    }
}

/// Texels and bilinear weights touched by one lookup.
pub type EnvTaps = SmallVec<[(usize, f64); 4]>;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    height: usize,
    width: usize,
    /// `height * width * 3` unconstrained parameters, row-major from the
    /// `+y` pole down.
    pub raw: Vec<f64>,
}

impl EnvironmentMap {
    /// Map with every texel at radiance `rgb`.
    pub fn constant(height: usize, rgb: [f64; 3]) -> Result<Self> {
        let width = 2 * height;
        let data: Vec<f64> = (0..height * width).flat_map(|_| rgb).collect();
        EnvironmentMap::from_radiance(height, width, &data)
    }

    pub fn from_radiance(height: usize, width: usize, radiance: &[f64]) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::InvalidInput(format!("environment map must be H x 2H, got {height} x {width}")));
        }
        if radiance.len() != height * width * 3 {
            return Err(Error::InvalidInput("radiance length mismatch".into()));
        }
        if radiance.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("environment radiance must be finite and >= 0".into()));
        }
        Ok(EnvironmentMap { height, width, raw: radiance.iter().map(|&v| inverse_softplus(v)).collect() })
    }

    pub fn from_raw(height: usize, width: usize, raw: Vec<f64>) -> Result<Self> {
        if height == 0 || width != 2 * height || raw.len() != height * width * 3 {
            return Err(Error::InvalidInput("bad environment parameter shape".into()));
        }
        Ok(EnvironmentMap { height, width, raw })
    }

    /// Builds a map by evaluating `f` at every texel center direction.
    pub fn from_fn(height: usize, f: impl Fn(Vec3) -> [f64; 3]) -> Result<Self> {
        let width = 2 * height;
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height {
            for j in 0..width {
                data.extend(f(texel_direction(height, width, i, j)));
            }
        }
        EnvironmentMap::from_radiance(height, width, &data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn texel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn texel_radiance(&self, texel: usize) -> [f64; 3] {
        let r = &self.raw[texel * 3..texel * 3 + 3];
        [softplus(r[0]), softplus(r[1]), softplus(r[2])]
    }

    pub fn radiance_data(&self) -> Vec<f64> {
        self.raw.iter().map(|&v| softplus(v)).collect()
    }

    pub fn max_radiance(&self) -> f64 {
        self.radiance_data().into_iter().fold(0.0, f64::max)
    }

    /// Bilinear taps for a unit direction: horizontal wrap, vertical clamp,
    /// and the whole pole row (equal weights) when the azimuth is undefined.
    pub fn taps(&self, dir: Vec3) -> EnvTaps {
        let (h, w) = (self.height, self.width);
        let mut taps = EnvTaps::new();
        if dir.x == 0.0 && dir.z == 0.0 {
            let row = if dir.y >= 0.0 { 0 } else { h - 1 };
            let wt = 1.0 / w as f64;
            taps.extend((0..w).map(|j| (row * w + j, wt)));
            return taps;
        }
        let u = 0.5 + dir.x.atan2(-dir.z) / (2.0 * PI);
        let v = dir.y.clamp(-1.0, 1.0).acos() / PI;
        let s = u * w as f64 - 0.5;
        let j0f = s.floor();
        let fx = s - j0f;
        let j0 = (j0f as i64).rem_euclid(w as i64) as usize;
        let j1 = (j0 + 1) % w;
        let t = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let i0 = (t.floor() as usize).min(h.saturating_sub(2));
        let i1 = (i0 + 1).min(h - 1);
        let fy = t - i0 as f64;
        taps.push((i0 * w + j0, (1.0 - fx) * (1.0 - fy)));
        taps.push((i0 * w + j1, fx * (1.0 - fy)));
        taps.push((i1 * w + j0, (1.0 - fx) * fy));
        taps.push((i1 * w + j1, fx * fy));
        taps
    }

    /// Radiance toward `dir` (unrotated).
    #[inline]
    pub fn lookup(&self, dir: &UnitVec3) -> [f64; 3] {
        self.lookup_vec(dir.get())
    }

    #[inline]
    pub fn lookup_vec(&self, dir: Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (texel, wt) in self.taps(dir) {
            let rad = self.texel_radiance(texel);
            for c in 0..3 {
                out[c] += wt * rad[c];
            }
        }
        out
    }

    /// Radiance under light index `k`: `E(R_k dir)`.
    pub fn lookup_rotated(&self, dir: &UnitVec3, k: usize, table: &LightAngleTable) -> Result<[f64; 3]> {
        let rot = table.rotation(k)?;
        Ok(self.lookup_vec(rot.mul_vec(dir.get())))
    }

    /// Adds `d_rgb`-weighted derivatives of a rotated lookup w.r.t. `raw`.
    pub fn accumulate_grad(&self, dir: Vec3, rot: &Mat3, d_rgb: [f64; 3], grad: &mut [f64]) {
        for (texel, wt) in self.taps(rot.mul_vec(dir)) {
            for c in 0..3 {
                grad[texel * 3 + c] += wt * sigmoid(self.raw[texel * 3 + c]) * d_rgb[c];
            }
        }
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer::from_data(self.width, self.height, 3, self.radiance_data()).expect("finite radiance")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_pfm(path, &self.to_image())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = read_pfm(path)?;
        if img.channels != 3 {
            return Err(Error::Image { path: path.to_path_buf(), detail: "environment map must be RGB".into() });
        }
        EnvironmentMap::from_radiance(img.height, img.width, &img.data)
    }

    /// Same lighting resampled to a new height (bilinear).
    pub fn resampled(&self, height: usize) -> Result<Self> {
        if height == self.height {
            return Ok(self.clone());
        }
        EnvironmentMap::from_fn(height, |d| self.lookup_vec(d))
    }
}

/// World direction of texel `(i, j)`'s center.
pub fn texel_direction(height: usize, width: usize, i: usize, j: usize) -> Vec3 {
    let u = (j as f64 + 0.5) / width as f64;
    let v = (i as f64 + 0.5) / height as f64;
    let theta = v * PI;
    let phi = (u - 0.5) * 2.0 * PI;
    // Inverse of u = 0.5 + atan2(x, -z) / 2pi, v = acos(y) / pi.
    Vec3::new(theta.sin() * phi.sin(), theta.cos(), -theta.sin() * phi.cos())
}

/// Solid angle of one texel row `i`.
pub fn texel_solid_angle(height: usize, width: usize, i: usize) -> f64 {
    let t0 = i as f64 / height as f64 * PI;
    let t1 = (i + 1) as f64 / height as f64 * PI;
    2.0 * PI / width as f64 * (t0.cos() - t1.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn random_map(h: usize, seed: u64) -> EnvironmentMap {
        let rng = DetRng::new(seed);
        let raw = (0..h * 2 * h * 3).map(|i| rng.normal(&[i as u64])).collect();
        EnvironmentMap::from_raw(h, 2 * h, raw).unwrap()
    }

    fn random_dir(rng: &DetRng, i: u64) -> UnitVec3 {
        let z = 2.0 * rng.uniform(&[i, 0]) - 1.0;
        let phi = 2.0 * PI * rng.uniform(&[i, 1]);
        let s = (1.0 - z * z).sqrt();
        UnitVec3::new(Vec3::new(s * phi.cos(), z, s * phi.sin())).unwrap()
    }

    #[test]
    fn rot_y_identity_and_quarter_turn() {
        assert_eq!(rot_y(0.0), Mat3::IDENTITY);
        let v = rot_y(PI / 2.0).mul_vec(Vec3::X);
        assert!((v - Vec3::new(0.0, 0.0, -1.0)).length() < 1e-15);
    }

    #[test]
    fn rot_y_group_property() {
        let rng = DetRng::new(11);
        for i in 0..200 {
            let a = 10.0 * (rng.uniform(&[i, 0]) - 0.5);
            let b = 10.0 * (rng.uniform(&[i, 1]) - 0.5);
            let lhs = rot_y(a).mul_mat(&rot_y(b));
            assert!(lhs.max_abs_diff(&rot_y(a + b)) < 1e-12);
            assert!(rot_y(a).orthonormality_error() < 1e-12);
            assert!((rot_y(a).determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_is_constant() {
        let env = EnvironmentMap::constant(8, [0.3, 0.5, 0.7]).unwrap();
        let rng = DetRng::new(2);
        for i in 0..500 {
            let c = env.lookup(&random_dir(&rng, i));
            for (a, b) in c.iter().zip([0.3, 0.5, 0.7]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let top = env.lookup(&UnitVec3::Y);
        assert!((top[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn pole_is_top_row_mean() {
        let env = random_map(8, 5);
        let c = env.lookup(&UnitVec3::Y);
        for ch in 0..3 {
            let mean: f64 = (0..16).map(|j| env.texel_radiance(j)[ch]).sum::<f64>() / 16.0;
            assert!((c[ch] - mean).abs() < 1e-12);
        }
        let down = env.lookup(&-UnitVec3::Y);
        let mean: f64 = (0..16).map(|j| env.texel_radiance(7 * 16 + j)[0]).sum::<f64>() / 16.0;
        assert!((down[0] - mean).abs() < 1e-12);
    }

    /// Independent bilinear oracle: texel-center coordinates, explicit wrap.
    fn oracle_lookup(env: &EnvironmentMap, d: Vec3) -> [f64; 3] {
        let (h, w) = (env.height() as f64, env.width() as f64);
        let mut az = d.x.atan2(-d.z);
        if az < 0.0 {
            az += 2.0 * PI;
        }
        // u in [0,1): shift by a half turn.
        let u = (az / (2.0 * PI) + 0.5).fract();
        let v = d.y.acos() / PI;
        let x = u * w - 0.5;
        let y = (v * h - 0.5).max(0.0).min(h - 1.0);
        let xf = x.floor();
        let yf = y.floor().min(h - 2.0);
        let ax = x - xf;
        let ay = y - yf;
        let col = |c: f64| (((c as i64) % w as i64 + w as i64) % w as i64) as usize;
        let at = |r: f64, c: f64| env.texel_radiance(r as usize * env.width() + col(c));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = at(yf, xf)[ch] * (1.0 - ax) * (1.0 - ay)
                + at(yf, xf + 1.0)[ch] * ax * (1.0 - ay)
                + at(yf + 1.0, xf)[ch] * (1.0 - ax) * ay
                + at(yf + 1.0, xf + 1.0)[ch] * ax * ay;
        }
        out
    }

    #[test]
    fn lookup_matches_bilinear_oracle() {
        let env = random_map(8, 9);
        let rng = DetRng::new(3);
        for i in 0..2000 {
            let d = random_dir(&rng, i);
            let a = env.lookup(&d);
            let b = oracle_lookup(&env, d.get());
            for ch in 0..3 {
                assert!((a[ch] - b[ch]).abs() < 1e-6, "dir {d:?}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn rotated_lookup_is_composition() {
        let env = random_map(8, 4);
        let table = LightAngleTable::from_degrees(&[0.0, 120.0, 240.0]).unwrap();
        let rng = DetRng::new(8);
        let d = random_dir(&rng, 0);
        let vals: Vec<[f64; 3]> = (0..3).map(|k| env.lookup_rotated(&d, k, &table).unwrap()).collect();
        assert_eq!(vals[0], env.lookup(&d));
        assert_ne!(vals[0], vals[1]);
        assert_ne!(vals[1], vals[2]);
        assert_ne!(vals[0], vals[2]);
        assert!(matches!(env.lookup_rotated(&d, 3, &table), Err(Error::Index { .. })));
    }

    #[test]
    fn constant_map_rotation_invariant() {
        let env = EnvironmentMap::constant(4, [1.0, 2.0, 3.0]).unwrap();
        let table = LightAngleTable::from_degrees(&[0.0, 77.0]).unwrap();
        let d = UnitVec3::new(Vec3::new(0.3, 0.2, -0.9)).unwrap();
        let a = env.lookup_rotated(&d, 0, &table).unwrap();
        let b = env.lookup_rotated(&d, 1, &table).unwrap();
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut env = random_map(4, 21);
        let rot = rot_y(0.7);
        let d = Vec3::new(0.4, 0.3, -0.8);
        let d = d / d.length();
        let w = [0.3, -1.2, 0.8];
        let f = |e: &EnvironmentMap| {
            let c = e.lookup_vec(rot.mul_vec(d));
            c[0] * w[0] + c[1] * w[1] + c[2] * w[2]
        };
        let mut grad = vec![0.0; env.raw.len()];
        env.accumulate_grad(d, &rot, w, &mut grad);
        let h = 1e-6;
        for i in 0..env.raw.len() {
            let orig = env.raw[i];
            env.raw[i] = orig + h;
            let fp = f(&env);
            env.raw[i] = orig - h;
            let fm = f(&env);
            env.raw[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!((fd - grad[i]).abs() / denom < 1e-4 || (fd - grad[i]).abs() < 1e-9, "texel param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn softplus_keeps_radiance_nonnegative() {
        let raw = vec![-50.0, 0.0, 50.0, -3.0, 2.0, -0.5];
        let env = EnvironmentMap::from_raw(1, 2, raw).unwrap();
        assert!(env.radiance_data().iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn texel_direction_roundtrip() {
        let env = random_map(6, 1);
        for i in 0..6 {
            for j in 0..12 {
                let d = texel_direction(6, 12, i, j);
                let taps = env.taps(d);
                let (best, wt) = taps.iter().cloned().fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
                // Interior rows map exactly onto their texel center.
                if i > 0 && i < 5 {
                    assert_eq!(best, i * 12 + j);
                    assert!((wt - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
