//! Real spherical harmonics up to degree 3, in the sign convention common to
//! Gaussian-splatting codebases, with the `+0.5` DC offset.

use crate::math::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values for `degree` at unit direction `d`; entries past
/// `coeff_count(degree)` are zero.
pub fn sh_basis(degree: usize, d: Vec3) -> [f64; 16] {
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree == 0 {
        return b;
    }
    let (x, y, z) = (d.x, d.y, d.z);
    b[1] = -SH_C1 * y;
    b[2] = SH_C1 * z;
    b[3] = -SH_C1 * x;
    if degree == 1 {
        return b;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    b[4] = SH_C2[0] * xy;
    b[5] = SH_C2[1] * yz;
    b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    b[7] = SH_C2[3] * xz;
    b[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return b;
    }
    b[9] = SH_C3[0] * y * (3.0 * xx - yy);
    b[10] = SH_C3[1] * xy * z;
    b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    b[14] = SH_C3[5] * z * (xx - yy);
    b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    b
}

/// Color from `coeffs` (RGB triples, `coeff_count(degree)` of them):
/// `max(0, sum_i basis_i * c_i + 0.5)` per channel.
pub fn sh_eval(degree: usize, coeffs: &[[f64; 3]], d: Vec3) -> [f64; 3] {
    let b = sh_basis(degree, d);
    let mut out = [0.5; 3];
    for (bi, c) in b.iter().zip(coeffs).take(coeff_count(degree)) {
        for ch in 0..3 {
            out[ch] += bi * c[ch];
        }
    }
    out.map(|v| v.max(0.0))
}

/// Flat-slice variant: `coeffs` holds `3 * coeff_count(degree)` values.
pub fn sh_eval_flat(degree: usize, coeffs: &[f64], d: Vec3) -> [f64; 3] {
    let b = sh_basis(degree, d);
    let mut out = [0.5; 3];
    for i in 0..coeff_count(degree) {
        for ch in 0..3 {
            out[ch] += b[i] * coeffs[i * 3 + ch];
        }
    }
    out.map(|v| v.max(0.0))
}
