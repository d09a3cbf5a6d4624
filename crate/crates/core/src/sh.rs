//! Real spherical harmonics up to degree 3 in the layout used by 3D Gaussian splatting.

use nalgebra::Vector3;

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

pub const MAX_SH_DEGREE: usize = 3;

#[inline]
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values `Y_k(dir)` for every coefficient of the given degree (unused slots are zero).
pub fn basis(degree: usize, dir: &Vector3<f64>) -> [f64; 16] {
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree == 0 {
        return b;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    b[1] = -SH_C1 * y;
    b[2] = SH_C1 * z;
    b[3] = -SH_C1 * x;
    if degree == 1 {
        return b;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    b[4] = SH_C2[0] * x * y;
    b[5] = SH_C2[1] * y * z;
    b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    b[7] = SH_C2[3] * x * z;
    b[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return b;
    }
    b[9] = SH_C3[0] * y * (3.0 * xx - yy);
    b[10] = SH_C3[1] * x * y * z;
    b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    b[14] = SH_C3[5] * z * (xx - yy);
    b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    b
}

/// Gradient of every basis function with respect to the (unnormalized) direction components.
pub fn basis_grad(degree: usize, dir: &Vector3<f64>) -> [[f64; 3]; 16] {
    let mut g = [[0.0; 3]; 16];
    if degree == 0 {
        return g;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    g[1] = [0.0, -SH_C1, 0.0];
    g[2] = [0.0, 0.0, SH_C1];
    g[3] = [-SH_C1, 0.0, 0.0];
    if degree == 1 {
        return g;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
    g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
    g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
    g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
    g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    if degree == 2 {
        return g;
    }
    g[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
    g[11] = [
        -2.0 * SH_C3[2] * x * y,
        SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * SH_C3[2] * y * z,
    ];
    g[12] = [
        -6.0 * SH_C3[3] * x * z,
        -6.0 * SH_C3[3] * y * z,
        SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    g[13] = [
        SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * SH_C3[4] * x * y,
        8.0 * SH_C3[4] * x * z,
    ];
    g[14] = [
        2.0 * SH_C3[5] * x * z,
        -2.0 * SH_C3[5] * y * z,
        SH_C3[5] * (xx - yy),
    ];
    g[15] = [
        SH_C3[6] * (3.0 * xx - 3.0 * yy),
        -6.0 * SH_C3[6] * x * y,
        0.0,
    ];
    g
}

/// Raw (unclamped, un-offset) SH response per channel.
pub fn eval_raw(coeffs: &[[f64; 3]], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    let b = basis(degree, dir);
    let n = coeff_count(degree).min(coeffs.len());
    let mut out = [0.0; 3];
    for k in 0..n {
        for c in 0..3 {
            out[c] += coeffs[k][c] * b[k];
        }
    }
    out
}

/// Color seen from `view_direction`: SH response + 0.5, clamped to [0, 1].
pub fn sh_to_color(coeffs: &[[f64; 3]], degree: usize, view_direction: &Vector3<f64>) -> [f64; 3] {
    let raw = eval_raw(coeffs, degree, view_direction);
    raw.map(|v| (v + 0.5).clamp(0.0, 1.0))
}

/// DC coefficient reproducing a flat color under degree-0 evaluation.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}
