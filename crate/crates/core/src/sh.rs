//! Real spherical-harmonics color evaluation up to degree 3.

use nalgebra::Vector3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Evaluates SH coefficients along `dir` (need not be normalised). No DC offset applied.
pub fn eval(sh: &[[f64; 3]], dir: &Vector3<f64>) -> [f64; 3] {
    let mut out = [0.0; 3];
    let n = dir.norm();
    let (x, y, z) = if n > 0.0 {
        (dir.x / n, dir.y / n, dir.z / n)
    } else {
        (0.0, 0.0, 1.0)
    };
    let mut basis = [0.0f64; 16];
    basis[0] = C0;
    if sh.len() > 1 {
        basis[1] = -C1 * y;
        basis[2] = C1 * z;
        basis[3] = -C1 * x;
    }
    if sh.len() > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        basis[4] = C2[0] * x * y;
        basis[5] = C2[1] * y * z;
        basis[6] = C2[2] * (2.0 * zz - xx - yy);
        basis[7] = C2[3] * x * z;
        basis[8] = C2[4] * (xx - yy);
        if sh.len() > 9 {
            basis[9] = C3[0] * y * (3.0 * xx - yy);
            basis[10] = C3[1] * x * y * z;
            basis[11] = C3[2] * y * (4.0 * zz - xx - yy);
            basis[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            basis[13] = C3[4] * x * (4.0 * zz - xx - yy);
            basis[14] = C3[5] * z * (xx - yy);
            basis[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }
    for (coef, b) in sh.iter().zip(basis.iter()) {
        for c in 0..3 {
            out[c] += b * coef[c];
        }
    }
    out
}

/// DC coefficient that reproduces `rgb` for a degree-0 Gaussian.
pub fn dc_from_rgb(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / C0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_round_trip() {
        let sh = [dc_from_rgb([1.0, 0.25, 0.0])];
        let c = eval(&sh, &Vector3::new(0.3, -0.2, 1.0));
        for (got, want) in c.iter().zip([0.5, -0.25, -0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_one_flips_with_direction() {
        let mut sh = vec![[0.0; 3]; 4];
        sh[2] = [1.0, 1.0, 1.0];
        let fwd = eval(&sh, &Vector3::new(0.0, 0.0, 1.0));
        let back = eval(&sh, &Vector3::new(0.0, 0.0, -1.0));
        assert!((fwd[0] + back[0]).abs() < 1e-12);
        assert!((fwd[0] - C1).abs() < 1e-12);
    }
}
