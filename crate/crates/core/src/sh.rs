//! Real spherical harmonics up to degree 3, used for view-dependent color.
//!
//! Basis ordering is (degree, order) lexicographic:
//! `Y_0^0, Y_1^{-1}, Y_1^0, Y_1^1, Y_2^{-2}, ..., Y_3^3`.

/// Basis functions per channel at the maximum supported degree.
pub const SH_COEFFS: usize = 16;

/// Maximum supported SH degree.
pub const MAX_DEGREE: usize = 3;

/// `Y_0^0 = 0.5 * sqrt(1/pi)`.
pub const Y00: f64 = 0.282_094_791_773_878_14;

const C1: f64 = 0.488_602_511_902_919_9;
const C2_0: f64 = 1.092_548_430_592_079_2;
const C2_1: f64 = 0.315_391_565_252_520_05;
const C2_2: f64 = 0.546_274_215_296_039_6;
const C3_0: f64 = 0.590_043_589_926_643_5;
const C3_1: f64 = 2.890_611_442_640_554;
const C3_2: f64 = 0.457_045_799_464_465_74;
const C3_3: f64 = 0.373_176_332_590_115_4;
const C3_4: f64 = 1.445_305_721_320_277;

/// Number of basis functions active at `degree`.
pub fn basis_len(degree: usize) -> usize {
    (degree.min(MAX_DEGREE) + 1).pow(2)
}

/// Evaluates all 16 basis functions at a unit direction.
pub fn basis(dir: [f64; 3]) -> [f64; SH_COEFFS] {
    let [x, y, z] = dir;
    let (x2, y2, z2) = (x * x, y * y, z * z);
    [
        Y00,
        C1 * y,
        C1 * z,
        C1 * x,
        C2_0 * x * y,
        C2_0 * y * z,
        C2_1 * (3.0 * z2 - 1.0),
        C2_0 * x * z,
        C2_2 * (x2 - y2),
        C3_0 * y * (3.0 * x2 - y2),
        C3_1 * x * y * z,
        C3_2 * y * (4.0 * z2 - x2 - y2),
        C3_3 * z * (2.0 * z2 - 3.0 * x2 - 3.0 * y2),
        C3_2 * x * (4.0 * z2 - x2 - y2),
        C3_4 * z * (x2 - y2),
        C3_0 * x * (x2 - 3.0 * y2),
    ]
}

/// Partial derivatives of every basis function with respect to the direction
/// components, treating (x, y, z) as free coordinates. Callers working with
/// normalized directions must chain through the normalization Jacobian.
pub fn basis_grad(dir: [f64; 3]) -> [[f64; 3]; SH_COEFFS] {
    let [x, y, z] = dir;
    let (x2, y2, z2) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, C1, 0.0],
        [0.0, 0.0, C1],
        [C1, 0.0, 0.0],
        [C2_0 * y, C2_0 * x, 0.0],
        [0.0, C2_0 * z, C2_0 * y],
        [0.0, 0.0, C2_1 * 6.0 * z],
        [C2_0 * z, 0.0, C2_0 * x],
        [C2_2 * 2.0 * x, -C2_2 * 2.0 * y, 0.0],
        [C3_0 * 6.0 * x * y, C3_0 * (3.0 * x2 - 3.0 * y2), 0.0],
        [C3_1 * y * z, C3_1 * x * z, C3_1 * x * y],
        [
            -C3_2 * 2.0 * x * y,
            C3_2 * (4.0 * z2 - x2 - 3.0 * y2),
            C3_2 * 8.0 * y * z,
        ],
        [
            -C3_3 * 6.0 * x * z,
            -C3_3 * 6.0 * y * z,
            C3_3 * (6.0 * z2 - 3.0 * x2 - 3.0 * y2),
        ],
        [
            C3_2 * (4.0 * z2 - 3.0 * x2 - y2),
            -C3_2 * 2.0 * x * y,
            C3_2 * 8.0 * x * z,
        ],
        [C3_4 * 2.0 * x * z, -C3_4 * 2.0 * y * z, C3_4 * (x2 - y2)],
        [C3_0 * (3.0 * x2 - 3.0 * y2), -C3_0 * 6.0 * x * y, 0.0],
    ]
}

/// Evaluates view-dependent color from channel-major coefficients:
/// `color_c = 0.5 + sum_k Y_k(dir) * coeffs[c*16 + k]`, truncated at `degree`
/// (clamped to 3). Output is unclamped; the projection stage clamps at zero.
pub fn eval_sh(coeffs: &[f64; SH_COEFFS * 3], dir: [f64; 3], degree: usize) -> [f64; 3] {
    debug_assert!(
        ((dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt() - 1.0).abs() < 1e-6,
        "eval_sh expects a unit direction"
    );
    let b = basis(dir);
    let n = basis_len(degree);
    let mut rgb = [0.5; 3];
    for c in 0..3 {
        let base = c * SH_COEFFS;
        for k in 0..n {
            rgb[c] += b[k] * coeffs[base + k];
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_coeffs_give_mid_gray() {
        let rgb = eval_sh(&[0.0; 48], [0.0, 0.0, 1.0], 3);
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn degree_zero_is_direction_independent() {
        let d = 0.7;
        let mut coeffs = [0.0; 48];
        for c in 0..3 {
            coeffs[c * SH_COEFFS] = d;
        }
        let dirs = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.6, 0.0, 0.8]];
        for dir in dirs {
            let rgb = eval_sh(&coeffs, dir, 0);
            for c in 0..3 {
                assert!((rgb[c] - (0.5 + 0.282_094_79 * d)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn parity_negates_odd_degrees_only() {
        let dir = [0.48, -0.6, 0.64];
        let b_pos = basis(dir);
        let b_neg = basis([-dir[0], -dir[1], -dir[2]]);
        let degree_of = |k: usize| (k as f64).sqrt() as usize;
        for k in 0..SH_COEFFS {
            let expect = if degree_of(k) % 2 == 0 {
                b_pos[k]
            } else {
                -b_pos[k]
            };
            assert!(
                (b_neg[k] - expect).abs() < 1e-12,
                "parity violated at basis {k}"
            );
        }
    }

    /// Numeric quadrature over the sphere: the basis must be orthonormal.
    #[test]
    fn basis_orthonormal_under_quadrature() {
        let n_theta = 256;
        let n_phi = 256;
        let mut gram = [[0.0f64; SH_COEFFS]; SH_COEFFS];
        for it in 0..n_theta {
            // Midpoint rule in cos(theta) gives exact-enough integrals for
            // polynomials of this degree.
            let ct = -1.0 + (it as f64 + 0.5) * 2.0 / n_theta as f64;
            let st = (1.0 - ct * ct).sqrt();
            for ip in 0..n_phi {
                let phi = (ip as f64 + 0.5) * std::f64::consts::TAU / n_phi as f64;
                let dir = [st * phi.cos(), st * phi.sin(), ct];
                let b = basis(dir);
                for i in 0..SH_COEFFS {
                    for j in i..SH_COEFFS {
                        gram[i][j] += b[i] * b[j];
                    }
                }
            }
        }
        let w = 2.0 / n_theta as f64 * std::f64::consts::TAU / n_phi as f64;
        for i in 0..SH_COEFFS {
            for j in i..SH_COEFFS {
                let v = gram[i][j] * w;
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (v - expect).abs() < 1e-3,
                    "gram[{i}][{j}] = {v}, expected {expect}"
                );
            }
        }
    }

    #[test]
    fn basis_grad_matches_finite_differences() {
        let dir = [0.3, -0.5, 0.81];
        let g = basis_grad(dir);
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = dir;
            let mut dm = dir;
            dp[axis] += h;
            dm[axis] -= h;
            let bp = basis(dp);
            let bm = basis(dm);
            for k in 0..SH_COEFFS {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!(
                    (g[k][axis] - fd).abs() < 1e-7,
                    "basis {k} axis {axis}: analytic {} vs fd {fd}",
                    g[k][axis]
                );
            }
        }
    }
}
