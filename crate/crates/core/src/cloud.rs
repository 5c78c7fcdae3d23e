use crate::error::CoreError;
use crate::sh::{SH_COEFFS, Y00};
use crate::{inverse_sigmoid, sigmoid};

/// Number of scalar spherical-harmonics coefficients per Gaussian
/// (16 basis functions x 3 color channels, channel-major).
pub const SH_PER_GAUSSIAN: usize = SH_COEFFS * 3;

/// Default opacity assigned at initialization.
pub const INIT_OPACITY: f64 = 0.1;

/// Structure-of-arrays store for all Gaussians of one shard (or the whole
/// scene). Scales are stored as logs and opacities as logits so the derived
/// quantities stay in their valid ranges under unconstrained optimization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    /// Quaternions (w, x, y, z); renormalized after every optimizer step.
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    /// Channel-major SH coefficients: `sh[c * 16 + k]` is basis `k` of channel `c`.
    pub sh_coeffs: Vec<[f64; SH_PER_GAUSSIAN]>,
}

/// The six independently-optimized parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    ShDc,
    ShRest,
    Opacity,
    Scale,
    Rotation,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Position,
        ParamGroup::ShDc,
        ParamGroup::ShRest,
        ParamGroup::Opacity,
        ParamGroup::Scale,
        ParamGroup::Rotation,
    ];
}

/// Per-parameter gradients with the same shapes as [`GaussianCloud`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CloudGrads {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<[f64; SH_PER_GAUSSIAN]>,
}

impl CloudGrads {
    pub fn zeros(count: usize) -> Self {
        CloudGrads {
            positions: vec![[0.0; 3]; count],
            log_scales: vec![[0.0; 3]; count],
            rotations: vec![[0.0; 4]; count],
            opacity_logits: vec![0.0; count],
            sh_coeffs: vec![[0.0; SH_PER_GAUSSIAN]; count],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &CloudGrads) {
        assert_eq!(self.len(), other.len(), "gradient shape mismatch");
        for i in 0..self.len() {
            for a in 0..3 {
                self.positions[i][a] += other.positions[i][a];
                self.log_scales[i][a] += other.log_scales[i][a];
            }
            for a in 0..4 {
                self.rotations[i][a] += other.rotations[i][a];
            }
            self.opacity_logits[i] += other.opacity_logits[i];
            for a in 0..SH_PER_GAUSSIAN {
                self.sh_coeffs[i][a] += other.sh_coeffs[i][a];
            }
        }
    }

    /// Elementwise `self *= factor` (used for batch mean reduction).
    pub fn scale(&mut self, factor: f64) {
        for i in 0..self.len() {
            for a in 0..3 {
                self.positions[i][a] *= factor;
                self.log_scales[i][a] *= factor;
            }
            for a in 0..4 {
                self.rotations[i][a] *= factor;
            }
            self.opacity_logits[i] *= factor;
            for a in 0..SH_PER_GAUSSIAN {
                self.sh_coeffs[i][a] *= factor;
            }
        }
    }
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Derived opacity of gaussian `i`.
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Derived scale vector of gaussian `i`.
    pub fn scale(&self, i: usize) -> [f64; 3] {
        let ls = self.log_scales[i];
        [ls[0].exp(), ls[1].exp(), ls[2].exp()]
    }

    /// Renormalizes all quaternions to unit norm.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// Appends gaussian `i` of `src` to this cloud.
    pub fn push_from(&mut self, src: &GaussianCloud, i: usize) {
        self.positions.push(src.positions[i]);
        self.log_scales.push(src.log_scales[i]);
        self.rotations.push(src.rotations[i]);
        self.opacity_logits.push(src.opacity_logits[i]);
        self.sh_coeffs.push(src.sh_coeffs[i]);
    }

    /// Appends a duplicate of this cloud's gaussian `i`.
    pub fn push_copy_of(&mut self, i: usize) {
        self.positions.push(self.positions[i]);
        self.log_scales.push(self.log_scales[i]);
        self.rotations.push(self.rotations[i]);
        self.opacity_logits.push(self.opacity_logits[i]);
        self.sh_coeffs.push(self.sh_coeffs[i]);
    }

    /// Retains gaussians whose index passes `keep`; returns how many were dropped.
    pub fn retain_by_index(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.len());
        let before = self.len();
        let mut j = 0;
        for i in 0..before {
            if keep[i] {
                if i != j {
                    self.positions[j] = self.positions[i];
                    self.log_scales[j] = self.log_scales[i];
                    self.rotations[j] = self.rotations[i];
                    self.opacity_logits[j] = self.opacity_logits[i];
                    self.sh_coeffs[j] = self.sh_coeffs[i];
                }
                j += 1;
            }
        }
        self.positions.truncate(j);
        self.log_scales.truncate(j);
        self.rotations.truncate(j);
        self.opacity_logits.truncate(j);
        self.sh_coeffs.truncate(j);
        before - j
    }

    /// Asserts the structural invariant that all arrays share one length.
    pub fn check_shapes(&self) -> bool {
        let n = self.positions.len();
        self.log_scales.len() == n
            && self.rotations.len() == n
            && self.opacity_logits.len() == n
            && self.sh_coeffs.len() == n
    }
}

/// One input point for [`init_from_points`].
#[derive(Debug, Clone, Copy)]
pub struct InitPoint {
    pub position: [f64; 3],
    /// Linear RGB in [0, 1]; `None` falls back to mid-gray.
    pub rgb: Option<[f64; 3]>,
}

/// Builds a cloud from a point set: isotropic scales from the mean distance
/// to (up to) 3 nearest neighbors, identity rotations, opacity 0.1, and SH
/// degree-0 coefficients inverted from the point color.
pub fn init_from_points(points: &[InitPoint]) -> Result<GaussianCloud, CoreError> {
    if points.is_empty() {
        return Err(CoreError::EmptyInitialization);
    }
    let n = points.len();
    let mut cloud = GaussianCloud::default();
    cloud.positions.reserve(n);
    for (i, p) in points.iter().enumerate() {
        if !p.position.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFiniteParameter {
                index: i,
                what: "init position",
            });
        }
        cloud.positions.push(p.position);
        cloud.rotations.push([1.0, 0.0, 0.0, 0.0]);
        cloud.opacity_logits.push(inverse_sigmoid(INIT_OPACITY));
        let rgb = p.rgb.unwrap_or([0.5; 3]);
        let mut sh = [0.0; SH_PER_GAUSSIAN];
        for c in 0..3 {
            sh[c * SH_COEFFS] = (rgb[c] - 0.5) / Y00;
        }
        cloud.sh_coeffs.push(sh);
    }
    for i in 0..n {
        let d = mean_knn_distance(&cloud.positions, i, 3);
        let s = d.max(1e-7).ln();
        cloud.log_scales.push([s, s, s]);
    }
    Ok(cloud)
}

/// Mean distance from point `i` to its `k` nearest neighbors (fewer if the
/// set is smaller). A lone point falls back to unit distance.
fn mean_knn_distance(positions: &[[f64; 3]], i: usize, k: usize) -> f64 {
    let k = k.min(positions.len() - 1);
    if k == 0 {
        return 1.0;
    }
    // Brute force; initialization point sets are desk-scale.
    let mut best = vec![f64::INFINITY; k];
    let pi = positions[i];
    for (j, pj) in positions.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2) + (pi[2] - pj[2]).powi(2))
            .sqrt();
        if d < best[k - 1] {
            best[k - 1] = d;
            let mut m = k - 1;
            while m > 0 && best[m] < best[m - 1] {
                best.swap(m, m - 1);
                m -= 1;
            }
        }
    }
    best.iter().sum::<f64>() / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_defaults() {
        let cloud = init_from_points(&[InitPoint {
            position: [0.0; 3],
            rgb: Some([1.0, 1.0, 1.0]),
        }])
        .unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.rotations[0], [1.0, 0.0, 0.0, 0.0]);
        assert!((cloud.opacity(0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mid_gray_gives_zero_dc() {
        let cloud = init_from_points(&[InitPoint {
            position: [0.0; 3],
            rgb: Some([0.5, 0.5, 0.5]),
        }])
        .unwrap();
        for c in 0..3 {
            assert!(cloud.sh_coeffs[0][c * SH_COEFFS].abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_points_scale_from_knn() {
        let pts: Vec<InitPoint> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&x| InitPoint {
                position: [x, 0.0, 0.0],
                rgb: None,
            })
            .collect();
        let cloud = init_from_points(&pts).unwrap();
        // Brute-force oracle: with 3 points, each has 2 neighbors.
        let oracle = |dists: &[f64]| dists.iter().sum::<f64>() / dists.len() as f64;
        assert!((cloud.log_scales[1][0] - oracle(&[1.0, 1.0]).ln()).abs() < 1e-6);
        assert!((cloud.log_scales[0][0] - oracle(&[1.0, 2.0]).ln()).abs() < 1e-6);
    }

    #[test]
    fn empty_points_rejected() {
        assert!(matches!(
            init_from_points(&[]),
            Err(CoreError::EmptyInitialization)
        ));
    }

    #[test]
    fn activation_round_trip() {
        for &a in &[0.001, 0.01, 0.1, 0.5, 0.9, 0.999] {
            assert!((sigmoid(inverse_sigmoid(a)) - a).abs() < 1e-6);
        }
        for &s in &[1e-6f64, 1e-3, 1.0, 1e3] {
            assert!((s.ln().exp() - s).abs() / s < 1e-6);
        }
    }
}
