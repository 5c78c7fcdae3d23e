//! Adaptive density control: accumulate screen-space gradient statistics,
//! clone small high-gradient gaussians, split large ones, prune transparent
//! or oversized ones, and periodically knock opacities down.

use nalgebra::{Matrix3, Vector3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adam::AdamState;
use crate::cloud::GaussianCloud;
use crate::inverse_sigmoid;

#[derive(Debug, Clone)]
pub struct DensifyConfig {
    /// Average screen-space gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Max scale at or below `scale_split_threshold * scene_extent` clones;
    /// above it splits.
    pub scale_split_threshold: f64,
    /// Scale divisor applied to split children.
    pub split_factor: f64,
    /// Gaussians with opacity below this are pruned.
    pub prune_opacity: f64,
    /// Gaussians whose observed screen radius exceeded this many pixels are
    /// pruned.
    pub prune_screen_radius: f64,
    /// Global gaussian budget; densification is skipped when it would be
    /// exceeded.
    pub max_gaussians: usize,
    /// First image count at which densification may run.
    pub start_images: u64,
    /// Image count after which densification stops.
    pub stop_images: u64,
    /// Densification cadence, counted in images so batch size does not
    /// change the effective schedule.
    pub interval_images: u64,
    /// Opacity reset cadence in images (0 disables).
    pub opacity_reset_interval: u64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            scale_split_threshold: 0.01,
            split_factor: 1.6,
            prune_opacity: 0.005,
            prune_screen_radius: 256.0,
            max_gaussians: 200_000,
            start_images: 500,
            stop_images: 15_000,
            interval_images: 100,
            opacity_reset_interval: 3000,
        }
    }
}

/// Per-gaussian statistics gathered between densification events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_norm_sum: Vec<f64>,
    pub observations: Vec<u32>,
    pub max_radius: Vec<f64>,
}

impl DensifyStats {
    pub fn zeros(count: usize) -> Self {
        DensifyStats {
            grad_norm_sum: vec![0.0; count],
            observations: vec![0; count],
            max_radius: vec![0.0; count],
        }
    }

    pub fn len(&self) -> usize {
        self.grad_norm_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_norm_sum.is_empty()
    }

    /// Folds one view's screen-space position gradients into the statistics.
    /// Invisible gaussians are untouched.
    pub fn accumulate(&mut self, grad_mean2d: &[[f64; 2]], radii: &[f64], visible: &[bool]) {
        assert_eq!(self.len(), grad_mean2d.len());
        assert_eq!(self.len(), radii.len());
        assert_eq!(self.len(), visible.len());
        for i in 0..self.len() {
            if !visible[i] {
                continue;
            }
            let [gx, gy] = grad_mean2d[i];
            self.grad_norm_sum[i] += (gx * gx + gy * gy).sqrt();
            self.observations[i] += 1;
            if radii[i] > self.max_radius[i] {
                self.max_radius[i] = radii[i];
            }
        }
    }

    pub fn reset(&mut self, count: usize) {
        *self = DensifyStats::zeros(count);
    }
}

/// Structural edits chosen for one shard. Prune wins over clone/split.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyDecision {
    pub clone: Vec<bool>,
    pub split: Vec<bool>,
    pub prune: Vec<bool>,
}

impl DensifyDecision {
    pub fn planned_additions(&self) -> usize {
        // A clone adds one; a split adds two and removes the parent.
        self.clone.iter().filter(|&&b| b).count() + 2 * self.split.iter().filter(|&&b| b).count()
    }
}

/// Applies the clone/split/prune thresholds to a stats snapshot.
pub fn densify_decisions(
    cloud: &GaussianCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
) -> DensifyDecision {
    let n = cloud.len();
    assert_eq!(stats.len(), n);
    let mut decision = DensifyDecision {
        clone: vec![false; n],
        split: vec![false; n],
        prune: vec![false; n],
    };
    let scale_limit = cfg.scale_split_threshold * scene_extent;
    for i in 0..n {
        if cloud.opacity(i) < cfg.prune_opacity || stats.max_radius[i] > cfg.prune_screen_radius {
            decision.prune[i] = true;
            continue;
        }
        if stats.observations[i] == 0 {
            continue;
        }
        let avg = stats.grad_norm_sum[i] / stats.observations[i] as f64;
        if avg < cfg.grad_threshold {
            continue;
        }
        let s = cloud.scale(i);
        let max_scale = s[0].max(s[1]).max(s[2]);
        if max_scale <= scale_limit {
            decision.clone[i] = true;
        } else {
            decision.split[i] = true;
        }
    }
    decision
}

/// Provenance of the gaussians appended by [`apply_densify`].
#[derive(Debug, Clone, PartialEq)]
pub struct AppendedChild {
    pub parent_index: usize,
    pub child_ordinal: u8,
}

fn sample_within(cloud: &GaussianCloud, i: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let s = cloud.scale(i);
    let q = cloud.rotations[i];
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let rot = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    let n: [f64; 3] = [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ];
    let local = Vector3::new(n[0] * s[0], n[1] * s[1], n[2] * s[2]);
    let offset = rot * local;
    let p = cloud.positions[i];
    [p[0] + offset.x, p[1] + offset.y, p[2] + offset.z]
}

/// Executes a [`DensifyDecision`] on a shard. `rng_for` supplies the sampling
/// stream per parent index, letting the caller key streams by stable global
/// ids. Children are appended in ascending parent order (clone child first,
/// then the two split children); parents of splits and pruned gaussians are
/// removed afterwards. Adam moments for new gaussians start at zero.
pub fn apply_densify(
    cloud: &mut GaussianCloud,
    adam: &mut AdamState,
    stats: &mut DensifyStats,
    decision: &DensifyDecision,
    cfg: &DensifyConfig,
    mut rng_for: impl FnMut(usize) -> ChaCha8Rng,
) -> Vec<AppendedChild> {
    let n = cloud.len();
    assert_eq!(decision.clone.len(), n);
    let mut appended = Vec::new();
    for i in 0..n {
        if decision.prune[i] {
            continue;
        }
        if decision.clone[i] {
            let mut rng = rng_for(i);
            let pos = sample_within(cloud, i, &mut rng);
            cloud.push_copy_of(i);
            let last = cloud.len() - 1;
            cloud.positions[last] = pos;
            adam.push_zero();
            appended.push(AppendedChild {
                parent_index: i,
                child_ordinal: 0,
            });
        } else if decision.split[i] {
            let mut rng = rng_for(i);
            let shrink = cfg.split_factor.ln();
            for ordinal in 0..2u8 {
                let pos = sample_within(cloud, i, &mut rng);
                cloud.push_copy_of(i);
                let last = cloud.len() - 1;
                cloud.positions[last] = pos;
                for a in 0..3 {
                    cloud.log_scales[last][a] -= shrink;
                }
                adam.push_zero();
                appended.push(AppendedChild {
                    parent_index: i,
                    child_ordinal: ordinal,
                });
            }
        }
    }
    // Remove pruned gaussians and split parents; appended children survive.
    let total = cloud.len();
    let mut keep = vec![true; total];
    for i in 0..n {
        if decision.prune[i] || decision.split[i] {
            keep[i] = false;
        }
    }
    cloud.retain_by_index(&keep);
    adam.retain_by_index(&keep);
    stats.reset(cloud.len());
    appended
}

/// Clamps every opacity to at most 0.01 and zeroes the opacity moments.
pub fn opacity_reset(cloud: &mut GaussianCloud, adam: &mut AdamState) {
    let cap = inverse_sigmoid(0.01);
    for logit in &mut cloud.opacity_logits {
        if *logit > cap {
            *logit = cap;
        }
    }
    adam.zero_opacity_moments();
}

/// Radius of the bounding sphere of the camera positions, used to make the
/// split threshold dimensionless.
pub fn scene_extent_from_centers(centers: &[[f64; 3]]) -> f64 {
    if centers.is_empty() {
        return 1.0;
    }
    let mut mean = [0.0f64; 3];
    for c in centers {
        for a in 0..3 {
            mean[a] += c[a];
        }
    }
    for m in &mut mean {
        *m /= centers.len() as f64;
    }
    let mut r: f64 = 0.0;
    for c in centers {
        let d = ((c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2) + (c[2] - mean[2]).powi(2))
            .sqrt();
        r = r.max(d);
    }
    r.max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{init_from_points, InitPoint};
    use rand::SeedableRng;

    fn cloud_of(n: usize) -> GaussianCloud {
        let pts: Vec<InitPoint> = (0..n)
            .map(|i| InitPoint {
                position: [i as f64 * 0.5, 0.0, 4.0],
                rgb: Some([0.5, 0.5, 0.5]),
            })
            .collect();
        init_from_points(&pts).unwrap()
    }

    #[test]
    fn invisible_accumulation_is_noop() {
        let mut stats = DensifyStats::zeros(2);
        stats.accumulate(&[[1.0, 1.0], [2.0, 0.0]], &[3.0, 4.0], &[false, true]);
        assert_eq!(stats.observations[0], 0);
        assert_eq!(stats.grad_norm_sum[0], 0.0);
        assert_eq!(stats.observations[1], 1);
        assert_eq!(stats.grad_norm_sum[1], 2.0);
    }

    #[test]
    fn averaged_norms_match_replay_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 16;
        let mut stats = DensifyStats::zeros(n);
        let mut log: Vec<(Vec<[f64; 2]>, Vec<bool>)> = Vec::new();
        for _ in 0..20 {
            let grads: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5])
                .collect();
            let vis: Vec<bool> = (0..n).map(|_| rng.random::<f64>() > 0.3).collect();
            stats.accumulate(&grads, &vec![1.0; n], &vis);
            log.push((grads, vis));
        }
        for i in 0..n {
            let mut sum = 0.0;
            let mut count = 0u32;
            for (grads, vis) in &log {
                if vis[i] {
                    sum += (grads[i][0].powi(2) + grads[i][1].powi(2)).sqrt();
                    count += 1;
                }
            }
            assert!((stats.grad_norm_sum[i] - sum).abs() < 1e-12);
            assert_eq!(stats.observations[i], count);
        }
    }

    #[test]
    fn zero_gradients_only_prune() {
        let mut cloud = cloud_of(4);
        cloud.opacity_logits[2] = inverse_sigmoid(0.001); // below prune floor
        let stats = DensifyStats::zeros(4);
        let cfg = DensifyConfig::default();
        let d = densify_decisions(&cloud, &stats, &cfg, 1.0);
        assert_eq!(d.clone, vec![false; 4]);
        assert_eq!(d.split, vec![false; 4]);
        assert_eq!(d.prune, vec![false, false, true, false]);
    }

    #[test]
    fn small_high_gradient_gaussian_clones() {
        let mut cloud = cloud_of(3);
        // Make gaussian 1 small relative to the extent.
        cloud.log_scales[1] = [(1e-3f64).ln(); 3];
        let mut stats = DensifyStats::zeros(3);
        stats.grad_norm_sum[1] = 10.0 * 2e-4;
        stats.observations[1] = 10;
        let cfg = DensifyConfig::default();
        let d = densify_decisions(&cloud, &stats, &cfg, 1.0);
        assert!(d.clone[1] && !d.split[1]);

        let before = cloud.clone();
        let mut adam = AdamState::zeros(3);
        let appended = apply_densify(
            &mut cloud,
            &mut adam,
            &mut stats,
            &d,
            &cfg,
            |i| ChaCha8Rng::seed_from_u64(i as u64),
        );
        assert_eq!(cloud.len(), 4);
        assert_eq!(adam.len(), 4);
        assert_eq!(appended.len(), 1);
        assert_eq!(appended[0].parent_index, 1);
        // Parent parameters preserved.
        assert_eq!(cloud.positions[1], before.positions[1]);
        assert_eq!(cloud.sh_coeffs[1], before.sh_coeffs[1]);
    }

    #[test]
    fn large_gaussian_splits_and_parent_removed() {
        let mut cloud = cloud_of(2);
        cloud.log_scales[0] = [(0.5f64).ln(); 3]; // large vs extent 1.0
        let mut stats = DensifyStats::zeros(2);
        stats.grad_norm_sum[0] = 1.0;
        stats.observations[0] = 1;
        let cfg = DensifyConfig::default();
        let d = densify_decisions(&cloud, &stats, &cfg, 1.0);
        assert!(d.split[0]);
        let mut adam = AdamState::zeros(2);
        let appended = apply_densify(
            &mut cloud,
            &mut adam,
            &mut stats,
            &d,
            &cfg,
            |i| ChaCha8Rng::seed_from_u64(i as u64),
        );
        // 2 - 1 parent + 2 children.
        assert_eq!(cloud.len(), 3);
        assert_eq!(appended.len(), 2);
        let expect_scale = (0.5f64).ln() - 1.6f64.ln();
        assert!((cloud.log_scales[1][0] - expect_scale).abs() < 1e-12);
        assert!((cloud.log_scales[2][0] - expect_scale).abs() < 1e-12);
    }

    #[test]
    fn lowering_threshold_weakly_increases_densified() {
        use rand::Rng;
        let cloud = cloud_of(32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut stats = DensifyStats::zeros(32);
        for i in 0..32 {
            stats.grad_norm_sum[i] = rng.random::<f64>() * 1e-3;
            stats.observations[i] = 1;
        }
        let mut prev = 0;
        for thresh in [8e-4, 4e-4, 2e-4, 1e-4, 5e-5] {
            let cfg = DensifyConfig {
                grad_threshold: thresh,
                ..DensifyConfig::default()
            };
            let d = densify_decisions(&cloud, &stats, &cfg, 1.0);
            let densified = d
                .clone
                .iter()
                .zip(&d.split)
                .filter(|(c, s)| **c || **s)
                .count();
            assert!(densified >= prev);
            prev = densified;
        }
    }

    /// Children sampled from the parent distribution keep the parent mean in
    /// expectation (within 3 sigma of the sample-mean estimator).
    #[test]
    fn split_children_centered_on_parent() {
        let mut cloud = cloud_of(1);
        let sigma = 0.2f64;
        cloud.log_scales[0] = [sigma.ln(); 3];
        let n = 1000;
        let mut mean = [0.0f64; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..n {
            let p = sample_within(&cloud, 0, &mut rng);
            for a in 0..3 {
                mean[a] += p[a];
            }
        }
        let parent = cloud.positions[0];
        for a in 0..3 {
            mean[a] /= n as f64;
            let tol = 3.0 * sigma / (n as f64).sqrt();
            assert!(
                (mean[a] - parent[a]).abs() < tol,
                "axis {a}: |{} - {}| >= {tol}",
                mean[a],
                parent[a]
            );
        }
    }

    #[test]
    fn opacity_reset_clamps_down_only() {
        let mut cloud = cloud_of(2);
        cloud.opacity_logits[0] = inverse_sigmoid(0.9);
        cloud.opacity_logits[1] = inverse_sigmoid(0.005);
        let mut adam = AdamState::zeros(2);
        adam.exp_avg.opacity_logits[0] = 3.0;
        opacity_reset(&mut cloud, &mut adam);
        assert!((cloud.opacity(0) - 0.01).abs() < 1e-12);
        assert!((cloud.opacity(1) - 0.005).abs() < 1e-12);
        assert_eq!(adam.exp_avg.opacity_logits[0], 0.0);
    }

    #[test]
    fn extent_is_bounding_sphere_radius() {
        let centers = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [2.0, 2.0, 0.0]];
        let r = scene_extent_from_centers(&centers);
        assert!((r - 2.0f64.sqrt()).abs() < 1e-12);
    }
}
