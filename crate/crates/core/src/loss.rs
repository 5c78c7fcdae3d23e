//! L1 + SSIM training loss with analytic gradients, and PSNR for evaluation.
//!
//! SSIM uses the standard 11x11 Gaussian window (sigma 1.5, C1 = 0.01^2,
//! C2 = 0.03^2) with zero padding at image borders. A window reaches at most
//! 5 pixels from its center, which is the halo the distributed engine
//! exchanges between neighboring pixel partitions.

use crate::error::CoreError;
use crate::image::ImageF;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_RADIUS: usize = 5;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight of the SSIM term: combined = (1-w) * l1 + w * (1 - ssim).
    pub ssim_weight: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ssim_weight: 0.2,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

/// Scalar losses plus the per-pixel gradient of the combined loss.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l1: f64,
    pub ssim: f64,
    pub combined: f64,
    pub grad: ImageF,
}

fn check_dims(a: &ImageF, b: &ImageF) -> Result<(), CoreError> {
    if !a.same_dims(b) {
        return Err(CoreError::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// L1 over masked pixels with an explicit normalizer (`denom` counts pixels;
/// channels are folded in internally). The gradient image holds
/// `sign(diff) / (denom * 3)` on masked pixels. Distributed partitions pass
/// the whole image's pixel count so partial results sum to the global loss.
pub fn l1_loss_scaled(
    rendered: &ImageF,
    target: &ImageF,
    mask: Option<&[bool]>,
    denom: f64,
) -> Result<(f64, ImageF), CoreError> {
    check_dims(rendered, target)?;
    if let Some(m) = mask {
        assert_eq!(m.len(), rendered.pixel_count());
    }
    let norm = denom * 3.0;
    let mut sum = 0.0;
    let mut grad = ImageF::zeros(rendered.width, rendered.height);
    for i in 0..rendered.data.len() {
        if mask.map(|m| m[i]) == Some(false) {
            continue;
        }
        for c in 0..3 {
            let d = rendered.data[i][c] - target.data[i][c];
            sum += d.abs();
            // f64::signum maps 0.0 to 1.0; the L1 subgradient at zero is 0.
            grad.data[i][c] = if d > 0.0 {
                1.0 / norm
            } else if d < 0.0 {
                -1.0 / norm
            } else {
                0.0
            };
        }
    }
    Ok((sum / norm, grad))
}

/// Mean absolute difference over masked pixels and channels.
pub fn l1_loss(
    rendered: &ImageF,
    target: &ImageF,
    mask: Option<&[bool]>,
) -> Result<(f64, ImageF), CoreError> {
    let denom = match mask {
        Some(m) => m.iter().filter(|&&b| b).count() as f64,
        None => rendered.pixel_count() as f64,
    };
    l1_loss_scaled(rendered, target, mask, denom.max(1.0))
}

/// Normalized separable Gaussian window (sigma 1.5).
fn window_1d() -> [f64; SSIM_WINDOW] {
    let sigma = 1.5f64;
    let mut w = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// SSIM over masked window centers, normalized by an explicit center count.
/// Returns the mean SSIM and the gradient of that mean with respect to the
/// rendered image. Gradient mass lands on every pixel inside a contributing
/// window, including pixels outside the mask (the distributed engine routes
/// those to their owners). Centers read at most [`SSIM_RADIUS`] pixels away.
pub fn ssim_scaled(
    rendered: &ImageF,
    target: &ImageF,
    mask: Option<&[bool]>,
    denom: f64,
    cfg: &LossConfig,
) -> Result<(f64, ImageF), CoreError> {
    check_dims(rendered, target)?;
    if let Some(m) = mask {
        assert_eq!(m.len(), rendered.pixel_count());
    }
    let w1 = window_1d();
    let width = rendered.width as i64;
    let height = rendered.height as i64;
    let norm = denom * 3.0;
    let mut sum = 0.0;
    let mut grad = ImageF::zeros(rendered.width, rendered.height);
    let r = SSIM_RADIUS as i64;

    for cy in 0..height {
        for cx in 0..width {
            let ci = (cy * width + cx) as usize;
            if mask.map(|m| m[ci]) == Some(false) {
                continue;
            }
            for ch in 0..3 {
                // Window statistics with zero padding outside the image.
                let (mut mu_x, mut mu_y) = (0.0, 0.0);
                let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
                for dy in -r..=r {
                    let yy_i = cy + dy;
                    if yy_i < 0 || yy_i >= height {
                        continue;
                    }
                    let wy = w1[(dy + r) as usize];
                    for dx in -r..=r {
                        let xx_i = cx + dx;
                        if xx_i < 0 || xx_i >= width {
                            continue;
                        }
                        let w = wy * w1[(dx + r) as usize];
                        let pi = (yy_i * width + xx_i) as usize;
                        let xv = rendered.data[pi][ch];
                        let yv = target.data[pi][ch];
                        mu_x += w * xv;
                        mu_y += w * yv;
                        xx += w * xv * xv;
                        yy += w * yv * yv;
                        xy += w * xv * yv;
                    }
                }
                let sx = xx - mu_x * mu_x;
                let sy = yy - mu_y * mu_y;
                let sxy = xy - mu_x * mu_y;
                let n1 = 2.0 * mu_x * mu_y + cfg.c1;
                let n2 = 2.0 * sxy + cfg.c2;
                let d1 = mu_x * mu_x + mu_y * mu_y + cfg.c1;
                let d2 = sx + sy + cfg.c2;
                let s = (n1 * n2) / (d1 * d2);
                sum += s;

                // Partials with respect to the window statistics.
                let ds_dmu = 2.0 * mu_y * n2 / (d1 * d2) - 2.0 * mu_x * s / d1;
                let ds_dsx = -s / d2;
                let ds_dsxy = 2.0 * n1 / (d1 * d2);
                for dy in -r..=r {
                    let yy_i = cy + dy;
                    if yy_i < 0 || yy_i >= height {
                        continue;
                    }
                    let wy = w1[(dy + r) as usize];
                    for dx in -r..=r {
                        let xx_i = cx + dx;
                        if xx_i < 0 || xx_i >= width {
                            continue;
                        }
                        let w = wy * w1[(dx + r) as usize];
                        let pi = (yy_i * width + xx_i) as usize;
                        let xv = rendered.data[pi][ch];
                        let yv = target.data[pi][ch];
                        grad.data[pi][ch] += w
                            * (ds_dmu
                                + 2.0 * (xv - mu_x) * ds_dsx
                                + (yv - mu_y) * ds_dsxy)
                            / norm;
                    }
                }
            }
        }
    }
    Ok((sum / norm, grad))
}

/// Mean SSIM over masked centers (each pixel is a window center).
pub fn ssim(
    rendered: &ImageF,
    target: &ImageF,
    mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<(f64, ImageF), CoreError> {
    let denom = match mask {
        Some(m) => m.iter().filter(|&&b| b).count() as f64,
        None => rendered.pixel_count() as f64,
    };
    ssim_scaled(rendered, target, mask, denom.max(1.0), cfg)
}

/// Combined training loss over one image: `(1-w) l1 + w (1 - ssim)`. Images
/// smaller than the SSIM window fall back to pure L1 with a warning.
pub fn combined_loss(
    rendered: &ImageF,
    target: &ImageF,
    mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<LossReport, CoreError> {
    let (l1, l1_grad) = l1_loss(rendered, target, mask)?;
    let ssim_on = rendered.width as usize >= SSIM_WINDOW
        && rendered.height as usize >= SSIM_WINDOW
        && cfg.ssim_weight > 0.0;
    if !ssim_on {
        if cfg.ssim_weight > 0.0 {
            log::warn!(
                "image {}x{} smaller than the {}x{} SSIM window; falling back to L1",
                rendered.width,
                rendered.height,
                SSIM_WINDOW,
                SSIM_WINDOW
            );
        }
        return Ok(LossReport {
            l1,
            ssim: 1.0,
            combined: l1,
            grad: l1_grad,
        });
    }
    let (ssim_v, ssim_grad) = ssim(rendered, target, mask, cfg)?;
    let w = cfg.ssim_weight;
    let mut grad = l1_grad;
    for (g, sg) in grad.data.iter_mut().zip(&ssim_grad.data) {
        for c in 0..3 {
            g[c] = (1.0 - w) * g[c] - w * sg[c];
        }
    }
    Ok(LossReport {
        l1,
        ssim: ssim_v,
        combined: (1.0 - w) * l1 + w * (1.0 - ssim_v),
        grad,
    })
}

/// Peak signal-to-noise ratio in dB; identical images report +infinity.
pub fn psnr(rendered: &ImageF, target: &ImageF) -> f64 {
    let mse = rendered.mse(target);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(w: u32, h: u32, seed: u64) -> (ImageF, ImageF) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = ImageF::zeros(w, h);
        let mut b = ImageF::zeros(w, h);
        for i in 0..a.data.len() {
            for c in 0..3 {
                a.data[i][c] = rng.random::<f64>();
                b.data[i][c] = rng.random::<f64>();
            }
        }
        (a, b)
    }

    #[test]
    fn l1_identical_and_offset() {
        let (a, _) = random_pair(16, 16, 1);
        let (v, g) = l1_loss(&a, &a, None).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|p| *p == [0.0; 3]));

        let mut b = a.clone();
        for p in &mut b.data {
            for c in 0..3 {
                p[c] += 0.5;
            }
        }
        let (v, _) = l1_loss(&b, &a, None).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn l1_matches_direct_summation_oracle() {
        let (a, b) = random_pair(24, 16, 2);
        let (v, _) = l1_loss(&a, &b, None).unwrap();
        let mut oracle = 0.0;
        for i in 0..a.data.len() {
            for c in 0..3 {
                oracle += (a.data[i][c] - b.data[i][c]).abs();
            }
        }
        oracle /= (a.data.len() * 3) as f64;
        assert!((v - oracle).abs() < 1e-12);
    }

    #[test]
    fn l1_partition_additivity() {
        let (a, b) = random_pair(32, 32, 3);
        let n = a.pixel_count();
        let (whole, whole_grad) = l1_loss(&a, &b, None).unwrap();
        // Three uneven partitions, scaled by the global pixel count.
        let bounds = [(0usize, 300usize), (300, 700), (700, n)];
        let mut total = 0.0;
        let mut merged = ImageF::zeros(32, 32);
        for (lo, hi) in bounds {
            let mask: Vec<bool> = (0..n).map(|i| i >= lo && i < hi).collect();
            let (part, pgrad) = l1_loss_scaled(&a, &b, Some(&mask), n as f64).unwrap();
            total += part;
            for i in 0..n {
                for c in 0..3 {
                    merged.data[i][c] += pgrad.data[i][c];
                }
            }
        }
        assert!((total - whole).abs() < 1e-12);
        assert_eq!(merged.data, whole_grad.data);
    }

    #[test]
    fn ssim_identical_is_one_with_zero_grad() {
        let (a, _) = random_pair(16, 16, 4);
        let (v, g) = ssim(&a, &a, None, &LossConfig::default()).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        for p in &g.data {
            for c in 0..3 {
                assert!(p[c].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverted_checkerboard_ssim_negative() {
        let mut t = ImageF::zeros(16, 16);
        for y in 0..16u32 {
            for x in 0..16u32 {
                let v = ((x + y) % 2) as f64;
                t.set(x, y, [v; 3]);
            }
        }
        let mut r = t.clone();
        for p in &mut r.data {
            for c in 0..3 {
                p[c] = 1.0 - p[c];
            }
        }
        let (v, _) = ssim(&r, &t, None, &LossConfig::default()).unwrap();
        assert!(v < 0.0, "ssim of inverted checkerboard = {v}");
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let (mut a, b) = random_pair(20, 20, 5);
        let cfg = LossConfig::default();
        let (_, grad) = ssim(&a, &b, None, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        for _ in 0..50 {
            let i = rng.random_range(0..a.data.len());
            let c = rng.random_range(0..3);
            let orig = a.data[i][c];
            a.data[i][c] = orig + h;
            let (vp, _) = ssim(&a, &b, None, &cfg).unwrap();
            a.data[i][c] = orig - h;
            let (vm, _) = ssim(&a, &b, None, &cfg).unwrap();
            a.data[i][c] = orig;
            let fd = (vp - vm) / (2.0 * h);
            let an = grad.data[i][c];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-9);
            assert!(rel < 1e-5, "pixel {i} ch {c}: analytic {an} fd {fd}");
        }
    }

    /// A masked center only reads pixels within the 5-pixel halo: poisoning
    /// everything outside the halo must not change the result.
    #[test]
    fn ssim_halo_contract() {
        let (a, b) = random_pair(48, 32, 6);
        let cfg = LossConfig::default();
        let n = a.pixel_count();
        // Own a band of pixel rows [8, 16).
        let mask: Vec<bool> = (0..n).map(|i| (8..16).contains(&(i / 48))).collect();
        let denom = n as f64;
        let (whole, _) = ssim_scaled(&a, &b, Some(&mask), denom, &cfg).unwrap();

        let poison = |img: &ImageF| {
            let mut out = img.clone();
            for y in 0..32usize {
                if (3..21).contains(&y) {
                    continue; // rows within halo reach of the owned band
                }
                for x in 0..48usize {
                    out.data[y * 48 + x] = [f64::NAN; 3];
                }
            }
            out
        };
        let (haloed, _) = ssim_scaled(&poison(&a), &poison(&b), Some(&mask), denom, &cfg).unwrap();
        assert!(haloed.is_finite());
        assert_eq!(whole, haloed);
    }

    #[test]
    fn small_image_falls_back_to_l1() {
        let (a, b) = random_pair(8, 8, 7);
        let report = combined_loss(&a, &b, None, &LossConfig::default()).unwrap();
        let (l1, _) = l1_loss(&a, &b, None).unwrap();
        assert_eq!(report.combined, l1);
    }

    #[test]
    fn psnr_values() {
        let (a, _) = random_pair(8, 8, 8);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        let mut b = a.clone();
        for p in &mut b.data {
            for c in 0..3 {
                p[c] += 0.1;
            }
        }
        // MSE 0.01 -> 20 dB.
        assert!((psnr(&b, &a) - 20.0).abs() < 1e-9);
        let mut one = a.clone();
        for (p, q) in one.data.iter_mut().zip(&a.data) {
            for c in 0..3 {
                p[c] = q[c] + 1.0;
            }
        }
        assert!((psnr(&one, &a) - 0.0).abs() < 1e-9);
    }
}
