//! PSNR and SSIM with optional region masking, the evaluation protocol used
//! for whole-image vs inpainted-region reporting.

use crate::error::{KnitworkError, Result};
use crate::imageio::ImageGrid;

/// Which pixels a metric was computed over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Region {
    Whole,
    Masked(String),
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::Whole => write!(f, "whole"),
            Region::Masked(id) => write!(f, "masked:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub region: Region,
    /// True when the image was smaller than the SSIM window and global
    /// statistics were used instead of the sliding window.
    pub ssim_global_fallback: bool,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &ImageGrid, b: &ImageGrid, region: Option<&ImageGrid>) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(KnitworkError::dimension(
            "metrics",
            format!(
                "{}×{}×{} vs {}×{}×{}",
                a.height(), a.width(), a.channels(),
                b.height(), b.width(), b.channels()
            ),
        ));
    }
    if let Some(m) = region {
        if m.height() != a.height() || m.width() != a.width() || m.channels() != 1 || !m.is_binary() {
            return Err(KnitworkError::contract("region mask must be a binary H×W×1 image".to_string()));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over the region (all channels jointly).
/// Identical images return `f64::INFINITY`.
pub fn psnr(a: &ImageGrid, b: &ImageGrid, region: Option<&ImageGrid>) -> Result<f64> {
    check_pair(a, b, region)?;
    let selected = |y: usize, x: usize| region.is_none_or(|m| m.get(y, x, 0) != 0.0);
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !selected(y, x) {
                continue;
            }
            for ch in 0..a.channels() {
                let d = a.get(y, x, ch) - b.get(y, x, ch);
                sum_sq += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(KnitworkError::contract("psnr: empty region".to_string()));
    }
    let mse = sum_sq / count as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

fn to_luma(img: &ImageGrid) -> Vec<f64> {
    match img.channels() {
        1 => img.data().to_vec(),
        _ => img
            .data()
            .chunks_exact(3)
            .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
            .collect(),
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in -r..=r {
        for x in -r..=r {
            w.push((-((y * y + x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean local SSIM with an 11×11 Gaussian window (σ=1.5), K1=0.01, K2=0.03,
/// dynamic range 1. Color inputs are converted to luminance first. The region
/// mask selects window centers; for images smaller than the window the value
/// falls back to global statistics (flagged in the returned bool).
pub fn ssim(a: &ImageGrid, b: &ImageGrid, region: Option<&ImageGrid>) -> Result<(f64, bool)> {
    check_pair(a, b, region)?;
    let (h, w) = (a.height(), a.width());
    let xa = to_luma(a);
    let xb = to_luma(b);
    let selected = |y: usize, x: usize| region.is_none_or(|m| m.get(y, x, 0) != 0.0);

    let r = SSIM_WINDOW / 2;
    if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        let win = gaussian_window();
        let mut total = 0.0;
        let mut count = 0usize;
        for cy in r..h - r {
            for cx in r..w - r {
                if !selected(cy, cx) {
                    continue;
                }
                let (mut mu_x, mut mu_y) = (0.0, 0.0);
                let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
                let mut wi = 0usize;
                for dy in 0..SSIM_WINDOW {
                    let row = (cy + dy - r) * w + cx - r;
                    for dx in 0..SSIM_WINDOW {
                        let (va, vb) = (xa[row + dx], xb[row + dx]);
                        let wv = win[wi];
                        wi += 1;
                        mu_x += wv * va;
                        mu_y += wv * vb;
                        xx += wv * va * va;
                        yy += wv * vb * vb;
                        xy += wv * va * vb;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                total += local_ssim(mu_x, mu_y, var_x, var_y, cov);
                count += 1;
            }
        }
        if count > 0 {
            return Ok((total / count as f64, false));
        }
        // Region had no interior window centers; fall through to global stats.
    }

    // Global-statistics fallback.
    let mut vals = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if selected(y, x) {
                vals.push((xa[y * w + x], xb[y * w + x]));
            }
        }
    }
    if vals.is_empty() {
        return Err(KnitworkError::contract("ssim: empty region".to_string()));
    }
    let n = vals.len() as f64;
    let mu_x = vals.iter().map(|v| v.0).sum::<f64>() / n;
    let mu_y = vals.iter().map(|v| v.1).sum::<f64>() / n;
    let var_x = vals.iter().map(|v| (v.0 - mu_x) * (v.0 - mu_x)).sum::<f64>() / n;
    let var_y = vals.iter().map(|v| (v.1 - mu_y) * (v.1 - mu_y)).sum::<f64>() / n;
    let cov = vals.iter().map(|v| (v.0 - mu_x) * (v.1 - mu_y)).sum::<f64>() / n;
    Ok((local_ssim(mu_x, mu_y, var_x, var_y, cov), true))
}

fn local_ssim(mu_x: f64, mu_y: f64, var_x: f64, var_y: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
}

/// Convenience wrapper producing the full report for one region.
pub fn evaluate(a: &ImageGrid, b: &ImageGrid, region_mask: Option<&ImageGrid>, region: Region) -> Result<MetricReport> {
    let psnr_db = psnr(a, b, region_mask)?;
    let (ssim_v, fallback) = ssim(a, b, region_mask)?;
    Ok(MetricReport { psnr_db, ssim: ssim_v, region, ssim_global_fallback: fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::add_gaussian_noise;
    use crate::synth;

    #[test]
    fn identical_images_saturate_both_metrics() {
        let img = synth::natural_texture(32, 32, 3, 1);
        assert_eq!(psnr(&img, &img, None).unwrap(), f64::INFINITY);
        let (s, fallback) = ssim(&img, &img, None).unwrap();
        assert_eq!(s, 1.0);
        assert!(!fallback);
    }

    #[test]
    fn uniform_difference_of_point_one_is_twenty_db() {
        let a = ImageGrid::constant(16, 16, 3, 0.6);
        let b = ImageGrid::constant(16, 16, 3, 0.5);
        let p = psnr(&a, &b, None).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn psnr_matches_scalar_loop_oracle() {
        let a = synth::natural_texture(20, 20, 3, 2);
        let b = synth::natural_texture(20, 20, 3, 3);
        let got = psnr(&a, &b, None).unwrap();
        let mut acc = 0.0;
        for (va, vb) in a.data().iter().zip(b.data()) {
            acc += (va - vb) * (va - vb);
        }
        let want = 10.0 * (1.0 / (acc / a.data().len() as f64)).log10();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn psnr_empty_region_is_an_error() {
        let img = ImageGrid::constant(8, 8, 1, 0.5);
        let empty = ImageGrid::constant(8, 8, 1, 0.0);
        assert!(psnr(&img, &img, Some(&empty)).is_err());
    }

    #[test]
    fn ssim_negative_image_scores_low() {
        let a = synth::checkerboard(33, 33, 3);
        let b = ImageGrid::new(
            33,
            33,
            1,
            a.data().iter().map(|v| 1.0 - v).collect(),
        )
        .unwrap();
        let (s, _) = ssim(&a, &b, None).unwrap();
        assert!(s < 0.2, "ssim vs negative: {s}");
    }

    #[test]
    fn ssim_constant_shift_is_strictly_between_zero_and_one() {
        let a = ImageGrid::constant(32, 32, 1, 0.4);
        let b = ImageGrid::constant(32, 32, 1, 0.5);
        let (s, fallback) = ssim(&a, &b, None).unwrap();
        assert!(!fallback);
        // Contrast/structure terms are 1 (both flat); only luminance differs.
        let c1 = 1e-4;
        let want = (2.0 * 0.4 * 0.5 + c1) / (0.4 * 0.4 + 0.5 * 0.5 + c1);
        assert!((s - want).abs() < 1e-12);
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn ssim_symmetry() {
        let a = synth::natural_texture(24, 24, 3, 4);
        let b = add_gaussian_noise(&a, 0.1, 1);
        let (sab, _) = ssim(&a, &b, None).unwrap();
        let (sba, _) = ssim(&b, &a, None).unwrap();
        assert!((sab - sba).abs() < 1e-12);
    }

    #[test]
    fn tiny_image_falls_back_to_global_statistics() {
        let a = synth::natural_texture(7, 7, 1, 5);
        let b = add_gaussian_noise(&a, 0.05, 2);
        let (_, fallback) = ssim(&a, &b, None).unwrap();
        assert!(fallback);
    }

    #[test]
    fn psnr_decreases_as_noise_grows() {
        let img = synth::natural_texture(48, 48, 3, 6);
        let mut last = f64::INFINITY;
        for (i, sigma8) in [5.0, 10.0, 20.0, 40.0].into_iter().enumerate() {
            let noisy = add_gaussian_noise(&img, sigma8 / 255.0, 10 + i as u64);
            let p = psnr(&img, &noisy, None).unwrap();
            assert!(p < last, "psnr {p} not below {last} at sigma {sigma8}");
            last = p;
        }
    }

    #[test]
    fn all_ones_region_mask_equals_maskless_bitwise() {
        let a = synth::natural_texture(24, 24, 3, 7);
        let b = add_gaussian_noise(&a, 0.08, 3);
        let ones = ImageGrid::constant(24, 24, 1, 1.0);
        assert_eq!(
            psnr(&a, &b, None).unwrap().to_bits(),
            psnr(&a, &b, Some(&ones)).unwrap().to_bits()
        );
        let (s0, _) = ssim(&a, &b, None).unwrap();
        let (s1, _) = ssim(&a, &b, Some(&ones)).unwrap();
        assert_eq!(s0.to_bits(), s1.to_bits());
    }

    #[test]
    fn region_mask_isolates_the_region() {
        let a = ImageGrid::constant(16, 16, 1, 0.5);
        let mut b = a.clone();
        // Corrupt only outside the region; region metric must be perfect.
        b.set(0, 0, 0, 1.0);
        let mut region = ImageGrid::constant(16, 16, 1, 0.0);
        for y in 4..12 {
            for x in 4..12 {
                region.set(y, x, 0, 1.0);
            }
        }
        assert_eq!(psnr(&a, &b, Some(&region)).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, None).unwrap() < f64::INFINITY);
    }
}
