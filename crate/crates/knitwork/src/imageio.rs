//! Image loading, saving, normalization and synthetic degradations.
//!
//! All pixel data lives in `[0, 1]` as f64; files are 8-bit PNG. Degradations
//! (downsampling through a kernel, additive Gaussian noise, rectangular
//! cutouts) are deterministic given their seed so evaluation runs can be
//! reproduced bit for bit.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KnitworkError, Result};
use crate::tensor::Tensor;

/// H×W×C image in normalized color space, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(KnitworkError::contract(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(KnitworkError::dimension(
                "ImageGrid::new",
                format!("{height}×{width}×{channels} needs {} values, got {}", height * width * channels, data.len()),
            ));
        }
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)), "image values out of [0,1]");
        Ok(ImageGrid { height, width, channels, data })
    }

    /// Builds from arbitrary values, clamping into `[0, 1]`.
    pub fn from_unclamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        ImageGrid::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageGrid::new(height, width, channels, vec![value.clamp(0.0, 1.0); height * width * channels]).unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + ch] = v.clamp(0.0, 1.0);
    }

    /// Pixel as a small per-channel slice.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// `[h, w, c]` tensor view of the image (copies).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.height, self.width, self.channels], self.data.clone()).unwrap()
    }

    /// Rebuilds an image from a `[h, w, c]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 {
            return Err(KnitworkError::dimension("from_tensor", format!("expected [h,w,c], got {shape:?}")));
        }
        ImageGrid::from_unclamped(shape[0], shape[1], shape[2], t.data())
    }

    /// True where every value is exactly 0 or 1 (a valid mask image).
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

// ── PNG I/O ──────────────────────────────────────────────────────────────────

pub fn load_png(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|source| KnitworkError::Image { path: path.to_path_buf(), source })?;
    use image::DynamicImage::*;
    let (h, w) = (img.height() as usize, img.width() as usize);
    match img {
        ImageLuma8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageGrid::new(h, w, 1, data)
        }
        ImageRgb8(buf) => {
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageGrid::new(h, w, 3, data)
        }
        ImageRgba8(buf) => {
            eprintln!("warning: {} has an alpha channel; alpha is dropped", path.display());
            let raw = buf.into_raw();
            let data = raw.chunks_exact(4).flat_map(|px| px[..3].iter().map(|&v| v as f64 / 255.0)).collect();
            ImageGrid::new(h, w, 3, data)
        }
        ImageLuma16(buf) => {
            eprintln!("warning: {} is 16-bit; rescaling to 8-bit range", path.display());
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            ImageGrid::new(h, w, 1, data)
        }
        ImageRgb16(buf) => {
            eprintln!("warning: {} is 16-bit; rescaling to 8-bit range", path.display());
            let data = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            ImageGrid::new(h, w, 3, data)
        }
        other => {
            let rgb = other.into_rgb8();
            eprintln!("warning: {} converted to 8-bit RGB", path.display());
            let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            ImageGrid::new(h, w, 3, data)
        }
    }
}

/// 8-bit quantization with round-half-to-even.
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn save_png(img: &ImageGrid, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let io_err = |source| KnitworkError::Image { path: path.to_path_buf(), source };
    match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(io_err),
        3 => image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(io_err),
        _ => unreachable!("ImageGrid enforces channels"),
    }
}

// ── Downsampling kernels ─────────────────────────────────────────────────────

/// A normalized 2-D convolution kernel used to synthesize low-resolution
/// images and as the fixed operator for known-kernel super-resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2d {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Kernel2d {
    pub fn from_values(size: usize, data: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || data.len() != size * size {
            return Err(KnitworkError::dimension(
                "Kernel2d",
                format!("size {size} (odd required), {} values", data.len()),
            ));
        }
        Ok(Kernel2d { size, data })
    }

    pub fn delta() -> Self {
        Kernel2d { size: 1, data: vec![1.0] }
    }

    /// Isotropic Gaussian with σ = factor / 2.
    pub fn round_gaussian(factor: usize) -> Self {
        let sigma = factor as f64 / 2.0;
        Kernel2d::anisotropic_gaussian(sigma, sigma, 0.0)
    }

    /// Anisotropic Gaussian, major axis at 45°, σ_major = factor,
    /// σ_minor = factor / 4.
    pub fn diagonal_gaussian(factor: usize) -> Self {
        Kernel2d::anisotropic_gaussian(factor as f64, factor as f64 / 4.0, std::f64::consts::FRAC_PI_4)
    }

    pub fn anisotropic_gaussian(sigma_major: f64, sigma_minor: f64, angle: f64) -> Self {
        let radius = (3.0 * sigma_major).ceil().max(1.0) as i64;
        let size = (2 * radius + 1) as usize;
        let (c, s) = (angle.cos(), angle.sin());
        let mut data = Vec::with_capacity(size * size);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                // Rotate into the kernel's principal frame.
                let u = c * dx as f64 + s * dy as f64;
                let v = -s * dx as f64 + c * dy as f64;
                data.push((-0.5 * ((u / sigma_major).powi(2) + (v / sigma_minor).powi(2))).exp());
            }
        }
        let total: f64 = data.iter().sum();
        data.iter_mut().for_each(|x| *x /= total);
        Kernel2d { size, data }
    }

    /// The kernel as a constant `[size, size]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.size, self.size], self.data.clone()).unwrap()
    }
}

// ── Degradations ─────────────────────────────────────────────────────────────

/// Convolve with `kernel` (symmetric padding) and keep every `factor`-th
/// pixel starting at (0, 0).
pub fn downsample(img: &ImageGrid, kernel: &Kernel2d, factor: usize) -> Result<ImageGrid> {
    if factor == 0 || img.height % factor != 0 || img.width % factor != 0 {
        return Err(KnitworkError::contract(format!(
            "downsample: {}×{} not divisible by {factor}",
            img.height, img.width
        )));
    }
    if kernel.size > img.height.min(img.width) {
        return Err(KnitworkError::contract(format!(
            "downsample: kernel size {} exceeds image {}×{}",
            kernel.size, img.height, img.width
        )));
    }
    let blurred = crate::tensor::no_grad(|| {
        img.to_tensor()
            .conv2d_depthwise(&kernel.to_tensor())
            .and_then(|t| t.subsample2d(factor))
    })?;
    ImageGrid::from_tensor(&blurred)
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` (normalized
/// units) and clamps into `[0, 1]`.
pub fn add_gaussian_noise(img: &ImageGrid, sigma: f64, seed: u64) -> ImageGrid {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).expect("sigma >= 0");
    let data = img.data.iter().map(|&v| (v + dist.sample(&mut rng)).clamp(0.0, 1.0)).collect();
    ImageGrid::new(img.height, img.width, img.channels, data).unwrap()
}

/// Rectangular hole: `(row, col, height, width)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HoleRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl HoleRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.row && y < self.row + self.height && x >= self.col && x < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Zeroes the hole region and returns the cut image plus the known-pixel
/// mask (1 = known, 0 = hole).
pub fn cut_hole(img: &ImageGrid, hole: HoleRect) -> Result<(ImageGrid, ImageGrid)> {
    if hole.row + hole.height > img.height || hole.col + hole.width > img.width {
        return Err(KnitworkError::contract(format!(
            "hole {hole:?} exceeds image {}×{}",
            img.height, img.width
        )));
    }
    let mut cut = img.clone();
    let mut mask = ImageGrid::constant(img.height, img.width, 1, 1.0);
    for y in hole.row..hole.row + hole.height {
        for x in hole.col..hole.col + hole.width {
            for ch in 0..img.channels {
                cut.set(y, x, ch, 0.0);
            }
            mask.set(y, x, 0, 0.0);
        }
    }
    Ok((cut, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn one_by_one_white_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        save_png(&ImageGrid::constant(1, 1, 1, 1.0), &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.data(), &[1.0]);
    }

    #[test]
    fn random_8bit_image_roundtrips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..17 * 13 * 3).map(|_| (rng.next_u32() % 256) as f64 / 255.0).collect();
        let img = ImageGrid::new(17, 13, 3, vals).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn truncated_png_is_a_clean_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        match load_png(&path) {
            Err(KnitworkError::Image { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected image error, got {other:?}"),
        }
    }

    #[test]
    fn delta_kernel_downsample_is_plain_subsampling() {
        let vals: Vec<f64> = (0..8 * 8).map(|i| (i % 11) as f64 / 10.0).collect();
        let img = ImageGrid::new(8, 8, 1, vals).unwrap();
        let down = downsample(&img, &Kernel2d::delta(), 2).unwrap();
        assert_eq!(down.height(), 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(down.get(y, x, 0), img.get(2 * y, 2 * x, 0));
            }
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let img = ImageGrid::constant(4, 4, 3, 0.25);
        assert_eq!(add_gaussian_noise(&img, 0.0, 1).data(), img.data());
    }

    #[test]
    fn noise_is_reproducible_per_seed() {
        let img = ImageGrid::constant(16, 16, 1, 0.5);
        let a = add_gaussian_noise(&img, 0.1, 42);
        let b = add_gaussian_noise(&img, 0.1, 42);
        let c = add_gaussian_noise(&img, 0.1, 43);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn noise_std_matches_requested_sigma() {
        let img = ImageGrid::constant(256, 256, 1, 0.5);
        let sigma = 40.0 / 255.0;
        let noisy = add_gaussian_noise(&img, sigma, 9);
        let diffs: Vec<f64> = noisy.data().iter().zip(img.data()).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.05, "std {std} vs sigma {sigma}");
    }

    #[test]
    fn cut_hole_mask_zeroes_match_hole_area() {
        let img = ImageGrid::constant(10, 12, 3, 0.7);
        let hole = HoleRect { row: 2, col: 3, height: 4, width: 5 };
        let (cut, mask) = cut_hole(&img, hole).unwrap();
        let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, hole.area());
        assert_eq!(cut.get(3, 4, 1), 0.0);
        assert_eq!(cut.get(0, 0, 1), 0.7);
        assert!(mask.is_binary());
    }

    #[test]
    fn oversized_hole_is_rejected() {
        let img = ImageGrid::constant(8, 8, 1, 0.5);
        assert!(cut_hole(&img, HoleRect { row: 4, col: 0, height: 8, width: 2 }).is_err());
    }

    #[test]
    fn diagonal_kernel_smears_anisotropically() {
        // A diamond has edges whose normals lie exactly on the two diagonals.
        // The 45° kernel smooths edges with (1,1) normals while leaving
        // (1,-1) edges sharp, so the anti/diagonal gradient-energy ratio
        // rises well above the round kernel's symmetric 1.
        let mut img = ImageGrid::constant(96, 96, 1, 0.0);
        for y in 0..96 {
            for x in 0..96 {
                if (y as f64 - 47.5).abs() + (x as f64 - 47.5).abs() <= 34.0 {
                    img.set(y, x, 0, 1.0);
                }
            }
        }
        let aniso = |img: &ImageGrid| {
            let (mut diag, mut anti) = (0.0, 0.0);
            for y in 0..img.height() - 1 {
                for x in 0..img.width() - 1 {
                    diag += (img.get(y + 1, x + 1, 0) - img.get(y, x, 0)).powi(2);
                    anti += (img.get(y + 1, x, 0) - img.get(y, x + 1, 0)).powi(2);
                }
            }
            anti / diag.max(1e-12)
        };
        let round = downsample(&img, &Kernel2d::round_gaussian(4), 4).unwrap();
        let diag = downsample(&img, &Kernel2d::diagonal_gaussian(4), 4).unwrap();
        assert!(aniso(&diag) > 1.5 * aniso(&round), "diag {} vs round {}", aniso(&diag), aniso(&round));
    }
}
