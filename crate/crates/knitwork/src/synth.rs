//! Procedural demo signals.
//!
//! The examples, smoke tests and acceptance runs need small natural-looking
//! images without shipping binary assets; these generators produce
//! deterministic band-limited textures and gradients from a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageio::ImageGrid;

/// Multi-octave value noise: random lattices, bilinearly interpolated and
/// summed with decaying amplitude. Self-similar across scales, which is the
/// regime internal learning methods are built for.
pub fn natural_texture(height: usize, width: usize, channels: usize, seed: u64) -> ImageGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f64; height * width * channels];
    let octaves: &[(usize, f64)] = &[(4, 0.5), (8, 0.30), (16, 0.16), (32, 0.10)];
    for ch in 0..channels {
        for &(cells, amp) in octaves {
            let lat_h = cells + 1;
            let lat_w = cells + 1;
            let lattice: Vec<f64> = (0..lat_h * lat_w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for y in 0..height {
                let fy = y as f64 / height as f64 * cells as f64;
                let (y0, ty) = (fy.floor() as usize, fy.fract());
                for x in 0..width {
                    let fx = x as f64 / width as f64 * cells as f64;
                    let (x0, tx) = (fx.floor() as usize, fx.fract());
                    let v00 = lattice[y0 * lat_w + x0];
                    let v01 = lattice[y0 * lat_w + x0 + 1];
                    let v10 = lattice[(y0 + 1) * lat_w + x0];
                    let v11 = lattice[(y0 + 1) * lat_w + x0 + 1];
                    let v = v00 * (1.0 - ty) * (1.0 - tx)
                        + v01 * (1.0 - ty) * tx
                        + v10 * ty * (1.0 - tx)
                        + v11 * ty * tx;
                    data[(y * width + x) * channels + ch] += amp * v;
                }
            }
        }
    }
    // Re-center around mid-gray.
    for v in &mut data {
        *v = 0.5 + 0.45 * *v;
    }
    ImageGrid::from_unclamped(height, width, channels, data).unwrap()
}

/// Smooth low-frequency image: a diagonal ramp modulated by one soft sinusoid.
pub fn smooth_gradient(height: usize, width: usize, channels: usize) -> ImageGrid {
    let mut data = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        for x in 0..width {
            let u = y as f64 / (height - 1).max(1) as f64;
            let v = x as f64 / (width - 1).max(1) as f64;
            for ch in 0..channels {
                let phase = ch as f64 * 0.7;
                data.push(0.25 + 0.5 * (0.5 * (u + v)) + 0.15 * ((3.0 * v + phase).sin() * 0.5));
            }
        }
    }
    ImageGrid::from_unclamped(height, width, channels, data).unwrap()
}

pub fn checkerboard(height: usize, width: usize, square: usize) -> ImageGrid {
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            data.push(if (y / square + x / square) % 2 == 0 { 0.0 } else { 1.0 });
        }
    }
    ImageGrid::new(height, width, 1, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_is_deterministic_and_in_range() {
        let a = natural_texture(32, 32, 3, 5);
        let b = natural_texture(32, 32, 3, 5);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(a.data(), natural_texture(32, 32, 3, 6).data());
    }

    #[test]
    fn texture_has_spatial_variation() {
        let img = natural_texture(32, 32, 1, 1);
        let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
        let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.data().len() as f64;
        assert!(var > 1e-3, "texture too flat: var {var}");
    }
}
