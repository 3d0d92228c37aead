//! Random Fourier feature positional encoding for 2-D pixel coordinates.
//!
//! A fixed random projection `B` (m×2, entries from N(0, σ_pe²)) maps each
//! normalized coordinate v to the feature row `[cos(2πBv), sin(2πBv)]`, which
//! is what lets a small ReLU MLP represent high-frequency image content.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KnitworkError, Result};
use crate::tensor::Tensor;

/// Sampled pixel-center coordinates on an active H×W grid.
///
/// `normalized` holds pixel centers `((row+0.5)/H, (col+0.5)/W)`; a batch
/// never contains duplicate pixel indices.
#[derive(Debug, Clone)]
pub struct CoordinateBatch {
    pub pixel_indices: Vec<(usize, usize)>,
    pub normalized: Vec<(f64, f64)>,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl CoordinateBatch {
    /// Batch from explicit pixel indices on an H×W grid.
    pub fn from_indices(grid_height: usize, grid_width: usize, indices: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(indices.len());
        for &(r, c) in &indices {
            if r >= grid_height || c >= grid_width {
                return Err(KnitworkError::contract(format!(
                    "coordinate ({r}, {c}) outside {grid_height}×{grid_width} grid"
                )));
            }
            if !seen.insert((r, c)) {
                return Err(KnitworkError::contract(format!("duplicate coordinate ({r}, {c}) in batch")));
            }
        }
        let normalized = indices
            .iter()
            .map(|&(r, c)| ((r as f64 + 0.5) / grid_height as f64, (c as f64 + 0.5) / grid_width as f64))
            .collect();
        Ok(CoordinateBatch { pixel_indices: indices, normalized, grid_height, grid_width })
    }

    /// Batch for derived reference coordinates (cross-patch partners), which
    /// may legitimately repeat when invalid partners are substituted with
    /// placeholders. Callers must keep indices within the grid.
    pub(crate) fn from_indices_unchecked(
        grid_height: usize,
        grid_width: usize,
        indices: Vec<(usize, usize)>,
    ) -> Self {
        let normalized = indices
            .iter()
            .map(|&(r, c)| ((r as f64 + 0.5) / grid_height as f64, (c as f64 + 0.5) / grid_width as f64))
            .collect();
        CoordinateBatch { pixel_indices: indices, normalized, grid_height, grid_width }
    }

    /// Every pixel of an H×W grid in row-major order.
    pub fn full_grid(grid_height: usize, grid_width: usize) -> Self {
        let mut indices = Vec::with_capacity(grid_height * grid_width);
        for r in 0..grid_height {
            for c in 0..grid_width {
                indices.push((r, c));
            }
        }
        CoordinateBatch::from_indices(grid_height, grid_width, indices).expect("grid coords are valid")
    }

    pub fn len(&self) -> usize {
        self.pixel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_indices.is_empty()
    }
}

/// Fixed random Fourier projection. Never trained; output dimension is 2m.
#[derive(Debug, Clone)]
pub struct FourierEncoding {
    projection: Vec<f64>, // m × 2, row-major
    pub num_frequencies: usize,
    pub sigma_pe: f64,
    pub seed: u64,
}

impl FourierEncoding {
    pub fn new(num_frequencies: usize, sigma_pe: f64, seed: u64) -> Result<Self> {
        if num_frequencies == 0 {
            return Err(KnitworkError::contract("encoding needs at least one frequency".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma_pe)
            .map_err(|e| KnitworkError::contract(format!("invalid sigma_pe: {e}")))?;
        let projection = (0..num_frequencies * 2).map(|_| normal.sample(&mut rng)).collect();
        Ok(FourierEncoding { projection, num_frequencies, sigma_pe, seed })
    }

    /// Encoding with an explicit projection matrix (tests and degenerate
    /// configurations).
    pub fn with_projection(projection: Vec<f64>) -> Result<Self> {
        if projection.is_empty() || projection.len() % 2 != 0 {
            return Err(KnitworkError::dimension("encoding", format!("projection of {} values", projection.len())));
        }
        let m = projection.len() / 2;
        Ok(FourierEncoding { projection, num_frequencies: m, sigma_pe: 0.0, seed: 0 })
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.num_frequencies
    }

    /// Encodes a batch into an `[N × 2m]` feature tensor:
    /// row i = `[cos(2π·B·vᵢ), sin(2π·B·vᵢ)]`.
    ///
    /// Coordinates may leave `[0,1]` by at most one pixel of the batch's grid
    /// (super-resolution fine grids touch that margin); anything further out
    /// is a contract error.
    pub fn encode(&self, coords: &CoordinateBatch) -> Result<Tensor> {
        if coords.is_empty() {
            return Err(KnitworkError::contract("encode: empty coordinate batch".to_string()));
        }
        let margin = 1.0 / coords.grid_height.min(coords.grid_width).max(1) as f64;
        let m = self.num_frequencies;
        let tau = std::f64::consts::TAU;
        let mut out = vec![0.0; coords.len() * 2 * m];
        for (i, &(u, v)) in coords.normalized.iter().enumerate() {
            if !((-margin..=1.0 + margin).contains(&u) && (-margin..=1.0 + margin).contains(&v)) {
                return Err(KnitworkError::contract(format!(
                    "coordinate ({u}, {v}) outside [0,1] beyond the one-pixel margin {margin}"
                )));
            }
            let row = &mut out[i * 2 * m..(i + 1) * 2 * m];
            for f in 0..m {
                let phase = tau * (self.projection[2 * f] * u + self.projection[2 * f + 1] * v);
                let (s, c) = phase.sin_cos();
                row[f] = c;
                row[m + f] = s;
            }
        }
        Tensor::from_vec(vec![coords.len(), 2 * m], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_projection_gives_cos_one_sin_zero() {
        let enc = FourierEncoding::with_projection(vec![0.0; 8]).unwrap();
        let batch = CoordinateBatch::full_grid(2, 2);
        let t = enc.encode(&batch).unwrap();
        assert_eq!(t.shape(), vec![4, 8]);
        for row in t.data().chunks(8) {
            assert_eq!(&row[..4], &[1.0; 4]);
            assert_eq!(&row[4..], &[0.0; 4]);
        }
    }

    #[test]
    fn single_frequency_half_coordinate() {
        // B = [[1, 0]], v = (0.5, ·)  =>  [cos(π), sin(π)] = [-1, 0]
        let enc = FourierEncoding::with_projection(vec![1.0, 0.0]).unwrap();
        let batch = CoordinateBatch::from_indices(1, 4, vec![(0, 1)]).unwrap();
        // normalized row coordinate (0 + 0.5)/1 = 0.5
        let t = enc.encode(&batch).unwrap();
        let row = t.data();
        assert!((row[0] + 1.0).abs() < 1e-12, "cos(π) = -1, got {}", row[0]);
        assert!(row[1].abs() < 1e-12, "sin(π) = 0, got {}", row[1]);
    }

    #[test]
    fn grid_encoding_shape_and_range() {
        let enc = FourierEncoding::new(128, 10.0, 0).unwrap();
        let batch = CoordinateBatch::full_grid(16, 16);
        let t = enc.encode(&batch).unwrap();
        assert_eq!(t.shape(), vec![256, 256]);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn distinct_grid_coordinates_encode_distinctly() {
        let enc = FourierEncoding::new(64, 10.0, 7).unwrap();
        let batch = CoordinateBatch::full_grid(64, 64);
        let t = enc.encode(&batch).unwrap();
        let dim = enc.feature_dim();
        let mut seen = std::collections::HashSet::new();
        for row in t.data().chunks(dim) {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(key), "duplicate encoding row");
        }
    }

    #[test]
    fn same_seed_same_projection() {
        let a = FourierEncoding::new(32, 10.0, 123).unwrap();
        let b = FourierEncoding::new(32, 10.0, 123).unwrap();
        assert_eq!(a.projection, b.projection);
        let c = FourierEncoding::new(32, 10.0, 124).unwrap();
        assert_ne!(a.projection, c.projection);
    }

    #[test]
    fn far_out_of_range_coordinate_is_rejected() {
        let enc = FourierEncoding::new(4, 1.0, 0).unwrap();
        let mut batch = CoordinateBatch::full_grid(4, 4);
        batch.normalized[0] = (1.6, 0.5);
        assert!(matches!(enc.encode(&batch), Err(KnitworkError::Contract(_))));
        // Within one pixel of the grid is allowed.
        batch.normalized[0] = (1.0 + 1.0 / 4.0 - 1e-12, 0.5);
        assert!(enc.encode(&batch).is_ok());
    }

    #[test]
    fn duplicate_indices_rejected() {
        assert!(CoordinateBatch::from_indices(4, 4, vec![(1, 1), (1, 1)]).is_err());
    }
}
