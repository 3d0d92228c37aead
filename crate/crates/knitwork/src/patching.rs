//! Ground-truth patch-stack extraction and the shift geometry that links
//! overlapping patch predictions.
//!
//! A patch stack at pixel x holds, for every scale f, the p×p neighborhood of
//! x sampled with stride f from a Gaussian-prefiltered copy of the image
//! (scale 1 reads the raw image). Stacks are flattened scale-major as
//! `[scale][row][col][channel]`, so element `e` of a stack spans `C`
//! consecutive values starting at `e·C`.

use crate::encoding::CoordinateBatch;
use crate::error::{KnitworkError, Result};
use crate::imageio::ImageGrid;
use crate::tensor::Tensor;

/// Geometry of the multi-scale patch stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    /// Patch side length p; odd so the central element is well defined.
    pub patch_size: usize,
    /// Integer downscale factors, strictly increasing, first entry 1.
    pub scales: Vec<usize>,
    /// Gaussian pre-filter sigma per scale; entry 0 is ignored (raw image).
    pub blur_sigma_per_scale: Vec<f64>,
}

impl PatchSpec {
    pub fn new(patch_size: usize, scales: Vec<usize>) -> Result<Self> {
        if patch_size % 2 == 0 || patch_size == 0 {
            return Err(KnitworkError::contract(format!("patch size must be odd, got {patch_size}")));
        }
        if scales.first() != Some(&1) || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(KnitworkError::contract(format!(
                "scales must start at 1 and strictly increase, got {scales:?}"
            )));
        }
        // Anti-aliasing rule of thumb: sigma = f/2 for a factor-f subsampling.
        let blur_sigma_per_scale = scales.iter().map(|&f| if f == 1 { 0.0 } else { 0.5 * f as f64 }).collect();
        Ok(PatchSpec { patch_size, scales, blur_sigma_per_scale })
    }

    pub fn half(&self) -> usize {
        (self.patch_size - 1) / 2
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Patch elements across all scales (channel-agnostic): S·p².
    pub fn num_elements(&self) -> usize {
        self.num_scales() * self.patch_size * self.patch_size
    }

    /// Flattened stack length S·p²·C.
    pub fn stack_len(&self, channels: usize) -> usize {
        self.num_elements() * channels
    }

    /// Element index of the scale-1 central element o.
    pub fn center_element(&self) -> usize {
        let h = self.half();
        h * self.patch_size + h
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec::new(3, vec![1, 2, 4]).expect("default spec is valid")
    }
}

// ── Gaussian blur ────────────────────────────────────────────────────────────

/// Mirror-about-edge index (`-1 → 1`, `n → n-2`).
#[inline]
fn reflect_index(i: i64, len: usize) -> usize {
    let n = len as i64;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian convolution with reflect-padded borders; `sigma = 0`
/// is the identity.
pub fn gaussian_blur(img: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    if sigma < 0.0 {
        return Err(KnitworkError::contract(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as i64;
    let (h, w, c) = (img.height(), img.width(), img.channels());

    // Horizontal pass.
    let mut horiz = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let sx = reflect_index(x as i64 + k as i64 - radius, w);
                    acc += t * img.get(y, sx, ch);
                }
                horiz[(y * w + x) * c + ch] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let sy = reflect_index(y as i64 + k as i64 - radius, h);
                    acc += t * horiz[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    ImageGrid::from_unclamped(h, w, c, out)
}

// ── Stack extraction ─────────────────────────────────────────────────────────

/// Caches the per-scale blurred copies of one image and extracts ground-truth
/// patch stacks from them.
#[derive(Debug, Clone)]
pub struct PatchExtractor {
    pub spec: PatchSpec,
    channels: usize,
    height: usize,
    width: usize,
    /// One image per scale; index 0 is the raw image.
    pyramid: Vec<ImageGrid>,
}

impl PatchExtractor {
    pub fn new(img: &ImageGrid, spec: &PatchSpec) -> Result<Self> {
        let mut pyramid = Vec::with_capacity(spec.num_scales());
        for (si, &f) in spec.scales.iter().enumerate() {
            if f == 1 {
                pyramid.push(img.clone());
            } else {
                pyramid.push(gaussian_blur(img, spec.blur_sigma_per_scale[si])?);
            }
        }
        Ok(PatchExtractor {
            spec: spec.clone(),
            channels: img.channels(),
            height: img.height(),
            width: img.width(),
            pyramid,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stack_len(&self) -> usize {
        self.spec.stack_len(self.channels)
    }

    /// Flattened ground-truth stack at one pixel; out-of-bounds taps reflect.
    pub fn extract_stack(&self, coord: (usize, usize)) -> Result<Vec<f64>> {
        if coord.0 >= self.height || coord.1 >= self.width {
            return Err(KnitworkError::contract(format!(
                "coordinate {coord:?} outside {}×{}",
                self.height, self.width
            )));
        }
        let p = self.spec.patch_size;
        let hp = self.spec.half() as i64;
        let mut out = Vec::with_capacity(self.stack_len());
        for (si, &f) in self.spec.scales.iter().enumerate() {
            let src = &self.pyramid[si];
            for a in 0..p {
                let dy = (a as i64 - hp) * f as i64;
                let sy = reflect_index(coord.0 as i64 + dy, self.height);
                for b in 0..p {
                    let dx = (b as i64 - hp) * f as i64;
                    let sx = reflect_index(coord.1 as i64 + dx, self.width);
                    out.extend_from_slice(src.pixel(sy, sx));
                }
            }
        }
        Ok(out)
    }

    /// `[N × S·p²·C]` constant tensor of ground-truth stacks for a batch.
    pub fn stacks_for_batch(&self, batch: &CoordinateBatch) -> Result<Tensor> {
        let d = self.stack_len();
        let mut data = Vec::with_capacity(batch.len() * d);
        for &coord in &batch.pixel_indices {
            data.extend_from_slice(&self.extract_stack(coord)?);
        }
        Tensor::from_vec(vec![batch.len(), d], data)
    }
}

// ── Mask stacks ──────────────────────────────────────────────────────────────

/// Mask stack for one coordinate: an element is 1 iff every source pixel in
/// its scale-f footprint (conservatively the f×f bounding box around the tap)
/// is known. Out-of-bounds taps inherit their reflected source pixel's mask.
pub fn extract_mask_stack(known_mask: &ImageGrid, coord: (usize, usize), spec: &PatchSpec) -> Result<Vec<f64>> {
    if !known_mask.is_binary() || known_mask.channels() != 1 {
        return Err(KnitworkError::contract("known mask must be single-channel binary".to_string()));
    }
    let (h, w) = (known_mask.height(), known_mask.width());
    if coord.0 >= h || coord.1 >= w {
        return Err(KnitworkError::contract(format!("coordinate {coord:?} outside {h}×{w}")));
    }
    let p = spec.patch_size;
    let hp = spec.half() as i64;
    let mut out = Vec::with_capacity(spec.num_elements());
    for &f in &spec.scales {
        let fi = f as i64;
        // f×f bounding box starts (f-1)/2 before the tap.
        let back = (fi - 1) / 2;
        for a in 0..p {
            let ty = coord.0 as i64 + (a as i64 - hp) * fi;
            for b in 0..p {
                let tx = coord.1 as i64 + (b as i64 - hp) * fi;
                let mut known = true;
                'fp: for fy in 0..fi {
                    for fx in 0..fi {
                        let sy = reflect_index(ty - back + fy, h);
                        let sx = reflect_index(tx - back + fx, w);
                        if known_mask.get(sy, sx, 0) == 0.0 {
                            known = false;
                            break 'fp;
                        }
                    }
                }
                out.push(if known { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(out)
}

/// Expands a per-element mask stack to per-value (×C) and batches it into an
/// `[N × S·p²·C]` tensor. `None` means no missing data: a unit mask.
pub fn mask_stacks_for_batch(
    known_mask: Option<&ImageGrid>,
    batch: &CoordinateBatch,
    spec: &PatchSpec,
    channels: usize,
) -> Result<Tensor> {
    let d = spec.stack_len(channels);
    match known_mask {
        None => Tensor::from_vec(vec![batch.len(), d], vec![1.0; batch.len() * d]),
        Some(mask) => {
            let mut data = Vec::with_capacity(batch.len() * d);
            for &coord in &batch.pixel_indices {
                for elem in extract_mask_stack(mask, coord, spec)? {
                    for _ in 0..channels {
                        data.push(elem);
                    }
                }
            }
            Tensor::from_vec(vec![batch.len(), d], data)
        }
    }
}

// ── Shift map ────────────────────────────────────────────────────────────────

/// One patch element together with the image-space shift `s` such that
/// element `elem` of the stack predicted at `x + s` covers pixel `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftEntry {
    /// Channel-agnostic element index (scale-major).
    pub elem: usize,
    /// Scale factor f of this element.
    pub scale: usize,
    /// Within-patch offset (di, dj), each in [-(p-1)/2, (p-1)/2].
    pub offset: (i64, i64),
    /// s = (-f·di, -f·dj).
    pub shift: (i64, i64),
}

/// Index/shift geometry of the cross-patch consistency sum.
#[derive(Debug, Clone)]
pub struct ShiftMap {
    pub entries: Vec<ShiftEntry>,
    /// Central element o: scale 1, offset (0, 0).
    pub center_element: usize,
    pub patch_size: usize,
}

impl ShiftMap {
    pub fn build(spec: &PatchSpec) -> ShiftMap {
        let p = spec.patch_size;
        let hp = spec.half() as i64;
        let mut entries = Vec::with_capacity(spec.num_elements());
        for (si, &f) in spec.scales.iter().enumerate() {
            for a in 0..p {
                let di = a as i64 - hp;
                for b in 0..p {
                    let dj = b as i64 - hp;
                    entries.push(ShiftEntry {
                        elem: si * p * p + a * p + b,
                        scale: f,
                        offset: (di, dj),
                        shift: (-(f as i64) * di, -(f as i64) * dj),
                    });
                }
            }
        }
        ShiftMap { entries, center_element: spec.center_element(), patch_size: p }
    }

    /// Entries whose consistency term is not identically zero (everything but
    /// the central element itself).
    pub fn non_center_entries(&self) -> impl Iterator<Item = &ShiftEntry> {
        self.entries.iter().filter(move |e| e.elem != self.center_element)
    }

    /// `x + s` when it stays inside an H×W grid.
    pub fn shifted_coord(coord: (usize, usize), shift: (i64, i64), h: usize, w: usize) -> Option<(usize, usize)> {
        let y = coord.0 as i64 + shift.0;
        let x = coord.1 as i64 + shift.1;
        if y >= 0 && y < h as i64 && x >= 0 && x < w as i64 {
            Some((y as usize, x as usize))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    #[test]
    fn blur_sigma_zero_is_identity() {
        let img = synth::natural_texture(12, 9, 3, 1);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap().data(), img.data());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = ImageGrid::constant(10, 10, 1, 0.4);
        for sigma in [0.5, 1.0, 2.5] {
            let blurred = gaussian_blur(&img, sigma).unwrap();
            assert!(blurred.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        }
    }

    #[test]
    fn blur_impulse_center_matches_truncated_kernel_peak() {
        let mut img = ImageGrid::constant(21, 21, 1, 0.0);
        img.set(10, 10, 0, 1.0);
        let blurred = gaussian_blur(&img, 1.0).unwrap();
        let taps = gaussian_taps(1.0);
        let peak_1d = taps[taps.len() / 2];
        assert!((blurred.get(10, 10, 0) - peak_1d * peak_1d).abs() < 1e-12);
    }

    #[test]
    fn extract_constant_image_gives_constant_stack() {
        let img = ImageGrid::constant(16, 16, 3, 0.3);
        let ex = PatchExtractor::new(&img, &PatchSpec::default()).unwrap();
        let stack = ex.extract_stack((7, 8)).unwrap();
        assert_eq!(stack.len(), 81);
        assert!(stack.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn extract_scale_one_is_the_raw_neighborhood() {
        // 9×9 ramp; scale-1 patch at the center must be a direct copy.
        let data: Vec<f64> = (0..81).map(|i| i as f64 / 80.0).collect();
        let img = ImageGrid::new(9, 9, 1, data).unwrap();
        let spec = PatchSpec::new(3, vec![1]).unwrap();
        let ex = PatchExtractor::new(&img, &spec).unwrap();
        let stack = ex.extract_stack((4, 4)).unwrap();
        let expected: Vec<f64> = (3..=5)
            .flat_map(|y| (3..=5).map(move |x| (y * 9 + x) as f64 / 80.0))
            .collect();
        assert_eq!(stack, expected);
    }

    /// Independent scalar-loop extraction: direct 2-D convolution blur and
    /// strided taps, no shared code with `PatchExtractor`.
    fn oracle_extract(img: &ImageGrid, coord: (usize, usize), spec: &PatchSpec) -> Vec<f64> {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let hp = spec.half() as i64;
        let mut out = Vec::new();
        for (si, &f) in spec.scales.iter().enumerate() {
            let sigma = spec.blur_sigma_per_scale[si];
            let blurred: ImageGrid = if f == 1 {
                img.clone()
            } else {
                let taps = gaussian_taps(sigma);
                let r = (taps.len() / 2) as i64;
                let mut vals = vec![0.0; h * w * c];
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for (ky, &ty) in taps.iter().enumerate() {
                                for (kx, &tx) in taps.iter().enumerate() {
                                    let sy = reflect_index(y + ky as i64 - r, h);
                                    let sx = reflect_index(x + kx as i64 - r, w);
                                    acc += ty * tx * img.get(sy, sx, ch);
                                }
                            }
                            vals[((y as usize) * w + x as usize) * c + ch] = acc;
                        }
                    }
                }
                ImageGrid::from_unclamped(h, w, c, vals).unwrap()
            };
            for a in -hp..=hp {
                for b in -hp..=hp {
                    let sy = reflect_index(coord.0 as i64 + a * f as i64, h);
                    let sx = reflect_index(coord.1 as i64 + b * f as i64, w);
                    for ch in 0..c {
                        out.push(blurred.get(sy, sx, ch));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn extraction_matches_scalar_loop_oracle() {
        let img = synth::checkerboard(17, 17, 2);
        let spec = PatchSpec::new(3, vec![1, 2]).unwrap();
        let ex = PatchExtractor::new(&img, &spec).unwrap();
        for coord in [(8, 8), (0, 0), (16, 3), (2, 15)] {
            let fast = ex.extract_stack(coord).unwrap();
            let slow = oracle_extract(&img, coord, &spec);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-12, "coord {coord:?}: {f} vs {s}");
            }
        }
    }

    #[test]
    fn all_known_mask_gives_unit_stack() {
        let mask = ImageGrid::constant(12, 12, 1, 1.0);
        let stack = extract_mask_stack(&mask, (6, 6), &PatchSpec::default()).unwrap();
        assert!(stack.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hole_center_zeroes_scale_one_mask() {
        let img = ImageGrid::constant(20, 20, 1, 0.5);
        let (_, mask) = crate::imageio::cut_hole(
            &img,
            crate::imageio::HoleRect { row: 6, col: 6, height: 8, width: 8 },
        )
        .unwrap();
        let spec = PatchSpec::default();
        let stack = extract_mask_stack(&mask, (10, 10), &spec).unwrap();
        // Scale-1 elements are the first p² entries.
        assert!(stack[..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn straddling_mask_matches_footprint_oracle() {
        let img = ImageGrid::constant(24, 24, 1, 0.5);
        let (_, mask) =
            crate::imageio::cut_hole(&img, crate::imageio::HoleRect { row: 8, col: 8, height: 6, width: 6 }).unwrap();
        let spec = PatchSpec::default();
        let (h, w) = (24usize, 24usize);
        for coord in [(7, 7), (8, 13), (14, 8), (6, 10), (12, 12)] {
            let got = extract_mask_stack(&mask, coord, &spec).unwrap();
            // Brute-force footprint check, written independently.
            let hp = spec.half() as i64;
            let mut want = Vec::new();
            for &f in &spec.scales {
                let fi = f as i64;
                for a in -hp..=hp {
                    for b in -hp..=hp {
                        let ty = coord.0 as i64 + a * fi;
                        let tx = coord.1 as i64 + b * fi;
                        let mut ok = true;
                        for fy in 0..fi {
                            for fx in 0..fi {
                                let sy = reflect_index(ty - (fi - 1) / 2 + fy, h);
                                let sx = reflect_index(tx - (fi - 1) / 2 + fx, w);
                                if mask.get(sy, sx, 0) == 0.0 {
                                    ok = false;
                                }
                            }
                        }
                        want.push(if ok { 1.0 } else { 0.0 });
                    }
                }
            }
            assert_eq!(got, want, "coord {coord:?}");
        }
    }

    #[test]
    fn shift_map_entries_are_negated_scaled_offsets() {
        let spec = PatchSpec::default();
        let map = ShiftMap::build(&spec);
        assert_eq!(map.entries.len(), 27);
        let find = |scale: usize, offset: (i64, i64)| {
            map.entries
                .iter()
                .find(|e| e.scale == scale && e.offset == offset)
                .copied()
                .unwrap()
        };
        assert_eq!(find(1, (0, 0)).shift, (0, 0));
        assert_eq!(find(1, (1, 0)).shift, (-1, 0));
        assert_eq!(find(4, (-1, 1)).shift, (4, -4));
        assert_eq!(map.center_element, 4);
        assert_eq!(find(1, (0, 0)).elem, map.center_element);
        // Shifts at scale f are multiples of f.
        for e in &map.entries {
            assert_eq!(e.shift.0 % e.scale as i64, 0);
            assert_eq!(e.shift.1 % e.scale as i64, 0);
        }
    }

    #[test]
    fn scale_one_centers_reassemble_the_image() {
        let img = synth::natural_texture(14, 11, 3, 3);
        let spec = PatchSpec::default();
        let ex = PatchExtractor::new(&img, &spec).unwrap();
        let c = img.channels();
        let center = spec.center_element();
        let mut rebuilt = vec![0.0; img.data().len()];
        for y in 0..14 {
            for x in 0..11 {
                let stack = ex.extract_stack((y, x)).unwrap();
                for ch in 0..c {
                    rebuilt[(y * 11 + x) * c + ch] = stack[center * c + ch];
                }
            }
        }
        assert_eq!(rebuilt, img.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shrinking_the_hole_never_clears_mask_elements(
            row in 2usize..8, col in 2usize..8, hh in 2usize..6, ww in 2usize..6,
            shrink in 1usize..2, cy in 0usize..16, cx in 0usize..16,
        ) {
            let img = ImageGrid::constant(16, 16, 1, 0.5);
            let big = crate::imageio::HoleRect { row, col, height: hh, width: ww };
            let small = crate::imageio::HoleRect {
                row: row + shrink.min(hh - 1),
                col,
                height: hh - shrink.min(hh - 1),
                width: ww,
            };
            let (_, mask_big) = crate::imageio::cut_hole(&img, big).unwrap();
            let (_, mask_small) = crate::imageio::cut_hole(&img, small).unwrap();
            let spec = PatchSpec::default();
            let a = extract_mask_stack(&mask_big, (cy, cx), &spec).unwrap();
            let b = extract_mask_stack(&mask_small, (cy, cx), &spec).unwrap();
            for (va, vb) in a.iter().zip(&b) {
                prop_assert!(vb >= va, "shrinking flipped a mask element 1 -> 0");
            }
        }
    }
}
