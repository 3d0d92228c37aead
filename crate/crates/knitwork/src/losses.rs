//! The training objective: masked patch reconstruction, cross-patch
//! consistency, reconstructed pixel error, and the adversarial BCE terms,
//! assembled into the weighted generator total.
//!
//! Sums run over coordinates exactly as written in the objective (no batch
//! re-normalization); Adam's per-parameter scaling makes that choice benign.

use crate::error::{KnitworkError, Result};
use crate::patching::ShiftMap;
use crate::tensor::Tensor;

/// Numerical floor for BCE scores.
pub const BCE_EPS: f64 = 1e-7;

/// Weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Cross-patch consistency weight α.
    pub alpha: f64,
    /// Reconstructed-pixel weight β.
    pub beta: f64,
    /// Adversarial weight γ.
    pub gamma: f64,
    /// Downsampling-loss weight δ (super-resolution only).
    pub delta: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(v >= 0.0) {
                return Err(KnitworkError::contract(format!("loss weight {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 0.1, delta: 10.0 }
    }
}

/// Which generator adversarial term to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GanForm {
    /// -ln D(fake): the standard stable choice.
    #[default]
    NonSaturating,
    /// ln(1 - D(fake)): the literal minimax term.
    Minimax,
}

impl std::str::FromStr for GanForm {
    type Err = KnitworkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonsat" => Ok(GanForm::NonSaturating),
            "minimax" => Ok(GanForm::Minimax),
            other => Err(KnitworkError::Config(format!("unknown gan form '{other}' (nonsat|minimax)"))),
        }
    }
}

/// Per-step loss values for logging and the CSV trace.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub recon: f64,
    pub xpatch: f64,
    pub pixel: f64,
    pub gen_bce: f64,
    pub disc_bce: f64,
    pub total_g: f64,
    /// Super-resolution downsampling loss; zero elsewhere.
    pub down: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,recon,xpatch,pixel,gen_bce,disc_bce,total_g,down";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.step, self.recon, self.xpatch, self.pixel, self.gen_bce, self.disc_bce, self.total_g, self.down
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.xpatch, self.pixel, self.gen_bce, self.disc_bce, self.total_g, self.down]
            .iter()
            .all(|v| v.is_finite())
    }
}

// ── Patch reconstruction (masked patch MSE) ──────────────────────────────────

/// Sum over coordinates of the masked squared patch error, normalized per
/// coordinate by the stack size D:  Σ_x (φ−φ̂)²·m / |φ|.
pub fn patch_recon_loss(pred: &Tensor, truth: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let shape = pred.shape();
    if shape != truth.shape() || shape != mask.shape() || shape.len() != 2 {
        return Err(KnitworkError::dimension(
            "patch_recon_loss",
            format!("pred {:?}, truth {:?}, mask {:?}", shape, truth.shape(), mask.shape()),
        ));
    }
    if !mask.with_data(|d| d.iter().all(|&v| v == 0.0 || v == 1.0)) {
        return Err(KnitworkError::contract("patch_recon_loss: mask must be binary".to_string()));
    }
    let d = shape[1] as f64;
    Ok(pred.sub(truth)?.square().mul(mask)?.sum().mul_scalar(1.0 / d))
}

// ── Cross-patch consistency ──────────────────────────────────────────────────

/// Σ_x Σ_i (φ̂(x+s)[i] − φ̂(x)[o])² over a full H×W prediction field
/// (`pred_stacks` is `[H·W × S·p²·C]`, rows in row-major grid order). Terms
/// whose shifted coordinate leaves the grid are excluded. Gradients flow into
/// both the shifted element and the central reference.
pub fn cross_patch_loss(
    pred_stacks: &Tensor,
    shifts: &ShiftMap,
    grid_height: usize,
    grid_width: usize,
    channels: usize,
) -> Result<Tensor> {
    let shape = pred_stacks.shape();
    if shape.len() != 2 || shape[0] != grid_height * grid_width {
        return Err(KnitworkError::dimension(
            "cross_patch_loss",
            format!("stacks {:?} vs grid {grid_height}×{grid_width}", shape),
        ));
    }
    let center = pred_stacks.slice_cols(shifts.center_element * channels, channels)?;
    let mut total = Tensor::scalar(0.0);
    for entry in shifts.non_center_entries() {
        let elem = pred_stacks.slice_cols(entry.elem * channels, channels)?;
        let shifted = elem.grid_row_shift(grid_height, grid_width, entry.shift.0, entry.shift.1)?;
        let valid = shift_validity_mask(grid_height, grid_width, entry.shift, channels);
        let term = shifted.sub(&center)?.square().mul(&valid)?.sum();
        total = total.add(&term)?;
    }
    Ok(total)
}

/// Constant `[H·W × C]` mask: 1 where `(y,x) + shift` stays on the grid.
pub fn shift_validity_mask(grid_height: usize, grid_width: usize, shift: (i64, i64), channels: usize) -> Tensor {
    let mut data = vec![0.0; grid_height * grid_width * channels];
    for y in 0..grid_height as i64 {
        let sy = y + shift.0;
        if sy < 0 || sy >= grid_height as i64 {
            continue;
        }
        for x in 0..grid_width as i64 {
            let sx = x + shift.1;
            if sx < 0 || sx >= grid_width as i64 {
                continue;
            }
            let base = ((y as usize) * grid_width + x as usize) * channels;
            data[base..base + channels].fill(1.0);
        }
    }
    Tensor::from_vec(vec![grid_height * grid_width, channels], data).expect("sized mask")
}

// ── Reconstructed pixel loss (ℓ1) ────────────────────────────────────────────

/// Σ_x |ρ̂(φ̂(x)) − c(x)|, optionally masked to known pixels.
pub fn pixel_loss(colors: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if colors.shape() != target.shape() {
        return Err(KnitworkError::dimension(
            "pixel_loss",
            format!("colors {:?} vs target {:?}", colors.shape(), target.shape()),
        ));
    }
    let diff = colors.sub(target)?.abs();
    let diff = match mask {
        Some(m) => {
            if m.shape() != colors.shape() {
                return Err(KnitworkError::dimension(
                    "pixel_loss",
                    format!("mask {:?} vs colors {:?}", m.shape(), colors.shape()),
                ));
            }
            diff.mul(m)?
        }
        None => diff,
    };
    Ok(diff.sum())
}

// ── Adversarial terms ────────────────────────────────────────────────────────

fn bce_against_constant(scores: &Tensor, target: f64) -> Tensor {
    // -[t·ln s + (1-t)·ln(1-s)], scores clamped away from {0,1}.
    let s = scores.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let pos = s.ln().mul_scalar(-target);
    let neg = s.mul_scalar(-1.0).add_scalar(1.0).ln().mul_scalar(-(1.0 - target));
    pos.add(&neg).expect("equal shapes").mean()
}

/// Discriminator BCE: mean over real scores against the smoothed target
/// (1 − smoothing) plus mean over fake scores against 0.
pub fn disc_loss(real_scores: &Tensor, fake_scores: &Tensor, smoothing: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(KnitworkError::contract(format!("label smoothing must be in [0,1), got {smoothing}")));
    }
    let real = bce_against_constant(real_scores, 1.0 - smoothing);
    let fake = bce_against_constant(fake_scores, 0.0);
    real.add(&fake)
}

/// Generator adversarial term over discriminator scores of synthesized
/// patches.
pub fn gen_adv_loss(fake_scores: &Tensor, form: GanForm) -> Tensor {
    let s = fake_scores.clamp(BCE_EPS, 1.0 - BCE_EPS);
    match form {
        GanForm::NonSaturating => s.ln().mul_scalar(-1.0).mean(),
        GanForm::Minimax => s.mul_scalar(-1.0).add_scalar(1.0).ln().mean(),
    }
}

// ── Total generator objective ────────────────────────────────────────────────

/// Scalar parts of the generator objective for one step.
#[derive(Debug, Clone)]
pub struct GeneratorParts {
    pub recon: Tensor,
    pub xpatch: Tensor,
    pub pixel: Tensor,
    pub gen_bce: Tensor,
    /// Downsampling loss (super-resolution only).
    pub down: Option<Tensor>,
}

/// L_total = L_recon + α·L_xpatch + β·L_pixel + γ·L_bce (+ δ·L_down).
pub fn total_generator_loss(parts: &GeneratorParts, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    weights.validate()?;
    for (name, t) in [
        ("recon", &parts.recon),
        ("xpatch", &parts.xpatch),
        ("pixel", &parts.pixel),
        ("gen_bce", &parts.gen_bce),
    ] {
        if t.numel() != 1 {
            return Err(KnitworkError::contract(format!("loss part {name} must be scalar")));
        }
    }
    let mut total = parts
        .recon
        .add(&parts.xpatch.mul_scalar(weights.alpha))?
        .add(&parts.pixel.mul_scalar(weights.beta))?
        .add(&parts.gen_bce.mul_scalar(weights.gamma))?;
    let mut down_value = 0.0;
    if let Some(down) = &parts.down {
        total = total.add(&down.mul_scalar(weights.delta))?;
        down_value = down.item();
    }
    let report = LossReport {
        step: 0,
        recon: parts.recon.item(),
        xpatch: parts.xpatch.item(),
        pixel: parts.pixel.item(),
        gen_bce: parts.gen_bce.item(),
        disc_bce: 0.0,
        total_g: total.item(),
        down: down_value,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::CoordinateBatch;
    use crate::patching::{PatchExtractor, PatchSpec, ShiftMap};
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn recon_loss_zero_when_pred_equals_truth() {
        let t = Tensor::from_vec(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let mask = Tensor::from_vec(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(patch_recon_loss(&t, &t, &mask).unwrap().item(), 0.0);
    }

    #[test]
    fn recon_loss_zero_when_fully_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = rand_tensor(&mut rng, vec![3, 4], 0.0, 1.0);
        let truth = rand_tensor(&mut rng, vec![3, 4], 0.0, 1.0);
        let mask = Tensor::from_vec(vec![3, 4], vec![0.0; 12]).unwrap();
        assert_eq!(patch_recon_loss(&pred, &truth, &mask).unwrap().item(), 0.0);
    }

    #[test]
    fn recon_loss_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d) = (2usize, 4usize);
        let pred = rand_tensor(&mut rng, vec![n, d], 0.0, 1.0);
        let truth = rand_tensor(&mut rng, vec![n, d], 0.0, 1.0);
        let mask_vals: Vec<f64> = (0..n * d).map(|_| f64::from(rng.gen_bool(0.7))).collect();
        let mask = Tensor::from_vec(vec![n, d], mask_vals.clone()).unwrap();

        let got = patch_recon_loss(&pred, &truth, &mask).unwrap().item();
        let (p, t) = (pred.data(), truth.data());
        let mut want = 0.0;
        for i in 0..n {
            let mut per_coord = 0.0;
            for j in 0..d {
                let e = p[i * d + j] - t[i * d + j];
                per_coord += e * e * mask_vals[i * d + j];
            }
            want += per_coord / d as f64;
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn recon_loss_rejects_nonbinary_mask() {
        let t = Tensor::from_vec(vec![1, 2], vec![0.1, 0.2]).unwrap();
        let mask = Tensor::from_vec(vec![1, 2], vec![0.5, 1.0]).unwrap();
        assert!(patch_recon_loss(&t, &t, &mask).is_err());
    }

    #[test]
    fn cross_patch_zero_for_spatially_constant_predictions() {
        let spec = PatchSpec::default();
        let shifts = ShiftMap::build(&spec);
        let d = spec.stack_len(3);
        let pred = Tensor::from_vec(vec![16, d], vec![0.42; 16 * d]).unwrap();
        let loss = cross_patch_loss(&pred, &shifts, 4, 4, 3).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn cross_patch_scale_one_is_exactly_zero_on_extracted_stacks() {
        // Ground-truth stacks are self-consistent at scale 1 by construction.
        for seed in 0..5 {
            let img = synth::natural_texture(8, 7, 3, seed);
            let spec = PatchSpec::new(3, vec![1]).unwrap();
            let ex = PatchExtractor::new(&img, &spec).unwrap();
            let batch = CoordinateBatch::full_grid(8, 7);
            let stacks = ex.stacks_for_batch(&batch).unwrap();
            let shifts = ShiftMap::build(&spec);
            let loss = cross_patch_loss(&stacks, &shifts, 8, 7, 3).unwrap();
            assert_eq!(loss.item(), 0.0, "seed {seed}");
        }
    }

    #[test]
    fn cross_patch_matches_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = PatchSpec::default();
        let shifts = ShiftMap::build(&spec);
        let (h, w, c) = (4usize, 4usize, 3usize);
        let d = spec.stack_len(c);
        let pred = rand_tensor(&mut rng, vec![h * w, d], 0.0, 1.0);

        let got = cross_patch_loss(&pred, &shifts, h, w, c).unwrap().item();

        // Brute force over coordinates, elements and channels.
        let data = pred.data();
        let o = shifts.center_element;
        let mut want = 0.0;
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for e in &shifts.entries {
                    let (sy, sx) = (y + e.shift.0, x + e.shift.1);
                    if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    for ch in 0..c {
                        let shifted = data[(sy as usize * w + sx as usize) * d + e.elem * c + ch];
                        let center = data[(y as usize * w + x as usize) * d + o * c + ch];
                        want += (shifted - center) * (shifted - center);
                    }
                }
            }
        }
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn pixel_loss_trivial_and_oracle() {
        let a = Tensor::from_vec(vec![1, 1], vec![0.5]).unwrap();
        let b = Tensor::from_vec(vec![1, 1], vec![0.25]).unwrap();
        assert!((pixel_loss(&a, &b, None).unwrap().item() - 0.25).abs() < 1e-15);
        assert_eq!(pixel_loss(&a, &a, None).unwrap().item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![5, 3], 0.0, 1.0);
        let y = rand_tensor(&mut rng, vec![5, 3], 0.0, 1.0);
        let got = pixel_loss(&x, &y, None).unwrap().item();
        let want: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_at_smoothed_optimum() {
        // Real scores at the smoothed target 0.9 and fakes at ~0 sit at the
        // optimum: BCE(0.9 ; t=0.9) ≈ 0.325 plus ~0 for the fakes.
        let real = Tensor::from_vec(vec![4, 1], vec![0.9; 4]).unwrap();
        let fake = Tensor::from_vec(vec![4, 1], vec![1e-9; 4]).unwrap();
        let loss = disc_loss(&real, &fake, 0.1).unwrap().item();
        let expected = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((expected - 0.325).abs() < 1e-3);
        assert!((loss - expected).abs() < 1e-5, "{loss} vs {expected}");
    }

    #[test]
    fn disc_loss_no_smoothing_perfect_scores_vanishes() {
        let real = Tensor::from_vec(vec![2, 1], vec![1.0; 2]).unwrap();
        let fake = Tensor::from_vec(vec![2, 1], vec![0.0; 2]).unwrap();
        let loss = disc_loss(&real, &fake, 0.0).unwrap().item();
        assert!(loss.abs() < 1e-6, "{loss}");
    }

    #[test]
    fn disc_loss_indifferent_scores_are_ln2_per_side() {
        let half = Tensor::from_vec(vec![8, 1], vec![0.5; 8]).unwrap();
        let loss = disc_loss(&half, &half, 0.1).unwrap().item();
        let ln2 = std::f64::consts::LN_2;
        assert!((loss - 2.0 * ln2).abs() < 1e-12, "{loss} vs 2·ln2 (ln2 per side)");
    }

    #[test]
    fn gen_adv_loss_values() {
        let ones = Tensor::from_vec(vec![3, 1], vec![1.0; 3]).unwrap();
        assert!(gen_adv_loss(&ones, GanForm::NonSaturating).item().abs() < 1e-6);
        let half = Tensor::from_vec(vec![3, 1], vec![0.5; 3]).unwrap();
        assert!((gen_adv_loss(&half, GanForm::NonSaturating).item() - std::f64::consts::LN_2).abs() < 1e-12);
        // Loop oracle on a random batch.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores = rand_tensor(&mut rng, vec![7, 1], 0.05, 0.95);
        let got = gen_adv_loss(&scores, GanForm::NonSaturating).item();
        let want = -scores.data().iter().map(|s| s.ln()).sum::<f64>() / 7.0;
        assert!((got - want).abs() < 1e-12);
        // Minimax form is negative and pushes the same direction.
        let mm = gen_adv_loss(&scores, GanForm::Minimax).item();
        let mm_want = scores.data().iter().map(|s| (1.0 - s).ln()).sum::<f64>() / 7.0;
        assert!((mm - mm_want).abs() < 1e-12);
    }

    fn scalar_parts(recon: f64, xpatch: f64, pixel: f64, gen: f64) -> GeneratorParts {
        GeneratorParts {
            recon: Tensor::scalar(recon),
            xpatch: Tensor::scalar(xpatch),
            pixel: Tensor::scalar(pixel),
            gen_bce: Tensor::scalar(gen),
            down: None,
        }
    }

    #[test]
    fn total_loss_assembly() {
        let w = LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0, delta: 0.0 };
        let (t, _) = total_generator_loss(&scalar_parts(0.0, 0.0, 0.0, 0.0), &w).unwrap();
        assert_eq!(t.item(), 0.0);
        let (t, _) = total_generator_loss(&scalar_parts(1.0, 1.0, 1.0, 1.0), &w).unwrap();
        assert_eq!(t.item(), 4.0);

        let w = LossWeights { alpha: 2.0, beta: 1.0, gamma: 0.1, delta: 0.0 };
        let (t, report) = total_generator_loss(&scalar_parts(0.5, 0.2, 0.1, 0.3), &w).unwrap();
        assert!((t.item() - 1.03).abs() < 1e-12);
        assert!((report.total_g - (report.recon + 2.0 * report.xpatch + report.pixel + 0.1 * report.gen_bce)).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_linear_in_each_weight() {
        let parts = scalar_parts(0.4, 0.3, 0.2, 0.1);
        let base = LossWeights { alpha: 1.5, beta: 1.0, gamma: 0.1, delta: 0.0 };
        let doubled = LossWeights { alpha: 3.0, ..base };
        let (t1, _) = total_generator_loss(&parts, &base).unwrap();
        let (t2, _) = total_generator_loss(&parts, &doubled).unwrap();
        assert!((t2.item() - t1.item() - 1.5 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights { alpha: -1.0, beta: 1.0, gamma: 0.1, delta: 0.0 };
        assert!(total_generator_loss(&scalar_parts(0.0, 0.0, 0.0, 0.0), &w).is_err());
    }
}
