//! Task drivers: inpainting, blind super-resolution, denoising, and the
//! conventional coordinate-MLP baseline used as a control in every
//! comparison.

use crate::error::{KnitworkError, Result};
use crate::imageio::{add_gaussian_noise, cut_hole, HoleRect, ImageGrid, Kernel2d};
use crate::metrics::{evaluate, MetricReport, Region};
use crate::trainer::{fit, KernelMode, TaskContext, TrainConfig, TrainState};

// ── Task specs ───────────────────────────────────────────────────────────────

/// Rectangular-cutout inpainting task.
#[derive(Debug, Clone, Copy)]
pub struct InpaintSpec {
    pub hole: HoleRect,
}

impl InpaintSpec {
    /// Centered square hole covering approximately `fill_ratio` of the image
    /// area (the protocol used for fill-ratio sweeps).
    pub fn centered_square(height: usize, width: usize, fill_ratio: f64) -> Self {
        let side = ((height * width) as f64 * fill_ratio).sqrt().round().max(1.0) as usize;
        let side = side.min(height).min(width);
        InpaintSpec {
            hole: HoleRect { row: (height - side) / 2, col: (width - side) / 2, height: side, width: side },
        }
    }
}

/// Super-resolution task: upscale factor and how the downsampling kernel is
/// obtained.
#[derive(Debug, Clone)]
pub struct SrSpec {
    pub factor: usize,
    pub kernel_mode: KernelMode,
}

/// Denoising task. Sigma is in 8-bit units (σ=40 means 40/255 in normalized
/// color space); the seed drives synthetic-noise evaluation.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseSpec {
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DenoiseSpec {
    pub fn sigma_normalized(&self) -> f64 {
        self.noise_sigma / 255.0
    }

    /// Synthesizes the noisy input from a clean reference (evaluation mode).
    pub fn synthesize(&self, clean: &ImageGrid) -> ImageGrid {
        add_gaussian_noise(clean, self.sigma_normalized(), self.seed)
    }
}

// ── Results ──────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct InpaintResult {
    pub output: ImageGrid,
    pub whole: MetricReport,
    /// Absent for a zero-area hole.
    pub region: Option<MetricReport>,
    pub state: TrainState,
}

#[derive(Debug)]
pub struct SrResult {
    pub output: ImageGrid,
    /// Collapsed learned kernel (side length, row-major taps); None for
    /// known-kernel or baseline runs.
    pub learned_kernel: Option<(usize, Vec<f64>)>,
    /// Metrics against the high-resolution ground truth when provided.
    pub metrics: Option<MetricReport>,
    pub state: TrainState,
}

#[derive(Debug)]
pub struct DenoiseResult {
    pub output: ImageGrid,
    /// Metrics against the clean reference when provided.
    pub metrics: Option<MetricReport>,
    pub state: TrainState,
}

// ── Drivers ──────────────────────────────────────────────────────────────────

/// Inpainting: reconstruction losses are masked to known pixels, the
/// consistency loss and discriminator run over the whole grid, and metrics
/// are reported for the whole image and the hole region separately.
pub fn run_inpaint(image: &ImageGrid, spec: &InpaintSpec, config: TrainConfig) -> Result<InpaintResult> {
    let (cut, known_mask) = cut_hole(image, spec.hole)?;
    let zero_area = spec.hole.area() == 0;
    let state = if zero_area {
        // Degenerates to a plain fit.
        fit(TaskContext::Fit { image: cut }, config)?
    } else {
        fit(TaskContext::Inpaint { image: cut, known_mask: known_mask.clone() }, config)?
    };
    let output = state.render()?;
    let whole = evaluate(image, &output, None, Region::Whole)?;
    let region = if zero_area {
        None
    } else {
        let hole_mask = ImageGrid::new(
            image.height(),
            image.width(),
            1,
            known_mask.data().iter().map(|v| 1.0 - v).collect(),
        )?;
        Some(evaluate(image, &output, Some(&hole_mask), Region::Masked("hole".to_string()))?)
    };
    Ok(InpaintResult { output, whole, region, state })
}

/// Super-resolution on the fine grid: the patch reconstruction loss is
/// disabled, structure comes from the downsampling loss against the low-res
/// source, and the discriminator matches fine-grid patch statistics to the
/// source's multi-scale patches.
pub fn run_superres(
    low_res: &ImageGrid,
    ground_truth: Option<&ImageGrid>,
    spec: &SrSpec,
    config: TrainConfig,
) -> Result<SrResult> {
    if spec.factor < 2 {
        return Err(KnitworkError::contract(format!("SR factor must be >= 2, got {}", spec.factor)));
    }
    let state = fit(
        TaskContext::SuperRes { low_res: low_res.clone(), factor: spec.factor, kernel: spec.kernel_mode.clone() },
        config,
    )?;
    let output = state.render()?;
    debug_assert_eq!(output.height(), low_res.height() * spec.factor);
    let learned_kernel = state.nets.kernel.as_ref().map(|k| k.collapse());
    let metrics = match ground_truth {
        Some(gt) => Some(evaluate(gt, &output, None, Region::Whole)?),
        None => None,
    };
    Ok(SrResult { output, learned_kernel, metrics, state })
}

/// Denoising: a plain fit against the noisy image; the consistency and
/// adversarial constraints are what keep the model from memorizing the
/// noise.
pub fn run_denoise(
    noisy: &ImageGrid,
    clean: Option<&ImageGrid>,
    _spec: &DenoiseSpec,
    config: TrainConfig,
) -> Result<DenoiseResult> {
    let state = fit(TaskContext::Fit { image: noisy.clone() }, config)?;
    let output = state.render()?;
    let metrics = match clean {
        Some(c) => Some(evaluate(c, &output, None, Region::Whole)?),
        None => None,
    };
    Ok(DenoiseResult { output, metrics, state })
}

/// The conventional coordinate-MLP control: same task plumbing, pixel-only
/// output trained with a (masked) pixel MSE. For super-resolution the
/// baseline fits the low-res grid and renders the fine grid directly, which
/// amounts to assuming a delta kernel.
pub fn run_baseline_mlp(task: &TaskContext, mut config: TrainConfig) -> Result<(ImageGrid, TrainState)> {
    config.patch_output = false;
    config.adversarial = false;
    config.xpatch_loss = false;
    match task {
        TaskContext::SuperRes { low_res, factor, .. } => {
            let state = fit(TaskContext::Fit { image: low_res.clone() }, config)?;
            let output = state.render_grid(low_res.height() * factor, low_res.width() * factor)?;
            Ok((output, state))
        }
        other => {
            let state = fit(other.clone(), config)?;
            let output = state.render()?;
            Ok((output, state))
        }
    }
}

// ── Kernel reporting ─────────────────────────────────────────────────────────

/// Collapsed kernel as CSV rows.
pub fn kernel_to_csv(size: usize, taps: &[f64]) -> String {
    let mut out = String::new();
    for row in taps.chunks(size) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Normalized grayscale heatmap of a kernel (max |tap| maps to white).
pub fn kernel_heatmap(size: usize, taps: &[f64]) -> ImageGrid {
    let peak = taps.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    ImageGrid::new(size, size, 1, taps.iter().map(|v| v.abs() / peak).collect()).expect("kernel grid")
}

/// Named kernels from the evaluation protocol.
pub fn kernel_by_name(name: &str, factor: usize) -> Result<Kernel2d> {
    match name {
        "delta" => Ok(Kernel2d::delta()),
        "round-gauss" => Ok(Kernel2d::round_gaussian(factor)),
        "diag-gauss" => Ok(Kernel2d::diagonal_gaussian(factor)),
        other => Err(KnitworkError::Config(format!(
            "unknown kernel '{other}' (delta|round-gauss|diag-gauss|learned)"
        ))),
    }
}
