//! Alternating generator/discriminator optimization over sampled coordinate
//! batches.
//!
//! A generator step forwards the Patch MLP on an encoded batch, assembles the
//! masked patch reconstruction term, the cross-patch consistency term
//! (reference center predictions come from fresh forward passes at the
//! shifted coordinates within the same step), the reconstructed pixel term
//! and the adversarial term, then backpropagates and applies Adam to the
//! Patch MLP and Reconstructor only. Discriminator steps use detached
//! synthesized stacks so no gradient ever reaches the generator.
//!
//! Super-resolution trains on the full fine grid instead of sampled batches:
//! the one full-grid forward feeds the cross-patch loss, the rendered image
//! for the downsampling loss, and the discriminator's synthetic patches.

use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::{CoordinateBatch, FourierEncoding};
use crate::error::{KnitworkError, Result};
use crate::imageio::{ImageGrid, Kernel2d};
use crate::losses::{
    cross_patch_loss, disc_loss, gen_adv_loss, patch_recon_loss, pixel_loss, total_generator_loss, GanForm,
    GeneratorParts, LossReport, LossWeights,
};
use crate::nets::{
    apply_fixed_kernel_downsample, BaselineMlp, DeepLinearKernel, NetConfig, PatchDiscriminator, PatchMlp,
    Reconstructor,
};
use crate::patching::{mask_stacks_for_batch, PatchExtractor, PatchSpec, ShiftMap};
use crate::tensor::{no_grad, AdamState, Tensor};

/// How the downsampling operator is obtained in super-resolution.
#[derive(Debug, Clone)]
pub enum KernelMode {
    /// Backpropagate through a fixed, known kernel.
    Known(Kernel2d),
    /// Jointly optimize a deep linear kernel network.
    Learned,
}

/// What the model is trained against.
#[derive(Debug, Clone)]
pub enum TaskContext {
    /// Plain fit of an image (denoising passes the noisy image here).
    Fit { image: ImageGrid },
    /// Fit with a rectangular (or arbitrary) known-pixel mask; reconstruction
    /// losses see only known data, consistency and the discriminator run
    /// everywhere.
    Inpaint { image: ImageGrid, known_mask: ImageGrid },
    /// Blind or known-kernel super-resolution of a low-resolution source.
    SuperRes { low_res: ImageGrid, factor: usize, kernel: KernelMode },
}

/// All hyperparameters of a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr_g: f64,
    pub lr_d: f64,
    pub iterations: usize,
    /// Coordinates per optimization step (clamped to the grid size).
    pub batch_size: usize,
    pub d_steps_per_g: usize,
    pub seed: u64,
    pub patch_spec: PatchSpec,
    /// Number of random Fourier frequencies m (feature dim 2m).
    pub num_frequencies: usize,
    pub sigma_pe: f64,
    pub hidden_width: usize,
    pub recon_width: usize,
    pub disc_width: usize,
    pub leaky_slope: f64,
    /// Ablation switches; all on = full model, `patch_output = false` is the
    /// conventional coordinate-MLP baseline.
    pub patch_output: bool,
    pub xpatch_loss: bool,
    pub adversarial: bool,
    pub gan_form: GanForm,
    pub label_smoothing: f64,
    /// Cross-patch element groups evaluated per step (0 = all S·p²−1).
    /// Sampled terms are rescaled so the expectation matches the full sum.
    pub xpatch_samples: usize,
    /// Also supervise super-resolution with an ℓ1 pixel term on the coarse
    /// grid (off by default).
    pub sr_pixel_supervision: bool,
    /// Progress line cadence on stdout; 0 = silent.
    pub log_every: usize,
    /// Checkpoint cadence in steps; 0 = final checkpoint only (when out_dir
    /// is set).
    pub checkpoint_every: usize,
    /// Where to write the loss CSV and checkpoints; None = keep in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr_g: 1e-4,
            lr_d: 1e-4,
            iterations: 10_000,
            batch_size: 1024,
            d_steps_per_g: 1,
            seed: 0,
            patch_spec: PatchSpec::default(),
            num_frequencies: 128,
            sigma_pe: 10.0,
            hidden_width: 256,
            recon_width: 256,
            disc_width: 256,
            leaky_slope: 0.2,
            patch_output: true,
            xpatch_loss: true,
            adversarial: true,
            gan_form: GanForm::NonSaturating,
            label_smoothing: 0.1,
            xpatch_samples: 8,
            sr_pixel_supervision: false,
            log_every: 0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(KnitworkError::contract("iterations and batch_size must be >= 1".to_string()));
        }
        if self.d_steps_per_g == 0 {
            return Err(KnitworkError::contract("d_steps_per_g must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(KnitworkError::contract("label smoothing must be in [0,1)".to_string()));
        }
        Ok(())
    }
}

/// The trainable networks of one run. `patch_output = false` populates only
/// the baseline.
#[derive(Debug, Clone)]
pub struct Networks {
    pub patch_mlp: Option<PatchMlp>,
    pub reconstructor: Option<Reconstructor>,
    pub discriminator: Option<PatchDiscriminator>,
    pub baseline: Option<BaselineMlp>,
    pub kernel: Option<DeepLinearKernel>,
}

impl Networks {
    /// Generator-side parameters in fixed order (Patch MLP, Reconstructor,
    /// kernel net or baseline).
    pub fn generator_params(&self) -> Vec<Tensor> {
        let mut params = Vec::new();
        if let Some(n) = &self.patch_mlp {
            params.extend(n.params());
        }
        if let Some(n) = &self.reconstructor {
            params.extend(n.params());
        }
        if let Some(n) = &self.kernel {
            params.extend(n.params());
        }
        if let Some(n) = &self.baseline {
            params.extend(n.params());
        }
        params
    }

    pub fn discriminator_params(&self) -> Vec<Tensor> {
        self.discriminator.as_ref().map(|d| d.params()).unwrap_or_default()
    }
}

/// Everything derived from the task once, before stepping.
struct TaskSetup {
    /// Grid the model is queried on (fine grid for SR).
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    /// Image providing pixel targets and ground-truth stacks (the source for
    /// fit/inpaint/denoise, the low-res source for SR).
    source: ImageGrid,
    known_mask: Option<ImageGrid>,
    extractor: PatchExtractor,
    shift_map: ShiftMap,
    /// Super-resolution extras.
    sr: Option<SrSetup>,
}

struct SrSetup {
    factor: usize,
    kernel_mode: KernelMode,
    /// Cached encoded features of the full fine grid.
    fine_features: Tensor,
    /// Cached encoded features of the coarse grid mapped into the fine frame
    /// (for optional pixel supervision).
    coarse_features: Tensor,
    low_res_tensor: Tensor,
}

/// Mutable state of one training run.
pub struct TrainState {
    pub config: TrainConfig,
    pub encoding: FourierEncoding,
    pub nets: Networks,
    pub adam_g: AdamState,
    pub adam_d: Option<AdamState>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossReport>,
    setup: TaskSetup,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TrainState(step={}, history={} rows)", self.step, self.history.len())
    }
}

// ── Batch sampling ───────────────────────────────────────────────────────────

/// Uniform sample of `batch_size` distinct coordinates over the whole H×W
/// grid (hole coordinates included; they feed the consistency and adversarial
/// terms and are masked out of the reconstruction terms).
pub fn sample_batch(
    grid_h: usize,
    grid_w: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CoordinateBatch> {
    let total = grid_h * grid_w;
    if batch_size == 0 || batch_size > total {
        return Err(KnitworkError::contract(format!(
            "batch_size {batch_size} outside [1, {total}] for a {grid_h}×{grid_w} grid"
        )));
    }
    let picks = rand::seq::index::sample(rng, total, batch_size);
    let indices = picks.iter().map(|i| (i / grid_w, i % grid_w)).collect();
    CoordinateBatch::from_indices(grid_h, grid_w, indices)
}

// ── Training ─────────────────────────────────────────────────────────────────

impl TrainState {
    /// Builds networks, optimizer state and task caches. Deterministic given
    /// `config.seed`: the encoding seed, weight init and batch stream all
    /// derive from one ChaCha stream in fixed order.
    pub fn new(task: TaskContext, mut config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc_seed: u64 = rng.gen();
        let encoding = FourierEncoding::new(config.num_frequencies, config.sigma_pe, enc_seed)?;

        let setup = Self::build_setup(&task, &config, &encoding)?;
        config.batch_size = config.batch_size.min(setup.grid_h * setup.grid_w);

        let stack_len = config.patch_spec.stack_len(setup.channels);
        let mut net_cfg = NetConfig::new(encoding.feature_dim(), stack_len, setup.channels);
        net_cfg.hidden = config.hidden_width;
        net_cfg.recon_hidden = config.recon_width;
        net_cfg.disc_hidden = config.disc_width;
        net_cfg.leaky_slope = config.leaky_slope;

        let nets = if config.patch_output {
            Networks {
                patch_mlp: Some(PatchMlp::new(&net_cfg, &mut rng)),
                reconstructor: Some(Reconstructor::new(&net_cfg, &mut rng)),
                discriminator: if config.adversarial { Some(PatchDiscriminator::new(&net_cfg, &mut rng)) } else { None },
                baseline: None,
                kernel: match setup.sr.as_ref() {
                    Some(sr) if matches!(sr.kernel_mode, KernelMode::Learned) => {
                        Some(DeepLinearKernel::new(sr.factor)?)
                    }
                    _ => None,
                },
            }
        } else {
            Networks {
                patch_mlp: None,
                reconstructor: None,
                discriminator: None,
                baseline: Some(BaselineMlp::new(&net_cfg, &mut rng)),
                kernel: None,
            }
        };

        let adam_g = AdamState::new(&nets.generator_params(), config.lr_g);
        let adam_d = if nets.discriminator.is_some() {
            Some(AdamState::new(&nets.discriminator_params(), config.lr_d))
        } else {
            None
        };

        Ok(TrainState { config, encoding, nets, adam_g, adam_d, step: 0, rng, history: Vec::new(), setup })
    }

    fn build_setup(task: &TaskContext, config: &TrainConfig, encoding: &FourierEncoding) -> Result<TaskSetup> {
        let shift_map = ShiftMap::build(&config.patch_spec);
        match task {
            TaskContext::Fit { image } => Ok(TaskSetup {
                grid_h: image.height(),
                grid_w: image.width(),
                channels: image.channels(),
                extractor: PatchExtractor::new(image, &config.patch_spec)?,
                source: image.clone(),
                known_mask: None,
                shift_map,
                sr: None,
            }),
            TaskContext::Inpaint { image, known_mask } => {
                if known_mask.height() != image.height() || known_mask.width() != image.width() {
                    return Err(KnitworkError::dimension(
                        "inpaint",
                        format!(
                            "mask {}×{} vs image {}×{}",
                            known_mask.height(), known_mask.width(), image.height(), image.width()
                        ),
                    ));
                }
                if known_mask.data().iter().all(|&v| v == 0.0) {
                    return Err(KnitworkError::contract("inpaint: hole covers the entire image".to_string()));
                }
                Ok(TaskSetup {
                    grid_h: image.height(),
                    grid_w: image.width(),
                    channels: image.channels(),
                    extractor: PatchExtractor::new(image, &config.patch_spec)?,
                    source: image.clone(),
                    known_mask: Some(known_mask.clone()),
                    shift_map,
                    sr: None,
                })
            }
            TaskContext::SuperRes { low_res, factor, kernel } => {
                if *factor < 2 {
                    return Err(KnitworkError::contract(format!("SR factor must be >= 2, got {factor}")));
                }
                let (fh, fw) = (low_res.height() * factor, low_res.width() * factor);
                let fine = CoordinateBatch::full_grid(fh, fw);
                let fine_features = encoding.encode(&fine)?;
                // Coarse pixel centers live at the same normalized positions
                // in the shared [0,1]² frame.
                let coarse = CoordinateBatch::full_grid(low_res.height(), low_res.width());
                let coarse_features = encoding.encode(&coarse)?;
                Ok(TaskSetup {
                    grid_h: fh,
                    grid_w: fw,
                    channels: low_res.channels(),
                    extractor: PatchExtractor::new(low_res, &config.patch_spec)?,
                    source: low_res.clone(),
                    known_mask: None,
                    shift_map,
                    sr: Some(SrSetup {
                        factor: *factor,
                        kernel_mode: kernel.clone(),
                        fine_features,
                        coarse_features,
                        low_res_tensor: low_res.to_tensor(),
                    }),
                })
            }
        }
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.setup.grid_h, self.setup.grid_w)
    }

    pub fn channels(&self) -> usize {
        self.setup.channels
    }

    /// Pixel values of the source image at batch coordinates, `[N × C]`.
    fn source_pixels(&self, batch: &CoordinateBatch) -> Tensor {
        let c = self.setup.channels;
        let mut data = Vec::with_capacity(batch.len() * c);
        for &(y, x) in &batch.pixel_indices {
            data.extend_from_slice(self.setup.source.pixel(y, x));
        }
        Tensor::from_vec(vec![batch.len(), c], data).expect("sized pixels")
    }

    /// Known-pixel row mask expanded to channels, or None when fully known.
    fn known_row_mask(&self, batch: &CoordinateBatch) -> Option<Tensor> {
        let mask = self.setup.known_mask.as_ref()?;
        let c = self.setup.channels;
        let mut data = Vec::with_capacity(batch.len() * c);
        for &(y, x) in &batch.pixel_indices {
            let v = mask.get(y, x, 0);
            for _ in 0..c {
                data.push(v);
            }
        }
        Some(Tensor::from_vec(vec![batch.len(), c], data).expect("sized mask"))
    }

    // ── Generator step ───────────────────────────────────────────────────────

    /// One generator update on `batch`; returns the per-term loss report
    /// (`disc_bce` left at 0, filled by the caller).
    pub fn generator_step(&mut self, batch: &CoordinateBatch) -> Result<LossReport> {
        if !self.config.patch_output {
            return self.baseline_step(batch);
        }
        let report = if self.setup.sr.is_some() { self.sr_generator_step()? } else { self.knit_generator_step(batch)? };
        if !report.is_finite() {
            return Err(self.nonfinite_abort(batch, &report));
        }
        Ok(report)
    }

    /// Conventional coordinate MLP update: masked pixel MSE only.
    fn baseline_step(&mut self, batch: &CoordinateBatch) -> Result<LossReport> {
        let baseline = self.nets.baseline.clone().expect("baseline path");
        let feats = self.encoding.encode(batch)?;
        let colors = baseline.forward(&feats)?;
        let target = self.source_pixels(batch);
        let sq = colors.sub(&target)?.square();
        let (masked, count) = match self.known_row_mask(batch) {
            Some(m) => {
                let count = m.with_data(|d| d.iter().sum::<f64>());
                (sq.mul(&m)?, count)
            }
            None => {
                let count = sq.numel() as f64;
                (sq, count)
            }
        };
        let loss = masked.sum().mul_scalar(1.0 / count.max(1.0));
        let value = loss.item();
        if !value.is_finite() {
            let report = LossReport { pixel: value, total_g: value, ..Default::default() };
            return Err(self.nonfinite_abort(batch, &report));
        }
        let params = self.nets.generator_params();
        for p in &params {
            p.zero_grad();
        }
        loss.backward()?;
        self.adam_g.step(&params)?;
        Ok(LossReport { pixel: value, total_g: value, ..Default::default() })
    }

    /// Full model update on a sampled batch (fit, inpaint, denoise).
    fn knit_generator_step(&mut self, batch: &CoordinateBatch) -> Result<LossReport> {
        let patch_mlp = self.nets.patch_mlp.clone().expect("patch path");
        let reconstructor = self.nets.reconstructor.clone().expect("patch path");
        let spec = self.config.patch_spec.clone();
        let c = self.setup.channels;

        let feats = self.encoding.encode(batch)?;
        let stacks = patch_mlp.forward(&feats)?;

        // Patch reconstruction against extracted ground truth (Eq. 1 role).
        let truth = self.setup.extractor.stacks_for_batch(batch)?;
        let mask = mask_stacks_for_batch(self.setup.known_mask.as_ref(), batch, &spec, c)?;
        let recon = patch_recon_loss(&stacks, &truth, &mask)?;

        // Cross-patch consistency: each predicted element must agree with the
        // central prediction at the coordinate that element covers.
        let xpatch = if self.config.xpatch_loss {
            self.batch_cross_patch_term(&stacks, batch, &patch_mlp)?
        } else {
            Tensor::scalar(0.0)
        };

        // Reconstructed pixel color against the (known) source pixels.
        let colors = reconstructor.forward(&stacks)?;
        let target = self.source_pixels(batch);
        let row_mask = self.known_row_mask(batch);
        let pixel = pixel_loss(&colors, &target, row_mask.as_ref())?;

        let gen_bce = match (&self.nets.discriminator, self.config.adversarial) {
            (Some(disc), true) => gen_adv_loss(&disc.forward(&stacks)?, self.config.gan_form),
            _ => Tensor::scalar(0.0),
        };

        let parts = GeneratorParts { recon, xpatch, pixel, gen_bce, down: None };
        let (total, mut report) = total_generator_loss(&parts, &self.config.weights)?;
        if !report.is_finite() {
            return Ok(report); // caller converts to the abort error
        }

        let params = self.nets.generator_params();
        for p in &params {
            p.zero_grad();
        }
        total.backward()?;
        self.adam_g.step(&params)?;
        report.step = self.step;
        Ok(report)
    }

    /// Cross-patch consistency over a sampled batch. For each (sampled)
    /// element group, the partner coordinates x + f·(di,dj) are forwarded
    /// fresh within this step and their central predictions compared against
    /// this batch's element predictions; partners falling off the grid are
    /// excluded. All partner groups ride one batched forward pass.
    fn batch_cross_patch_term(
        &mut self,
        stacks: &Tensor,
        batch: &CoordinateBatch,
        patch_mlp: &PatchMlp,
    ) -> Result<Tensor> {
        let c = self.setup.channels;
        let n = batch.len();
        let (h, w) = (self.setup.grid_h, self.setup.grid_w);
        let center = self.setup.shift_map.center_element;
        let pool: Vec<_> = self.setup.shift_map.non_center_entries().copied().collect();
        let (chosen, scale): (Vec<_>, f64) =
            if self.config.xpatch_samples == 0 || self.config.xpatch_samples >= pool.len() {
                (pool.clone(), 1.0)
            } else {
                let k = self.config.xpatch_samples;
                let picks = rand::seq::index::sample(&mut self.rng, pool.len(), k);
                (picks.iter().map(|i| pool[i]).collect(), pool.len() as f64 / k as f64)
            };

        // Element (di,dj) at scale f of the stack at x covers pixel
        // x + f·(di,dj) = x - shift; gather every group's partner
        // coordinates into one forward batch.
        let mut indices = Vec::with_capacity(chosen.len() * n);
        let mut valids: Vec<Vec<f64>> = Vec::with_capacity(chosen.len());
        for entry in &chosen {
            let (dy, dx) = (-entry.shift.0, -entry.shift.1);
            let mut valid = vec![0.0; n * c];
            for (i, &(y, x)) in batch.pixel_indices.iter().enumerate() {
                let py = y as i64 + dy;
                let px = x as i64 + dx;
                if py >= 0 && py < h as i64 && px >= 0 && px < w as i64 {
                    indices.push((py as usize, px as usize));
                    valid[i * c..(i + 1) * c].fill(1.0);
                } else {
                    // Placeholder keeps the forward pass shaped; the term is
                    // masked to zero.
                    indices.push((y, x));
                }
            }
            valids.push(valid);
        }
        let partners = CoordinateBatch::from_indices_unchecked(h, w, indices);
        let partner_stacks = patch_mlp.forward(&self.encoding.encode(&partners)?)?;
        let partner_centers = partner_stacks.slice_cols(center * c, c)?;

        let mut total = Tensor::scalar(0.0);
        for (gi, entry) in chosen.iter().enumerate() {
            let partner_center = partner_centers.slice_rows(gi * n, n)?;
            let elem = stacks.slice_cols(entry.elem * c, c)?;
            let vmask = Tensor::from_vec(vec![n, c], std::mem::take(&mut valids[gi]))?;
            let term = elem.sub(&partner_center)?.square().mul(&vmask)?.sum();
            total = total.add(&term)?;
        }
        Ok(total.mul_scalar(scale))
    }

    /// Full-fine-grid generator update for super-resolution.
    fn sr_generator_step(&mut self) -> Result<LossReport> {
        let patch_mlp = self.nets.patch_mlp.clone().expect("patch path");
        let reconstructor = self.nets.reconstructor.clone().expect("patch path");
        let c = self.setup.channels;
        let (h, w) = (self.setup.grid_h, self.setup.grid_w);
        let sr = self.setup.sr.as_ref().expect("sr path");

        let stacks = patch_mlp.forward(&sr.fine_features)?;
        let xpatch = if self.config.xpatch_loss {
            cross_patch_loss(&stacks, &self.setup.shift_map, h, w, c)?
        } else {
            Tensor::scalar(0.0)
        };

        let colors = reconstructor.forward(&stacks)?;
        let sr_image = colors.reshape(vec![h, w, c])?;
        let down_img = match &sr.kernel_mode {
            KernelMode::Known(kernel) => apply_fixed_kernel_downsample(&sr_image, kernel, sr.factor)?,
            KernelMode::Learned => self.nets.kernel.as_ref().expect("learned kernel").apply(&sr_image)?,
        };
        let down = down_img.sub(&sr.low_res_tensor)?.square().mean();

        // Optional coarse-grid pixel supervision.
        let pixel = if self.config.sr_pixel_supervision {
            let coarse_stacks = patch_mlp.forward(&sr.coarse_features)?;
            let coarse_colors = reconstructor.forward(&coarse_stacks)?;
            let target = Tensor::from_vec(
                vec![self.setup.source.height() * self.setup.source.width(), c],
                self.setup.source.data().to_vec(),
            )?;
            pixel_loss(&coarse_colors, &target, None)?
        } else {
            Tensor::scalar(0.0)
        };

        // Discriminator sees a random contiguous window of fine-grid stacks.
        let gen_bce = match (&self.nets.discriminator, self.config.adversarial) {
            (Some(disc), true) => {
                let n = h * w;
                let len = self.config.batch_size.min(n);
                let start = if n > len { self.rng.gen_range(0..n - len + 1) } else { 0 };
                let window = stacks.slice_rows(start, len)?;
                gen_adv_loss(&disc.forward(&window)?, self.config.gan_form)
            }
            _ => Tensor::scalar(0.0),
        };

        let parts = GeneratorParts { recon: Tensor::scalar(0.0), xpatch, pixel, gen_bce, down: Some(down) };
        let (total, mut report) = total_generator_loss(&parts, &self.config.weights)?;
        if !report.is_finite() {
            return Ok(report);
        }
        let params = self.nets.generator_params();
        for p in &params {
            p.zero_grad();
        }
        total.backward()?;
        self.adam_g.step(&params)?;
        report.step = self.step;
        Ok(report)
    }

    // ── Discriminator step ───────────────────────────────────────────────────

    /// One discriminator update. Real patches are ground-truth stacks at
    /// batch coordinates with fully-known mask stacks (the low-res source
    /// grid for SR); fakes are detached Patch MLP predictions. Returns None
    /// when the real set is empty (step skipped).
    pub fn discriminator_step(&mut self, batch: &CoordinateBatch) -> Result<Option<f64>> {
        if self.nets.discriminator.is_none() || self.adam_d.is_none() {
            return Ok(None);
        }
        let disc = self.nets.discriminator.clone().expect("checked above");
        let patch_mlp = self.nets.patch_mlp.clone().expect("discriminator requires the patch net");
        let spec = self.config.patch_spec.clone();

        // Real set: coordinates whose whole stack is known.
        let real_batch = match (&self.setup.known_mask, self.setup.sr.as_ref()) {
            (_, Some(_)) => {
                // SR: sample the low-res grid.
                let (lh, lw) = (self.setup.source.height(), self.setup.source.width());
                sample_batch(lh, lw, self.config.batch_size.min(lh * lw), &mut self.rng)?
            }
            (None, None) => batch.clone(),
            (Some(mask), None) => {
                let mut kept = Vec::new();
                for &coord in &batch.pixel_indices {
                    let stack = crate::patching::extract_mask_stack(mask, coord, &spec)?;
                    if stack.iter().all(|&v| v == 1.0) {
                        kept.push(coord);
                    }
                }
                if kept.is_empty() {
                    eprintln!("warning: discriminator step {} skipped, no fully-known patches in batch", self.step);
                    return Ok(None);
                }
                CoordinateBatch::from_indices(self.setup.grid_h, self.setup.grid_w, kept)?
            }
        };
        let real_stacks = self.setup.extractor.stacks_for_batch(&real_batch)?;

        // Fake set: detached predictions at the batch coordinates (already a
        // fine-grid sample for SR).
        let fake_batch = batch.clone();
        let fakes = no_grad(|| -> Result<Tensor> {
            let feats = self.encoding.encode(&fake_batch)?;
            patch_mlp.forward(&feats)
        })?;

        let real_scores = disc.forward(&real_stacks)?;
        let fake_scores = disc.forward(&fakes)?;
        let loss = disc_loss(&real_scores, &fake_scores, self.config.label_smoothing)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(KnitworkError::NonFinite(format!("discriminator loss at step {}", self.step)));
        }
        let params = self.nets.discriminator_params();
        for p in &params {
            p.zero_grad();
        }
        loss.backward()?;
        self.adam_d.as_mut().expect("checked above").step(&params)?;
        Ok(Some(value))
    }

    // ── Rendering ────────────────────────────────────────────────────────────

    /// Reconstructor (or baseline) colors for an arbitrary batch, `[N × C]`,
    /// without touching gradients.
    pub fn render_batch(&self, batch: &CoordinateBatch) -> Result<Tensor> {
        no_grad(|| {
            let feats = self.encoding.encode(batch)?;
            match (&self.nets.patch_mlp, &self.nets.reconstructor, &self.nets.baseline) {
                (Some(p), Some(r), _) => r.forward(&p.forward(&feats)?),
                (_, _, Some(b)) => b.forward(&feats),
                _ => Err(KnitworkError::contract("no renderable network".to_string())),
            }
        })
    }

    /// Renders any output size by querying a denser or coarser grid.
    pub fn render_grid(&self, grid_h: usize, grid_w: usize) -> Result<ImageGrid> {
        let batch = CoordinateBatch::full_grid(grid_h, grid_w);
        let colors = self.render_batch(&batch)?;
        ImageGrid::from_unclamped(grid_h, grid_w, self.setup.channels, colors.data())
    }

    /// Renders at the training grid size.
    pub fn render(&self) -> Result<ImageGrid> {
        self.render_grid(self.setup.grid_h, self.setup.grid_w)
    }

    // ── Diagnostics ──────────────────────────────────────────────────────────

    fn nonfinite_abort(&self, batch: &CoordinateBatch, report: &LossReport) -> KnitworkError {
        let coords: Vec<_> = batch.pixel_indices.iter().take(8).collect();
        KnitworkError::NonFinite(format!(
            "non-finite loss at step {}: recon={} xpatch={} pixel={} gen_bce={} (batch of {} starting {:?})",
            self.step, report.recon, report.xpatch, report.pixel, report.gen_bce, batch.len(), coords
        ))
    }
}

/// Runs the full alternating loop: per iteration, `d_steps_per_g`
/// discriminator updates (when adversarial) then one generator update.
/// Writes the loss CSV and checkpoints into `config.out_dir` when set.
pub fn fit(task: TaskContext, config: TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(task, config)?;
    run_loop(&mut state)?;
    Ok(state)
}

/// Continues a (possibly restored) run until `config.iterations` steps.
pub fn run_loop(state: &mut TrainState) -> Result<()> {
    let started = Instant::now();
    if let Some(dir) = &state.config.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| KnitworkError::Io { path: dir.clone(), source })?;
    }
    let (h, w) = (state.setup.grid_h, state.setup.grid_w);
    let batch_size = state.config.batch_size;
    let use_disc = state.config.adversarial && state.config.patch_output && state.nets.discriminator.is_some();

    while state.step < state.config.iterations as u64 {
        state.step += 1;
        let mut disc_value = 0.0;
        if use_disc {
            for _ in 0..state.config.d_steps_per_g {
                let db = sample_batch(h, w, batch_size, &mut state.rng)?;
                if let Some(v) = state.discriminator_step(&db)? {
                    disc_value = v;
                }
            }
        }
        let gb = sample_batch(h, w, batch_size, &mut state.rng)?;
        let mut report = state.generator_step(&gb)?;
        report.step = state.step;
        report.disc_bce = disc_value;
        state.history.push(report);

        if state.config.log_every > 0 && state.step % state.config.log_every as u64 == 0 {
            println!(
                "step {:>6}  recon {:.4e}  xpatch {:.4e}  pixel {:.4e}  gen {:.4e}  disc {:.4e}  total {:.4e}  elapsed {:.1}s",
                report.step, report.recon, report.xpatch, report.pixel, report.gen_bce, report.disc_bce,
                report.total_g, started.elapsed().as_secs_f64()
            );
        }
        if state.config.checkpoint_every > 0
            && state.step % state.config.checkpoint_every as u64 == 0
            && state.config.out_dir.is_some()
        {
            let dir = state.config.out_dir.clone().unwrap();
            crate::checkpoint::save(&state_checkpoint_path(&dir, Some(state.step)), state)?;
        }
    }

    if let Some(dir) = state.config.out_dir.clone() {
        write_loss_csv(&dir.join("losses.csv"), &state.history)?;
        crate::checkpoint::save(&state_checkpoint_path(&dir, None), state)?;
    }
    Ok(())
}

fn state_checkpoint_path(dir: &std::path::Path, step: Option<u64>) -> PathBuf {
    match step {
        Some(s) => dir.join(format!("checkpoint_{s:06}.nkwk")),
        None => dir.join("checkpoint_final.nkwk"),
    }
}

pub fn write_loss_csv(path: &std::path::Path, history: &[LossReport]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| KnitworkError::Io { path: parent.to_path_buf(), source })?;
    }
    let file = std::fs::File::create(path).map_err(|source| KnitworkError::Io { path: path.to_path_buf(), source })?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>, s: String| {
        out.write_all(s.as_bytes()).map_err(|source| KnitworkError::Io { path: path.to_path_buf(), source })
    };
    write(&mut out, format!("{}\n", LossReport::CSV_HEADER))?;
    for row in history {
        write(&mut out, format!("{}\n", row.csv_row()))?;
    }
    out.flush().map_err(|source| KnitworkError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    /// Small nets and encodings keep these tests fast.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 50,
            batch_size: 128,
            num_frequencies: 32,
            hidden_width: 64,
            recon_width: 64,
            disc_width: 64,
            xpatch_samples: 4,
            lr_g: 1e-3,
            lr_d: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sample_batch_full_grid_is_every_coordinate_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(4, 5, 20, &mut rng).unwrap();
        let mut seen: Vec<_> = batch.pixel_indices.clone();
        seen.sort_unstable();
        let all: Vec<_> = (0..4).flat_map(|y| (0..5).map(move |x| (y, x))).collect();
        assert_eq!(seen, all);
        assert!(sample_batch(4, 5, 21, &mut rng).is_err());
        assert!(sample_batch(4, 5, 0, &mut rng).is_err());
    }

    #[test]
    fn sample_batch_is_deterministic_per_seed() {
        let a: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..5).map(|_| sample_batch(8, 8, 16, &mut rng).unwrap().pixel_indices).collect()
        };
        let b: Vec<_> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..5).map(|_| sample_batch(8, 8, 16, &mut rng).unwrap().pixel_indices).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_covers_every_coordinate_over_time() {
        // Coupon-collector style check: 10·(H·W/batch) steps cover the grid.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = vec![false; 64];
        for _ in 0..40 {
            for &(y, x) in &sample_batch(8, 8, 16, &mut rng).unwrap().pixel_indices {
                seen[y * 8 + x] = true;
            }
        }
        assert!(seen.iter().all(|&v| v), "uncovered coordinates remain");
    }

    #[test]
    fn one_by_one_image_trains_with_boundary_exclusion() {
        let img = ImageGrid::constant(1, 1, 1, 0.7);
        let mut cfg = tiny_config();
        cfg.batch_size = 1;
        cfg.xpatch_samples = 0; // evaluate every element group
        let mut state = TrainState::new(TaskContext::Fit { image: img }, cfg).unwrap();
        let batch = CoordinateBatch::full_grid(1, 1);
        // Snapshot predictions before the optimizer moves the weights.
        let stacks = no_grad(|| {
            let feats = state.encoding.encode(&batch).unwrap();
            state.nets.patch_mlp.as_ref().unwrap().forward(&feats).unwrap()
        });
        let d = stacks.data();
        state.step = 1;
        let report = state.generator_step(&batch).unwrap();
        // All shifted partners fall off the 1×1 grid; what remains of the
        // consistency sum is the zero-shift agreement between the scale-2/4
        // centers and the scale-1 center at the same coordinate.
        let p2 = state.config.patch_spec.patch_size * state.config.patch_spec.patch_size;
        let o = state.config.patch_spec.center_element();
        let mut expected = 0.0;
        for s in 1..state.config.patch_spec.num_scales() {
            let e = s * p2 + o;
            expected += (d[e] - d[o]) * (d[e] - d[o]);
        }
        assert!((report.xpatch - expected).abs() < 1e-9, "{} vs {}", report.xpatch, expected);
    }

    #[test]
    fn generator_step_never_touches_discriminator_weights_and_vice_versa() {
        let img = synth::natural_texture(12, 12, 1, 3);
        let mut cfg = tiny_config();
        cfg.batch_size = 32;
        let mut state = TrainState::new(TaskContext::Fit { image: img }, cfg).unwrap();

        let disc_before: Vec<Vec<f64>> = state.nets.discriminator_params().iter().map(Tensor::data).collect();
        let gb = sample_batch(12, 12, 32, &mut state.rng).unwrap();
        state.step = 1;
        state.generator_step(&gb).unwrap();
        let disc_after: Vec<Vec<f64>> = state.nets.discriminator_params().iter().map(Tensor::data).collect();
        assert_eq!(disc_before, disc_after, "generator step moved discriminator weights");

        let gen_before: Vec<Vec<f64>> = state.nets.generator_params().iter().map(Tensor::data).collect();
        let db = sample_batch(12, 12, 32, &mut state.rng).unwrap();
        state.discriminator_step(&db).unwrap().expect("real set nonempty");
        let gen_after: Vec<Vec<f64>> = state.nets.generator_params().iter().map(Tensor::data).collect();
        assert_eq!(gen_before, gen_after, "discriminator step moved generator weights");
        // Detachment contract: no gradient reached the generator.
        for p in state.nets.generator_params() {
            assert!(p.grad().is_none(), "generator picked up a gradient from the discriminator step");
        }
    }

    #[test]
    fn loss_decreases_on_a_smooth_image() {
        let img = synth::smooth_gradient(16, 16, 1);
        let mut cfg = tiny_config();
        cfg.iterations = 200;
        cfg.batch_size = 16 * 16; // full grid: low-noise objective
        cfg.xpatch_samples = 0; // all element groups: no estimator noise
        let state = fit(TaskContext::Fit { image: img }, cfg).unwrap();
        assert_eq!(state.history.len(), 200);
        let decreases = state
            .history
            .windows(2)
            .filter(|w| w[1].total_g < w[0].total_g)
            .count();
        assert!(
            decreases as f64 >= 0.8 * (state.history.len() - 1) as f64,
            "only {decreases}/199 strictly decreasing steps"
        );
        assert!(state.history.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn constant_image_fit_converges() {
        let img = ImageGrid::constant(16, 16, 1, 0.6);
        let mut cfg = tiny_config();
        cfg.iterations = 200;
        cfg.batch_size = 256;
        let state = fit(TaskContext::Fit { image: img.clone() }, cfg).unwrap();
        let out = state.render().unwrap();
        let max_err = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.02, "max abs error {max_err}");
    }

    #[test]
    fn adversarial_off_is_pure_patch_regression() {
        let img = synth::natural_texture(12, 12, 1, 5);
        let mut cfg = tiny_config();
        cfg.iterations = 10;
        cfg.adversarial = false;
        let state = fit(TaskContext::Fit { image: img }, cfg).unwrap();
        assert!(state.nets.discriminator.is_none());
        assert!(state.history.iter().all(|r| r.gen_bce == 0.0 && r.disc_bce == 0.0));
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let img = synth::natural_texture(12, 12, 1, 6);
        let mut cfg = tiny_config();
        cfg.iterations = 25;
        cfg.batch_size = 64;
        let a = fit(TaskContext::Fit { image: img.clone() }, cfg.clone()).unwrap();
        let b = fit(TaskContext::Fit { image: img }, cfg).unwrap();
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.total_g.to_bits(), rb.total_g.to_bits());
        }
        for (pa, pb) in a.nets.generator_params().iter().zip(&b.nets.generator_params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let (ia, ib) = (a.render().unwrap(), b.render().unwrap());
        assert_eq!(ia.data(), ib.data());
    }

    #[test]
    fn baseline_trajectory_is_reproducible_and_pixel_only() {
        let img = synth::natural_texture(12, 12, 1, 7);
        let mut cfg = tiny_config();
        cfg.iterations = 20;
        cfg.patch_output = false;
        let a = fit(TaskContext::Fit { image: img.clone() }, cfg.clone()).unwrap();
        let b = fit(TaskContext::Fit { image: img }, cfg).unwrap();
        assert!(a.nets.baseline.is_some() && a.nets.patch_mlp.is_none());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.total_g.to_bits(), rb.total_g.to_bits());
            assert_eq!(ra.recon, 0.0);
            assert_eq!(ra.xpatch, 0.0);
        }
    }

    #[test]
    fn render_grid_shape_contract() {
        let img = synth::natural_texture(8, 6, 3, 8);
        let mut cfg = tiny_config();
        cfg.iterations = 2;
        cfg.batch_size = 48;
        let state = fit(TaskContext::Fit { image: img }, cfg).unwrap();
        let double = state.render_grid(16, 12).unwrap();
        assert_eq!((double.height(), double.width(), double.channels()), (16, 12, 3));
        let again = state.render_grid(16, 12).unwrap();
        assert_eq!(double.data(), again.data());
    }

    #[test]
    fn discriminator_separates_texture_from_untrained_generator() {
        let img = synth::natural_texture(24, 24, 1, 9);
        let mut cfg = tiny_config();
        cfg.batch_size = 64;
        let mut state = TrainState::new(TaskContext::Fit { image: img }, cfg).unwrap();
        for i in 0..500 {
            let db = sample_batch(24, 24, 64, &mut state.rng).unwrap();
            state.step = i;
            state.discriminator_step(&db).unwrap();
        }
        // Accuracy on fresh batches.
        let batch = sample_batch(24, 24, 64, &mut state.rng).unwrap();
        let reals = state.setup.extractor.stacks_for_batch(&batch).unwrap();
        let fakes = no_grad(|| {
            let feats = state.encoding.encode(&batch).unwrap();
            state.nets.patch_mlp.as_ref().unwrap().forward(&feats).unwrap()
        });
        let disc = state.nets.discriminator.as_ref().unwrap();
        let real_scores = no_grad(|| disc.forward(&reals).unwrap());
        let fake_scores = no_grad(|| disc.forward(&fakes).unwrap());
        let real_acc = real_scores.data().iter().filter(|&&s| s > 0.5).count() as f64 / 64.0;
        let fake_acc = fake_scores.data().iter().filter(|&&s| s < 0.5).count() as f64 / 64.0;
        let acc = (real_acc + fake_acc) / 2.0;
        assert!(acc > 0.9, "discriminator accuracy {acc}");
    }

    #[test]
    fn identical_real_and_fake_sets_drive_accuracy_to_chance() {
        use crate::losses::disc_loss;
        use crate::nets::{NetConfig, PatchDiscriminator};
        let img = synth::natural_texture(16, 16, 1, 10);
        let spec = crate::patching::PatchSpec::default();
        let ex = PatchExtractor::new(&img, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut disc = PatchDiscriminator::new(&NetConfig { hidden: 64, recon_hidden: 64, disc_hidden: 64, ..NetConfig::new(64, spec.stack_len(1), 1) }, &mut rng);
        disc.net.layers.iter().for_each(|_| {});
        let mut adam = AdamState::new(&disc.params(), 1e-3);
        for _ in 0..300 {
            let batch = sample_batch(16, 16, 64, &mut rng).unwrap();
            let stacks = ex.stacks_for_batch(&batch).unwrap();
            let real_scores = disc.forward(&stacks).unwrap();
            let fake_scores = disc.forward(&stacks).unwrap();
            let loss = disc_loss(&real_scores, &fake_scores, 0.1).unwrap();
            for p in disc.params() {
                p.zero_grad();
            }
            loss.backward().unwrap();
            adam.step(&disc.params()).unwrap();
        }
        let batch = sample_batch(16, 16, 128, &mut rng).unwrap();
        let stacks = ex.stacks_for_batch(&batch).unwrap();
        let scores = no_grad(|| disc.forward(&stacks).unwrap());
        let real_acc = scores.data().iter().filter(|&&s| s > 0.5).count() as f64 / 128.0;
        let fake_acc = scores.data().iter().filter(|&&s| s < 0.5).count() as f64 / 128.0;
        let acc = (real_acc + fake_acc) / 2.0;
        assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc} strayed from chance on identical sets");
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let img = synth::natural_texture(12, 12, 1, 12);
        let mut cfg = tiny_config();
        cfg.iterations = 24;
        cfg.batch_size = 64;

        // Uninterrupted run.
        let full = fit(TaskContext::Fit { image: img.clone() }, cfg.clone()).unwrap();

        // Interrupted at step 12, checkpointed, restored, continued.
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.nkwk");
        let mut half_cfg = cfg.clone();
        half_cfg.iterations = 12;
        let half = fit(TaskContext::Fit { image: img.clone() }, half_cfg).unwrap();
        crate::checkpoint::save(&ckpt, &half).unwrap();

        let mut resumed = TrainState::new(TaskContext::Fit { image: img }, cfg).unwrap();
        crate::checkpoint::restore_into(&ckpt, &mut resumed).unwrap();
        assert_eq!(resumed.step, 12);
        run_loop(&mut resumed).unwrap();

        for (pa, pb) in full.nets.generator_params().iter().zip(&resumed.nets.generator_params()) {
            let (da, db) = (pa.data(), pb.data());
            let bits_a: Vec<u64> = da.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = db.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "resumed parameters drifted");
        }
        // The resumed history covers steps 13..=24 and matches bitwise.
        let tail = &full.history[12..];
        assert_eq!(tail.len(), resumed.history.len());
        for (ra, rb) in tail.iter().zip(&resumed.history) {
            assert_eq!(ra.total_g.to_bits(), rb.total_g.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_config() {
        let img = synth::natural_texture(8, 8, 1, 13);
        let mut cfg = tiny_config();
        cfg.iterations = 2;
        cfg.batch_size = 16;
        let state = fit(TaskContext::Fit { image: img.clone() }, cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("c.nkwk");
        crate::checkpoint::save(&ckpt, &state).unwrap();

        cfg.seed = 999;
        let mut other = TrainState::new(TaskContext::Fit { image: img }, cfg).unwrap();
        match crate::checkpoint::restore_into(&ckpt, &mut other) {
            Err(KnitworkError::Checkpoint(msg)) => assert!(msg.contains("digest")),
            other => panic!("expected digest mismatch, got {other:?}"),
        }
    }

    #[test]
    fn full_hole_batch_skips_discriminator_step() {
        let img = ImageGrid::constant(16, 16, 1, 0.5);
        let (cut, mask) = crate::imageio::cut_hole(
            &img,
            crate::imageio::HoleRect { row: 0, col: 0, height: 16, width: 8 },
        )
        .unwrap();
        let mut cfg = tiny_config();
        cfg.batch_size = 4;
        let mut state = TrainState::new(TaskContext::Inpaint { image: cut, known_mask: mask }, cfg).unwrap();
        // A batch entirely inside the hole: every mask stack has zeros.
        let batch = CoordinateBatch::from_indices(16, 16, vec![(4, 2), (5, 2), (8, 3), (9, 1)]).unwrap();
        assert_eq!(state.discriminator_step(&batch).unwrap(), None);
    }
}
