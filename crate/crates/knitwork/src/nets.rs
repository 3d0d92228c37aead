//! The networks: Patch MLP, MLP Reconstructor, Patch Discriminator, the
//! conventional coordinate-MLP baseline, and the deep linear downsampling
//! kernel used for blind super-resolution.
//!
//! All are small fully-connected stacks over the tensor core. Widths default
//! to 256 everywhere; with the default 3-scale 3×3 RGB stacks this puts the
//! baseline at ~264K parameters and the full three-network model at ~524K.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KnitworkError, Result};
use crate::imageio::Kernel2d;
use crate::tensor::Tensor;

// ── Building blocks ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu(slope) => x.leaky_relu(*slope),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Identity => x.clone(),
        }
    }
}

/// Fully-connected layer: `x[N×in] · W[in×out] + b[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Kaiming-style uniform fan-in init: U(-√(6/in), √(6/in)), zero bias.
    pub fn kaiming(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim).map(|_| rng.gen_range(-limit..limit)).collect();
        Linear {
            weight: Tensor::parameter(vec![in_dim, out_dim], weight).expect("sized weight"),
            bias: Tensor::parameter(vec![out_dim], vec![0.0; out_dim]).expect("sized bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Tensor::parameter(vec![in_dim, out_dim], vec![0.0; in_dim * out_dim]).expect("sized weight"),
            bias: Tensor::parameter(vec![out_dim], vec![0.0; out_dim]).expect("sized bias"),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.linear(&self.weight, &self.bias)
    }

    pub fn parameter_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// A stack of linear layers with one activation between layers and another on
/// the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            h = if i == last { self.output_activation.apply(&h) } else { self.hidden_activation.apply(&h) };
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Linear::parameter_count).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    fn check_input(&self, x: &Tensor, what: &'static str) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(KnitworkError::dimension(
                what,
                format!("input {:?} vs expected [N, {}]", shape, self.input_dim()),
            ));
        }
        Ok(())
    }
}

// ── Network configuration ────────────────────────────────────────────────────

/// Widths and slopes for every network, all config-exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Positional-encoding feature dimension (2m).
    pub feature_dim: usize,
    /// Flattened stack length S·p²·C.
    pub stack_len: usize,
    /// Color channels C.
    pub channels: usize,
    /// Width of the Patch MLP / baseline trunk.
    pub hidden: usize,
    /// Width of the reconstructor's hidden layers.
    pub recon_hidden: usize,
    /// Width of the discriminator's hidden layers.
    pub disc_hidden: usize,
    pub leaky_slope: f64,
}

impl NetConfig {
    pub fn new(feature_dim: usize, stack_len: usize, channels: usize) -> Self {
        NetConfig {
            feature_dim,
            stack_len,
            channels,
            hidden: 256,
            recon_hidden: 256,
            disc_hidden: 256,
            leaky_slope: 0.2,
        }
    }
}

// ── The four MLPs ────────────────────────────────────────────────────────────

/// Maps Fourier features to flattened multi-scale patch stacks: 4 ReLU layers
/// of `hidden` units, sigmoid-squashed output so predicted patches are valid
/// colors.
#[derive(Debug, Clone)]
pub struct PatchMlp {
    pub net: Mlp,
}

impl PatchMlp {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let layers = vec![
            Linear::kaiming(cfg.feature_dim, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, cfg.stack_len, rng),
        ];
        PatchMlp { net: Mlp { layers, hidden_activation: Activation::Relu, output_activation: Activation::Sigmoid } }
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.net.check_input(features, "patch_mlp")?;
        self.net.forward(features)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.net.params()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }
}

/// Translates a multi-scale patch stack into one color: 2 hidden ReLU layers,
/// sigmoid output in (0,1)^C.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub net: Mlp,
}

impl Reconstructor {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.recon_hidden;
        let layers = vec![
            Linear::kaiming(cfg.stack_len, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, cfg.channels, rng),
        ];
        Reconstructor { net: Mlp { layers, hidden_activation: Activation::Relu, output_activation: Activation::Sigmoid } }
    }

    pub fn forward(&self, stacks: &Tensor) -> Result<Tensor> {
        self.net.check_input(stacks, "reconstructor")?;
        self.net.forward(stacks)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.net.params()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }
}

/// Patch confidence scorer: exactly 3 Leaky ReLU layers over a flattened
/// stack, scalar sigmoid output.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub net: Mlp,
}

impl PatchDiscriminator {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.disc_hidden;
        let layers = vec![
            Linear::kaiming(cfg.stack_len, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, 1, rng),
        ];
        PatchDiscriminator {
            net: Mlp {
                layers,
                hidden_activation: Activation::LeakyRelu(cfg.leaky_slope),
                output_activation: Activation::Sigmoid,
            },
        }
    }

    pub fn forward(&self, stacks: &Tensor) -> Result<Tensor> {
        self.net.check_input(stacks, "discriminator")?;
        self.net.forward(stacks)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.net.params()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }
}

/// Conventional coordinate MLP: same trunk as [`PatchMlp`] but mapping each
/// coordinate straight to one color.
#[derive(Debug, Clone)]
pub struct BaselineMlp {
    pub net: Mlp,
}

impl BaselineMlp {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let layers = vec![
            Linear::kaiming(cfg.feature_dim, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, h, rng),
            Linear::kaiming(h, cfg.channels, rng),
        ];
        BaselineMlp { net: Mlp { layers, hidden_activation: Activation::Relu, output_activation: Activation::Sigmoid } }
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.net.check_input(features, "baseline_mlp")?;
        self.net.forward(features)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.net.params()
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }
}

// ── Deep linear downsampling kernel ──────────────────────────────────────────

/// Spatial sizes of the linear kernel layers (effective support 13).
pub const KERNEL_LAYER_SIZES: [usize; 5] = [7, 5, 3, 1, 1];

/// A stack of bias-free linear 2-D convolutions that collapses to one
/// effective downsampling kernel. Applying the layers (symmetric padding,
/// then a final stride-`factor` subsampling) is differentiable in both the
/// image and every kernel tap, so the kernel can be learned end to end.
#[derive(Debug, Clone)]
pub struct DeepLinearKernel {
    pub layers: Vec<Tensor>,
    pub factor: usize,
}

impl DeepLinearKernel {
    /// Delta initialization: the composite kernel is an identity, so training
    /// starts from plain subsampling.
    pub fn new(factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(KnitworkError::contract(format!("SR factor must be >= 2, got {factor}")));
        }
        let layers = KERNEL_LAYER_SIZES
            .iter()
            .map(|&s| {
                let mut data = vec![0.0; s * s];
                data[(s / 2) * s + s / 2] = 1.0;
                Tensor::parameter(vec![s, s], data).expect("sized kernel")
            })
            .collect();
        Ok(DeepLinearKernel { layers, factor })
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers.clone()
    }

    pub fn parameter_count(&self) -> usize {
        KERNEL_LAYER_SIZES.iter().map(|s| s * s).sum()
    }

    /// Sequential convolutions without the final subsampling.
    pub fn apply_stride1(&self, img: &Tensor) -> Result<Tensor> {
        let mut h = img.clone();
        for k in &self.layers {
            h = h.conv2d_depthwise(k)?;
        }
        Ok(h)
    }

    /// Full downsampling path: convolutions then stride-`factor` subsampling.
    /// Input dims must be divisible by the factor.
    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        self.apply_stride1(img)?.subsample2d(self.factor)
    }

    /// Collapses all layers into the single effective kernel by convolving
    /// them together. Returns (size, row-major values).
    pub fn collapse(&self) -> (usize, Vec<f64>) {
        let mut acc = vec![1.0f64];
        let mut size = 1usize;
        for layer in &self.layers {
            let ls = layer.shape()[0];
            let ld = layer.data();
            let ns = size + ls - 1;
            let mut next = vec![0.0; ns * ns];
            for ay in 0..size {
                for ax in 0..size {
                    let av = acc[ay * size + ax];
                    if av == 0.0 {
                        continue;
                    }
                    for ly in 0..ls {
                        for lx in 0..ls {
                            next[(ay + ly) * ns + ax + lx] += av * ld[ly * ls + lx];
                        }
                    }
                }
            }
            acc = next;
            size = ns;
        }
        (size, acc)
    }
}

/// Downsampling through a fixed, known kernel (differentiable w.r.t. the
/// image only).
pub fn apply_fixed_kernel_downsample(img: &Tensor, kernel: &Kernel2d, factor: usize) -> Result<Tensor> {
    img.conv2d_depthwise(&kernel.to_tensor())?.subsample2d(factor)
}

/// Total parameter count of the three-network model.
pub fn knitwork_parameter_count(patch: &PatchMlp, recon: &Reconstructor, disc: &PatchDiscriminator) -> usize {
    patch.parameter_count() + recon.parameter_count() + disc.parameter_count()
}
