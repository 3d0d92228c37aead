//! Knitwork: internal learning on a single image with a patch-predicting
//! coordinate MLP.
//!
//! Instead of mapping a pixel coordinate to one color, the core network maps
//! each coordinate to a stack of multi-scale patches around it. Overlapping
//! stacks are knitted together by a cross-patch consistency penalty, a small
//! reconstructor MLP turns each stack back into a color, and a patch
//! discriminator keeps synthesized patches on the manifold of patches drawn
//! from the source image. The same model, reconfigured per task, performs
//! image inpainting, blind super-resolution (with a trainable deep linear
//! downsampling kernel) and denoising.
//!
//! Everything runs on a self-contained f64 tensor core with reverse-mode
//! automatic differentiation; there is no external ML runtime.
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `knitwork` binary for the equivalent command-line interface.

pub mod error;
pub mod checkpoint;
pub mod encoding;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod patching;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{KnitworkError, Result};
pub use tensor::{no_grad, AdamState, Tensor};
