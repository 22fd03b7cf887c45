//! Numerical building blocks for GAN-based blind image deblurring: a dense
//! tensor type with a reverse-mode gradient tape, attention and normalization
//! blocks, three generator architectures with a PatchGAN discriminator,
//! classical and adversarial losses, PSNR/SSIM metrics, and an imaging
//! pipeline for synthesizing blurred/sharp training pairs.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod norm;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use kernels::Padding;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
