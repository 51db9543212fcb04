//! Face completion under structured mesh occlusions.
//!
//! A MeshFace (domain X) is disentangled by the network `G` into a clean
//! face (domain Y) and a mesh (domain Z); the fusing network `F` maps a
//! (clean face, mesh) pair back to a MeshFace. Both are trained without
//! paired data against three domain discriminators.
//!
//! Module map:
//! - [`image`]: image tensors, PNG I/O, eye alignment, augmentation, toy faces
//! - [`mesh`]: mesh pattern synthesis and MeshFace blending
//! - [`nn`]: a small CPU autograd engine (tensors, tape, Adam)
//! - [`model`]: generators, discriminators, latent arithmetic, checkpoints
//! - [`losses`]: adversarial and cycle-consistency objectives
//! - [`train`]: unpaired sampling, learning-rate schedule, the training loop
//! - [`metrics`]: PSNR, SSIM, ROC, TPR@FPR and the verification protocol
//! - [`data`]: corpus generation and directory ingestion

pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use rng::SeededRng;
