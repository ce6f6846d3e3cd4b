//! Self-supervised inpainting pretraining for aerial road segmentation.
//!
//! The training pipeline has three steps:
//!
//! 1. **Inpainting.** Square clusters are cut out of unlabeled images and the
//!    model learns to reproduce the visible pixels (identity loss) and to
//!    reconstruct the hidden ones (fill loss). Cluster size grows and cluster
//!    count shrinks over the epochs following a [`masking::MaskSchedule`].
//! 2. **Guided inpainting.** The same task, but both losses are gated by the
//!    road label so only road pixels contribute.
//! 3. **Segmentation.** The output layer is restored to `K` classes and the
//!    network is fine-tuned on labels.
//!
//! Around that core sit the dataset harness ([`data`]), a reference U-Net
//! and checkpointing ([`model`]), the step orchestration ([`trainer`]) and
//! IoU evaluation ([`evaluation`]).

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod model;
pub mod plane;
pub mod pngio;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use plane::{BinaryMask, ClassMap, ImagePlane};
