//! Multi-view reconstruction consistency (MRC) and reinforcement-learning
//! finetuning of a toy multi-view diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! - [`imgproc`]: grayscale images, square bounding boxes, image distances
//! - [`sceneworld`]: procedural voxel scenes, the orthographic renderer and
//!   controlled view distortions
//! - [`reconstructor`]: regularized least-squares voxel reconstruction
//! - [`mrc`]: the consistency metric, its reward wrapper and the distortion
//!   experiments
//! - [`nncore`]: the noise-prediction MLP with manual gradients and AdamW
//! - [`diffusion`]: noise schedule, DDIM policy, trajectory sampling and SFT
//! - [`rlft`]: advantage tracking, policy-gradient losses and the training loop

pub mod diffusion;
pub mod error;
pub mod imgproc;
pub mod mrc;
pub mod nncore;
pub mod reconstructor;
pub mod rlft;
pub mod rng;
pub mod sceneworld;

pub use error::{Error, Result};
