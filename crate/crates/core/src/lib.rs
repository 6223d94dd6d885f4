//! Self-supervised object-centric representation learning toolkit.
//!
//! Learns global and per-object image representations by grouping ViT patch
//! tokens with competitive (slot) or vanilla cross attention and training
//! with matched contrastive losses in latent space. Evaluation covers
//! unsupervised segmentation (Otsu-binarized attention maps vs ground-truth
//! masks) and linear-probe VQA scored by micro-averaged average precision.

pub mod assignment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evals;
pub mod evalsuite;
pub mod graph;
pub mod grouping;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scenegen;
pub mod trainer;

pub use error::{Result, SlotError};
