//! Differentiable multi-channel Gaussian splatting with an online
//! SLAM-style mapping loop, two-stage feature compression and
//! open-vocabulary query evaluation.
//!
//! The map is a set of 3D Gaussians, each carrying a shared mean plus
//! disentangled color-mode and language-mode parameter sets. Rendering
//! alpha-composites color, depth and a low-dimensional language code per
//! pixel; analytic gradients drive both camera tracking and map
//! optimization. A pretrained feature compressor chains with an
//! online-learned second stage so high-dimensional per-pixel features fit
//! in a handful of channels, and queries decode back for relevancy scoring
//! in 2D renders or on a fused TSDF mesh.

pub mod codec;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval2d;
pub mod eval3d;
pub mod geom;
pub mod grad;
pub mod mapper;
pub mod render;
pub mod rng;
pub mod scene;
pub mod synth;

pub use config::{OptimMode, PipelineConfig};
pub use error::{Result, SplatError};
