//! Anchor-based Gaussian splatting with cross-frame computation reuse.
//!
//! The pipeline renders stereo frames from a procedural anchor scene:
//! anchors are culled per view, decoded into Gaussians by a small MLP, and
//! splatted with a tile-based software rasterizer. Three optimizations sit
//! on top and can be toggled independently:
//!
//! * a decoded-Gaussian cache that only re-decodes anchors missing from
//!   recent frames, with a reuse depth driven by the observed miss rate;
//! * binocular de-redundancy, which decodes once from a unified viewpoint
//!   between the eyes and rasterizes twice;
//! * fast kernels (buffer-reusing masked decode, opacity-scaled splat
//!   extents with exact tile culling) that do not change output images.
//!
//! An elastic scheduler scales rendering workers over a shared camera queue
//! to hold a frame-rate band, in wall-clock or simulated time.
//!
//! The `examples/` directory is the guided tour: each example is a small
//! runnable program exercising one capability. The `resplat` binary wraps
//! the same library entry points as subcommands (`gen-scene`, `gen-traj`,
//! `run`, `ablate`, `compare`).

pub mod cache;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod scheduler;
pub mod stereo;

pub use error::{Error, Result};
