//! Core library for in-context pixel feature learning on cue rasters.
//!
//! The crate is organised around a training pipeline that fits a closed-form
//! linear map from per-pixel features to concatenated cue rasters (depth,
//! optical flow, refined encoder features) on a *context* frame, and penalises
//! the reconstruction error of the same map on a temporally offset *query*
//! frame. Everything runs on the CPU in 64-bit arithmetic with fixed
//! reduction order, so results are bit-reproducible for a given seed.
//!
//! Modules:
//! - [`grids`]: dense raster type, crop/resample/gradient primitives and the
//!   `LGRD` on-disk format shared by every other module.
//! - [`scenes`]: synthetic sprite scenes with analytic depth and flow, noise
//!   injection, external cue ingestion and cue-stack assembly.
//! - [`pamr`]: pixel-adaptive map refinement (local-affinity mean-field
//!   iterations) run coarse to fine.
//! - [`tensor`]: a small reverse-mode tape over `f64` matrices; backs the
//!   decoder and the differentiable in-context objective.
//! - [`incontext`]: the closed-form ridge solve and the query-side loss stack.
//! - [`model`]: frozen patch encoder plus trainable multi-scale fusion decoder.
//! - [`training`]: the training loop, the per-frame distillation baseline,
//!   and checkpointing.
//! - [`probes`]: evaluation protocols (segmentation propagation, linear
//!   probes, surface normals, attention segmentation, zero-shot) and metrics.

pub mod exec;
pub mod grids;
pub mod incontext;
pub mod model;
pub mod oracles;
pub mod pamr;
pub mod probes;
pub mod scenes;
pub mod tensor;
pub mod training;
