//! Dense-matching structure-from-motion refinement engine.
//!
//! Turns dense pairwise image matches into a dense, accurate 3D point cloud
//! and refined camera poses. The stages, each usable on its own:
//!
//! 1. [`matchio`] — sample dense correspondence fields with non-max
//!    suppression and filter them by bidirectional (cycle) verification.
//! 2. [`tracks`] — merge pairwise matches into feature tracks and triangulate
//!    an initial scene model.
//! 3. [`splatvis`] + [`extend`] — model scene points as 3D Gaussians and
//!    extend each track into every view where an alpha-compositing visibility
//!    query along the ray passes.
//! 4. [`refine`] — multi-view kernelized matching: a Gaussian-process
//!    coordinate embedding plus feature correlation decode per query view,
//!    regressed into refined sub-pixel track coordinates.
//! 5. [`optimize`] — robust Levenberg–Marquardt bundle adjustment with
//!    reprojection-based outlier filtering, iterated with refinement.
//!
//! [`synth`] generates deterministic synthetic scenes and dense-matcher
//! output so every stage can be checked against exhaustive oracles, and
//! [`eval`] measures accuracy/completeness and pose AUC against ground
//! truth. [`pipeline`] wires the stages together behind a flat config.
//!
//! Per-point and per-pair inner loops run on rayon when the default
//! `parallel` feature is enabled and fall back to sequential iteration
//! otherwise; results are byte-identical either way.

pub mod eval;
pub mod extend;
pub mod geometry;
pub mod matchio;
pub mod optimize;
pub mod parallel;
pub mod pipeline;
pub mod ply;
pub mod refine;
pub mod synth;
pub mod splatvis;
pub mod tracks;

pub use geometry::{CameraIntrinsics, CameraPose, GeometryError, Pixel};
pub use tracks::{Camera, ImageId, Observation, PointId, Provenance, SceneModel, Track};
