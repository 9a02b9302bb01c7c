//! Learnable shape fields for 3D deep learning.
//!
//! A [`FieldGrid`](field::FieldGrid) is an `R×R×R×C` grid of features over
//! the cube `[-1, 1]^3`. Each point of a shape is embedded by gathering its
//! nearest neighbors, normalizing them into the cube around the point, and
//! max-pooling trilinear samples of the grid. Adapters extend this to
//! triangle meshes and voxel volumes, and [`pretrain`] fits the grid with
//! reconstruction, normal estimation or classification objectives.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod cli;
pub mod error;
pub mod field;
pub mod geometry;
pub mod io;
pub mod pretrain;
pub mod probes;

pub use error::{Error, Result};
