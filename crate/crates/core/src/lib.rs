//! Test-time mutual adaptation of a frozen feature matcher and a frozen
//! image restorer.
//!
//! Given a degraded image and a clean reference of the same scene seen from a
//! different viewpoint, the loop in [`tta`] repeatedly estimates the
//! degraded-to-reference homography from matcher features, warps the degraded
//! image into the reference frame, restores it with adapter-modulated
//! restorer features, and updates only the zero-initialized adapter.

pub mod adapter;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod io;
pub mod optim;
pub mod params;
pub mod prior;
pub(crate) mod nn;
pub mod restorer;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use image::{FeatureMap, Image};
pub use params::{ParamRegistry, Tag};
pub use tensor::{Real, Tensor};
