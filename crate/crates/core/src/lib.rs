//! Decomposes a short image sequence from a moving camera into a clean
//! background layer and an obstruction layer (reflection, fence, or
//! adherent raindrops).
//!
//! The pipeline estimates per-layer motion starting from uniform flow
//! fields at the coarsest scale, reconstructs both layers coarse-to-fine
//! with max-fused residual networks, and refines flows with a pluggable
//! dense-flow backend. Training support covers two-stage pre-training,
//! Reptile meta-learning over synthetic and real batches, and
//! per-sequence online optimization with self-supervised losses.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod geom;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod testkit;
pub mod train;

pub use error::{Error, Result};
pub use image::{FlowField, Image, ImageSequence, Mask};
