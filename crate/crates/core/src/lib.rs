//! Desk-scale joint training of a one-stage detector with contrastive
//! vision-language supervision.
//!
//! The crate is organized around a fixed differentiable pipeline: a dense
//! per-cell backbone ([`nanodet`]) feeds detection heads and, through a
//! projection MLP ([`vlhead`]), a learnable text-embedding space with
//! per-class temperatures. Training ([`trainer`]) jointly optimizes detection
//! losses and a symmetric InfoNCE objective over positive cells ([`losses`]);
//! inference fuses both branches' class probabilities before NMS
//! ([`geometry`]) and is scored with VOC/COCO-style mAP ([`evalmap`]).
//! All gradients are hand-composed and contract-checked against central
//! finite differences ([`numerics`]).

pub mod error;
pub mod evalmap;
pub mod geometry;
pub mod losses;
pub mod nanodet;
pub mod numerics;
pub mod seed;
pub mod trainer;
pub mod vlhead;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection};
pub use numerics::{Matrix, ParamTensor};
