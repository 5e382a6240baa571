//! Source-free unsupervised domain adaptation for 3D nodule detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`geom`]: boxes, offset coding, NMS and the FROC hit criterion
//! - [`losses`]: contrastive, supervised detection and weighted-entropy kernels with exact gradients
//! - [`detector`]: a small two-stage 3D detector with hand-written backprop and SGD
//! - [`adapt`]: contrastive adaptation followed by teacher-student training
//! - [`froc`]: FROC evaluation with a brute-force reference
//! - [`data`]: preprocessing, patching, the synthetic domain-shift generator and on-disk formats

pub mod adapt;
pub mod data;
pub mod detector;
pub mod error;
pub mod froc;
pub mod geom;
pub mod gradcheck;
pub mod losses;

pub use error::{Error, Result};
