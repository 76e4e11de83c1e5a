//! Dual-modality (camera + forward-looking sonar) single-object tracking.
//!
//! The two modalities observe the same target at unrelated pixel positions,
//! so each has its own transformer stack and prediction head; the stacks
//! exchange information through spatial cross-attention modules inserted
//! after selected layers. Training runs on single-modality tracking data
//! (the sonar branch sees saliency renderings of a second frame), and the
//! evaluation kit scores each modality separately, including the
//! all-zero "target absent" output.

pub mod annotation;
pub mod backbone;
pub mod boxgeom;
pub mod config;
pub mod checkpoint;
pub mod error;
pub mod evalkit;
pub mod heads;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scam;
pub mod srst;
pub mod synth;
pub mod tracker;
pub mod train;

pub use boxgeom::{BBox, CropWindow};
pub use error::{Error, Result};
