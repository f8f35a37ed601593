//! Self-supervised scene-flow pre-training of a point-cloud backbone and its
//! reuse by a single-frame BEV detection head.
//!
//! The backbone `g` encodes one lidar frame. A scene-flow head `s` consumes
//! two encodings and is trained with nearest-neighbor and cycle-consistency
//! losses, no labels involved. A detection head `h` reuses `g` on a single
//! frame and is fine-tuned with a focal heatmap loss and Huber box
//! regression.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod pointops;

pub use error::{Error, Result};
