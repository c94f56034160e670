//! Procedural corpus of articulated dancers with ground-truth flow.

mod dataset;
mod filter;
mod import;
mod render;
mod skeleton;

pub use dataset::*;
pub use filter::{filter_invalid_frames, keep_mask, ClipRecord, FilterConfig};
pub use import::{import_clip, import_dataset};
pub use render::{Renderer, POSE_CHANNELS};
pub use skeleton::*;
