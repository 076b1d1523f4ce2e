//! Anchor-free detection head: per-location class, centerness and box offsets.

mod decode;
mod head;
mod nms;

pub use decode::{decode_detections, Detection, LevelMaps};
pub use head::{location_grid, FcosHead, HeadConfig, LevelOutput};
pub use nms::nms;
