//! Mask branch: RoI level assignment, RoI pooling, the spatially gated mask
//! head, mask-IoU scoring, and pasting masks back onto the image.

mod assign;
mod head;
mod paste;

pub use assign::{assign_level_adaptive, assign_level_canonical, AssignConfig};
pub use head::{roi_align, sam_forward, MaskBranch, MaskConfig, MaskHead, MaskIouHead, MaskOutput, Roi};
pub use paste::{paste_mask, recalibrate_score, InstanceResult};
