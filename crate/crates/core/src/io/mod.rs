pub mod config;
pub mod eval;
pub mod overlay;
pub mod records;
pub mod weights;

pub use config::{Config, EvalConfig};
pub use eval::{
    average_precision, coco_thresholds, evaluate_ap, evaluate_model, held_out_scenes, predict_scenes, ApTable,
    EvalReport,
};
pub use overlay::{load_padded_rgb, pad_rgb, render_overlay, save_overlay, save_rgb_png};
pub use records::{
    read_json, rle_decode, rle_encode, write_json, Annotation, Category, Dataset, ImageEntry, ResultRecord, Rle,
};
pub use weights::{assign_params, load_entries, load_params, read_weights, save_entries, save_params, write_weights};
