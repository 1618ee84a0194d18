//! Condition preparation: ROI cropping, resampling, windowing, anatomy
//! masks, one-hot stacks and sampling-time node transforms.

mod anatomy;
mod preprocess;
mod transform;

pub use anatomy::{build_anatomy_mask, extract_patch, one_hot, patch_window, AnatomyConfig, ConditionStack};
pub use preprocess::{
    crop_roi, resample_labels, resample_scalar, roi_bounds, window_denormalize, window_normalize,
};
pub use transform::{transform_condition, NodeOutcome, TransformParams, TransformReport};
