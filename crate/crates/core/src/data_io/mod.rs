//! On-disk formats, dataset manifests, per-slice preprocessing, resizing,
//! and patient-independent splits.

pub mod format;
mod manifest;
mod preprocess;
mod split;

pub use format::{decode_tensor, encode_tensor, read_mask, read_tensor, write_tensor, DType};
pub use manifest::{load_exclusions, parse_exclusions, CtSlice, DatasetManifest, ExclusionList, ManifestEntry};
pub use preprocess::{preprocess, resize, standardize, ResizeKind};
pub use split::{kfold, split, Fold, FoldPlan, SplitRatios};
