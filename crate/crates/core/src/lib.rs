//! Lesion segmentation for chest CT slices: a residual encoder-decoder
//! network with a dilated context module, trained with a hybrid weighted
//! cross-entropy and focal Tversky loss.
//!
//! The crate is self-contained: tensors, a gradient tape, the network,
//! losses, metrics, synthetic augmentation, data formats, training and the
//! batch harness behind the `covid-rate` command.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod autograd;
pub mod data_io;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod phantom;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
