use crate::data_io::{preprocess, CtSlice};
use crate::error::{Error, Result};
use crate::network::{forward, Mode, ModelParams, SPATIAL_MULTIPLE};
use crate::tensor::Tensor;

/// Produces an `(H, W)` lesion probability map per slice.
pub trait Predictor {
    fn predict(&self, slice: &CtSlice) -> Result<Tensor>;
}

/// Runs a trained network in evaluation mode.
pub struct NetworkPredictor<'a> {
    pub params: &'a ModelParams,
}

impl Predictor for NetworkPredictor<'_> {
    fn predict(&self, slice: &CtSlice) -> Result<Tensor> {
        let (h, w) = slice.image.dims2()?;
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "{}/{}: image is {h}x{w}, the network needs multiples of {SPATIAL_MULTIPLE}",
                slice.patient_id, slice.slice_id
            )));
        }
        let Some(input) = preprocess(slice)? else {
            return Ok(Tensor::zeros(vec![h, w]));
        };
        let batch = input.reshape(vec![1, 1, h, w])?;
        forward(self.params, &batch, Mode::Eval)?.reshape(vec![h, w])
    }
}

/// Returns the ground truth (or an empty mask when none is known).
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, slice: &CtSlice) -> Result<Tensor> {
        Ok(slice
            .truth_mask()
            .unwrap_or_else(|| Tensor::zeros(slice.image.shape().to_vec())))
    }
}

/// Predicts no lesion anywhere.
pub struct EmptyPredictor;

impl Predictor for EmptyPredictor {
    fn predict(&self, slice: &CtSlice) -> Result<Tensor> {
        Ok(Tensor::zeros(slice.image.shape().to_vec()))
    }
}
