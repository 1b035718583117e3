//! Batch normalization over `(N, H, W)` per channel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the new batch statistic in the running average.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    /// Folds this batch into running statistics:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn blend_into(&self, running_mean: &mut Tensor, running_var: &mut Tensor) {
        let keep = 1.0 - BN_MOMENTUM;
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = (keep * f64::from(*r) + BN_MOMENTUM * b) as f32;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = (keep * f64::from(*r) + BN_MOMENTUM * b) as f32;
        }
    }
}

/// Intermediates kept for the training-mode backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub struct BatchNormGrads {
    pub input: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

fn check_channels(input: &Tensor, params: &[&Tensor]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    for p in params {
        if p.shape() != [c] {
            return Err(Error::shape(format!(
                "batch-norm parameter shape {:?} does not match {c} channels",
                p.shape()
            )));
        }
    }
    Ok((n, c, h * w))
}

/// Iterates over the `(batch, plane)` slices that belong to channel `ch`.
fn channel_planes(data: &[f32], n: usize, c: usize, plane: usize, ch: usize) -> impl Iterator<Item = &[f32]> {
    (0..n).map(move |i| &data[(i * c + ch) * plane..(i * c + ch + 1) * plane])
}

pub fn batch_norm_train(
    input: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
) -> Result<(Tensor, BatchNormSaved, BatchStats)> {
    let (n, c, plane) = check_channels(input, &[scale, shift])?;
    let count = (n * plane) as f64;
    let mut out = vec![0.0f32; input.len()];
    let mut normalized = vec![0.0f64; input.len()];
    let mut stats = BatchStats {
        mean: vec![0.0; c],
        var: vec![0.0; c],
    };
    let mut inv_std = vec![0.0; c];
    if count == 0.0 {
        return Ok((
            Tensor::new(input.shape().to_vec(), out)?,
            BatchNormSaved { normalized, inv_std },
            stats,
        ));
    }

    for ch in 0..c {
        let mean = channel_planes(input.data(), n, c, plane, ch)
            .flatten()
            .map(|&x| f64::from(x))
            .sum::<f64>()
            / count;
        let var = channel_planes(input.data(), n, c, plane, ch)
            .flatten()
            .map(|&x| (f64::from(x) - mean).powi(2))
            .sum::<f64>()
            / count;
        let istd = 1.0 / (var + BN_EPSILON).sqrt();
        let (g, b) = (f64::from(scale.data()[ch]), f64::from(shift.data()[ch]));
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                let xhat = (f64::from(input.data()[j]) - mean) * istd;
                normalized[j] = xhat;
                out[j] = (g * xhat + b) as f32;
            }
        }
        stats.mean[ch] = mean;
        stats.var[ch] = var;
        inv_std[ch] = istd;
    }
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        BatchNormSaved { normalized, inv_std },
        stats,
    ))
}

pub fn batch_norm_train_backward(saved: &BatchNormSaved, scale: &Tensor, grad_out: &Tensor) -> Result<BatchNormGrads> {
    let (n, c, plane) = check_channels(grad_out, &[scale])?;
    let count = (n * plane) as f64;
    let mut gin = vec![0.0f32; grad_out.len()];
    let mut gscale = vec![0.0f32; c];
    let mut gshift = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                let dy = f64::from(grad_out.data()[j]);
                sum_dy += dy;
                sum_dy_xhat += dy * saved.normalized[j];
            }
        }
        gscale[ch] = sum_dy_xhat as f32;
        gshift[ch] = sum_dy as f32;
        let g = f64::from(scale.data()[ch]);
        let k = g * saved.inv_std[ch] / count;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                let dy = f64::from(grad_out.data()[j]);
                gin[j] = (k * (count * dy - sum_dy - saved.normalized[j] * sum_dy_xhat)) as f32;
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape().to_vec(), gin)?,
        scale: Tensor::new(vec![c], gscale)?,
        shift: Tensor::new(vec![c], gshift)?,
    })
}

pub fn batch_norm_eval(
    input: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    let (n, c, plane) = check_channels(input, &[scale, shift, running_mean, running_var])?;
    let mut out = vec![0.0f32; input.len()];
    for ch in 0..c {
        let istd = 1.0 / (f64::from(running_var.data()[ch]) + BN_EPSILON).sqrt();
        let mean = f64::from(running_mean.data()[ch]);
        let (g, b) = (f64::from(scale.data()[ch]), f64::from(shift.data()[ch]));
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                out[j] = (g * (f64::from(input.data()[j]) - mean) * istd + b) as f32;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Backward for the eval-mode affine map (running statistics are constants).
pub fn batch_norm_eval_backward(
    input: &Tensor,
    scale: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let (n, c, plane) = check_channels(input, &[scale, running_mean, running_var])?;
    let mut gin = vec![0.0f32; input.len()];
    let mut gscale = vec![0.0f32; c];
    let mut gshift = vec![0.0f32; c];
    for ch in 0..c {
        let istd = 1.0 / (f64::from(running_var.data()[ch]) + BN_EPSILON).sqrt();
        let mean = f64::from(running_mean.data()[ch]);
        let g = f64::from(scale.data()[ch]);
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for i in 0..n {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                let dy = f64::from(grad_out.data()[j]);
                sum_dy += dy;
                sum_dy_xhat += dy * (f64::from(input.data()[j]) - mean) * istd;
                gin[j] = (dy * g * istd) as f32;
            }
        }
        gscale[ch] = sum_dy_xhat as f32;
        gshift[ch] = sum_dy as f32;
    }
    Ok(BatchNormGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        scale: Tensor::new(vec![c], gscale)?,
        shift: Tensor::new(vec![c], gshift)?,
    })
}
