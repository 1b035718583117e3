//! Differentiable primitives: forward and backward as pure functions.
//!
//! The [`crate::autograd::Tape`] records these and replays the backward
//! functions in reverse order.

mod conv;
mod norm;

pub use conv::{conv2d, conv2d_backward, AxisGeometry, Conv2dGrads, Conv2dOptions, Padding};
pub use norm::{
    batch_norm_eval, batch_norm_eval_backward, batch_norm_train, batch_norm_train_backward, BatchNormGrads,
    BatchNormSaved, BatchStats, BN_EPSILON, BN_MOMENTUM,
};

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Tensor};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    ensure_same_shape(input, grad_out, "relu backward")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

fn logistic(x: f32) -> f32 {
    // Split by sign so exp never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(logistic)
}

/// Backward through a sigmoid given its *output*.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    ensure_same_shape(output, grad_out, "sigmoid backward")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (1.0 - y))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * h2 * w2];
    if out.is_empty() {
        return Tensor::new(vec![n, c, h2, w2], out);
    }
    for (plane, dst) in input.data().chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            let src_row = &plane[(y / 2) * w..(y / 2) * w + w];
            for x in 0..w2 {
                dst[y * w2 + x] = src_row[x / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

/// Sums each 2x2 block of the upstream gradient.
pub fn upsample2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = grad_out.dims4()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape(format!(
            "upsample gradient {:?} has odd spatial size",
            grad_out.shape()
        )));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0f32; n * c * h * w];
    if out.is_empty() {
        return Tensor::new(vec![n, c, h, w], out);
    }
    for (src, dst) in grad_out.data().chunks(h2 * w2).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let a = src[2 * y * w2 + 2 * x];
                let b = src[2 * y * w2 + 2 * x + 1];
                let c = src[(2 * y + 1) * w2 + 2 * x];
                let d = src[(2 * y + 1) * w2 + 2 * x + 1];
                dst[y * w + x] = (a + b) + (c + d);
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Channel-wise concatenation, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat needs equal batch and spatial dims, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// Splits a concatenated gradient back into the `(a, b)` operand gradients.
pub fn split_channels(grad_out: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = grad_out.dims4()?;
    if ca > c {
        return Err(Error::shape(format!("cannot split {ca} channels from {c}")));
    }
    let cb = c - ca;
    let plane = h * w;
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * cb * plane);
    for i in 0..n {
        let item = &grad_out.data()[i * c * plane..(i + 1) * c * plane];
        a.extend_from_slice(&item[..ca * plane]);
        b.extend_from_slice(&item[ca * plane..]);
    }
    Ok((Tensor::new(vec![n, ca, h, w], a)?, Tensor::new(vec![n, cb, h, w], b)?))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = t(&[3], &[0.1, 5.0, 2.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn sigmoid_values() {
        let y = sigmoid(&t(&[3], &[0.0, 30.0, -30.0]));
        assert_eq!(y.data()[0], 0.5);
        assert!(y.data()[1] > 0.9999);
        assert!(y.data()[2] > 0.0 && y.data()[2] < 1e-12);
    }

    #[test]
    fn upsample_replicates() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = upsample2x(&x).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let g = upsample2x_backward(&Tensor::full(vec![1, 1, 4, 4], 1.0)).unwrap();
        assert_eq!(g.data(), &[4.0; 4]);
    }

    #[test]
    fn concat_shapes_and_split() {
        let a = Tensor::full(vec![2, 32, 3, 3], 1.0);
        let b = Tensor::full(vec![2, 128, 3, 3], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 160, 3, 3]);
        let (ga, gb) = split_channels(&c, 32).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);

        let empty = Tensor::zeros(vec![2, 0, 3, 3]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert_eq!(concat_channels(&empty, &a).unwrap(), a);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(vec![1, 1, 4, 4]);
        let b = Tensor::zeros(vec![1, 1, 4, 2]);
        assert!(matches!(concat_channels(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn add_identity_and_mismatch() {
        let a = t(&[2], &[1.0, 2.0]);
        assert_eq!(add(&a, &Tensor::zeros(vec![2])).unwrap(), a);
        assert_eq!(add(&a, &t(&[2], &[3.0, 4.0])).unwrap().data(), &[4.0, 6.0]);
        assert!(add(&a, &Tensor::zeros(vec![3])).is_err());
    }
}
