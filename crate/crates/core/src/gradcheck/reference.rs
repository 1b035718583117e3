//! Direct `f64` forward implementations of the primitives. Central
//! differences taken through these are free of the `f32` output rounding
//! that would otherwise swamp a step of 1e-3.

use crate::error::{Error, Result};
use crate::ops::{AxisGeometry, Conv2dOptions, BN_EPSILON};
use crate::tensor::Tensor;

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, opts: &Conv2dOptions) -> Result<Vec<f64>> {
    let (n, ci, h, w) = input.dims4()?;
    let (co, kci, kh, kw) = kernel.dims4()?;
    if kci != ci {
        return Err(Error::shape("reference conv channel mismatch"));
    }
    let rows = AxisGeometry::resolve(h, kh, opts)?;
    let cols = AxisGeometry::resolve(w, kw, opts)?;
    let (x, k) = (input.data(), kernel.data());
    let mut out = Vec::with_capacity(n * co * rows.output * cols.output);
    for b in 0..n {
        for o in 0..co {
            for oy in 0..rows.output {
                for ox in 0..cols.output {
                    let mut acc = 0.0f64;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * opts.stride + ky * opts.dilation) as isize - rows.pad_before as isize;
                                let ix = (ox * opts.stride + kx * opts.dilation) as isize - cols.pad_before as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                let kv = k[((o * ci + c) * kh + ky) * kw + kx];
                                acc += f64::from(xv) * f64::from(kv);
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += f64::from(bias.data()[o]);
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(out)
}

fn per_channel(input: &Tensor, mut f: impl FnMut(usize, &[usize]) -> Vec<f64>) -> Result<Vec<f64>> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let mut out = vec![0.0; input.len()];
    for ch in 0..c {
        let idx: Vec<usize> = (0..n)
            .flat_map(|b| ((b * c + ch) * plane)..((b * c + ch + 1) * plane))
            .collect();
        for (i, v) in idx.iter().zip(f(ch, &idx)) {
            out[*i] = v;
        }
    }
    Ok(out)
}

pub fn batch_norm_train(input: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Vec<f64>> {
    let x = f64s(input);
    per_channel(input, |ch, idx| {
        let m = idx.len() as f64;
        let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / m;
        let (g, b) = (f64::from(scale.data()[ch]), f64::from(shift.data()[ch]));
        idx.iter()
            .map(|&i| g * (x[i] - mean) / (var + BN_EPSILON).sqrt() + b)
            .collect()
    })
}

pub fn batch_norm_eval(
    input: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mean: &Tensor,
    var: &Tensor,
) -> Result<Vec<f64>> {
    let x = f64s(input);
    per_channel(input, |ch, idx| {
        let (g, b) = (f64::from(scale.data()[ch]), f64::from(shift.data()[ch]));
        let (m, v) = (f64::from(mean.data()[ch]), f64::from(var.data()[ch]));
        idx.iter()
            .map(|&i| g * (x[i] - m) / (v + BN_EPSILON).sqrt() + b)
            .collect()
    })
}

pub fn relu(input: &Tensor) -> Vec<f64> {
    input.data().iter().map(|&v| f64::from(v).max(0.0)).collect()
}

pub fn sigmoid(input: &Tensor) -> Vec<f64> {
    input
        .data()
        .iter()
        .map(|&v| 1.0 / (1.0 + (-f64::from(v)).exp()))
        .collect()
}

pub fn upsample2x(input: &Tensor) -> Result<Vec<f64>> {
    let (n, c, h, w) = input.dims4()?;
    let mut out = Vec::with_capacity(4 * input.len());
    for p in 0..n * c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                out.push(f64::from(input.data()[(p * h + y / 2) * w + x / 2]));
            }
        }
    }
    Ok(out)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let (n, ca, h, w) = a.dims4()?;
    let (_, cb, _, _) = b.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend(f64s(a)[i * ca * plane..(i + 1) * ca * plane].iter());
        out.extend(f64s(b)[i * cb * plane..(i + 1) * cb * plane].iter());
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f64::from(x) + f64::from(y))
        .collect()
}
