use crate::data_io::manifest::CtSlice;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(x - mean) / std` over all pixels, with the population standard
/// deviation.
pub fn standardize(image: &Tensor) -> Result<Tensor> {
    let n = image.len() as f64;
    if image.is_empty() {
        return Err(Error::Degenerate("cannot standardize an empty image".into()));
    }
    let mean = image.sum() / n;
    let var = image.data().iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Degenerate("image has zero intensity variance".into()));
    }
    Ok(image.map(|x| ((f64::from(x) - mean) / std) as f32))
}

/// Standardized `(1, H, W)` network input for a slice, or `None` when the
/// slice contains no lung tissue and should be skipped.
pub fn preprocess(slice: &CtSlice) -> Result<Option<Tensor>> {
    if !slice.has_lung() {
        return Ok(None);
    }
    let (h, w) = slice.image.dims2()?;
    standardize(&slice.image)
        .map_err(|e| match e {
            Error::Degenerate(msg) => Error::Degenerate(format!("{}/{}: {msg}", slice.patient_id, slice.slice_id)),
            other => other,
        })?
        .reshape(vec![1, h, w])
        .map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeKind {
    /// Bilinear interpolation.
    Image,
    /// Nearest neighbour; binary inputs stay binary.
    Mask,
}

/// Source coordinate of output index `i` with half-pixel centres, clamped
/// to the valid range.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    let scale = src as f64 / dst as f64;
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64)
}

pub fn resize(image: &Tensor, target: (usize, usize), kind: ResizeKind) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    let (th, tw) = target;
    if h < 2 || w < 2 || th == 0 || tw == 0 {
        return Err(Error::shape(format!(
            "cannot resize {h}x{w} to {th}x{tw}; source must be at least 2x2"
        )));
    }
    if (h, w) == target {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(th * tw);
    match kind {
        ResizeKind::Image => {
            let cols: Vec<(usize, usize, f64)> = (0..tw)
                .map(|x| {
                    let sx = source_coord(x, w, tw);
                    let x0 = sx.floor() as usize;
                    (x0, (x0 + 1).min(w - 1), sx - x0 as f64)
                })
                .collect();
            for y in 0..th {
                let sy = source_coord(y, h, th);
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let fy = sy - y0 as f64;
                for &(x0, x1, fx) in &cols {
                    let at = |r: usize, c: usize| f64::from(src[r * w + c]);
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out.push((top * (1.0 - fy) + bottom * fy) as f32);
                }
            }
        }
        ResizeKind::Mask => {
            let nearest = |i: usize, s: usize, d: usize| ((i * s + s / 2) / d).min(s - 1);
            let cols: Vec<usize> = (0..tw).map(|x| nearest(x, w, tw)).collect();
            for y in 0..th {
                let sy = nearest(y, h, th);
                out.extend(cols.iter().map(|&sx| src[sy * w + sx]));
            }
        }
    }
    Tensor::new(vec![th, tw], out)
}
