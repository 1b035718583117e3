//! 2-D cross-correlation with stride, dilation and "same" padding.
//!
//! Inputs are unfolded into column tiles of `TILE` output positions and
//! multiplied against the kernel matrix. Every output element is accumulated
//! in `f64`, in `(in_channel, ky, kx)` order, and the bias is added last.
//! That is the same order a direct nested-loop convolution uses, so both
//! produce bitwise-identical results.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TILE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output size `ceil(in / stride)`; odd totals put the extra row and
    /// column at the bottom and right.
    Same,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }
}

impl Conv2dOptions {
    pub fn strided(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    pub fn dilated(dilation: usize) -> Self {
        Self {
            dilation,
            ..Self::default()
        }
    }
}

/// Resolved geometry along one spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisGeometry {
    pub input: usize,
    pub output: usize,
    pub pad_before: usize,
}

impl AxisGeometry {
    pub fn resolve(input: usize, kernel: usize, opts: &Conv2dOptions) -> Result<Self> {
        let span = opts.dilation * (kernel - 1) + 1;
        match opts.padding {
            Padding::Same => {
                let output = input.div_ceil(opts.stride);
                let needed = ((output.max(1) - 1) * opts.stride + span).saturating_sub(input);
                Ok(Self {
                    input,
                    output,
                    pad_before: needed / 2,
                })
            }
            Padding::Explicit(pad) => {
                let padded = input + 2 * pad;
                if padded < span {
                    return Err(Error::shape(format!(
                        "padded extent {padded} smaller than dilated kernel span {span}"
                    )));
                }
                Ok(Self {
                    input,
                    output: (padded - span) / opts.stride + 1,
                    pad_before: pad,
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub rows: AxisGeometry,
    pub cols: AxisGeometry,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernel: &Tensor, opts: &Conv2dOptions) -> Result<Self> {
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::Parameter(format!(
                "stride and dilation must be positive (stride {}, dilation {})",
                opts.stride, opts.dilation
            )));
        }
        let (n, c_in, h, w) = input.dims4()?;
        let [c_out, kc, kh, kw] = kernel.shape()[..] else {
            return Err(Error::shape(format!(
                "kernel must be (Cout,Cin,kh,kw), got {:?}",
                kernel.shape()
            )));
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("kernel spatial size must be positive"));
        }
        Ok(Self {
            n,
            c_in,
            c_out,
            kh,
            kw,
            stride: opts.stride,
            dilation: opts.dilation,
            rows: AxisGeometry::resolve(h, kh, opts)?,
            cols: AxisGeometry::resolve(w, kw, opts)?,
        })
    }

    fn taps(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.rows.output * self.cols.output
    }

    fn in_plane(&self) -> usize {
        self.rows.input * self.cols.input
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.rows.output, self.cols.output]
    }

    /// Input coordinate touched by output `o` through kernel tap `k`, if
    /// it lies inside the image.
    /// Output columns `ox` for which `ox * stride + offset - pad` lands
    /// inside the input row, as a half-open range.
    fn valid_cols(&self, offset: usize) -> (usize, usize) {
        let (s, pad, w) = (self.stride, self.cols.pad_before, self.cols.input);
        let lo = pad.saturating_sub(offset).div_ceil(s);
        let hi = if w + pad > offset {
            ((w + pad - offset - 1) / s + 1).min(self.cols.output)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn source_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky * self.dilation)
            .checked_sub(self.rows.pad_before)
            .filter(|&i| i < self.rows.input)
    }

    /// Splits output positions `[start, start + len)` into runs that share
    /// an output row: `(oy, first ox, count, offset within the tile)`.
    fn row_runs(&self, start: usize, len: usize) -> Vec<(usize, usize, usize, usize)> {
        let wo = self.cols.output;
        let mut runs = Vec::new();
        let mut p = start;
        while p < start + len {
            let (oy, ox) = (p / wo, p % wo);
            let count = (wo - ox).min(start + len - p);
            runs.push((oy, ox, count, p - start));
            p += count;
        }
        runs
    }

    /// Unfolds output positions `[start, start + len)` of batch item `plane`
    /// into `col`, laid out `[tap][position]` with row stride `len`.
    fn unfold(&self, plane: &[f32], start: usize, len: usize, col: &mut [f64]) {
        let runs = self.row_runs(start, len);
        let w = self.cols.input;
        let mut k = 0;
        for ci in 0..self.c_in {
            let channel = &plane[ci * self.in_plane()..(ci + 1) * self.in_plane()];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut col[k * len..(k + 1) * len];
                    let offset = kx * self.dilation;
                    let (lo, hi) = self.valid_cols(offset);
                    for &(oy, ox0, count, at) in &runs {
                        let dst = &mut row[at..at + count];
                        let Some(iy) = self.source_row(oy, ky) else {
                            dst.fill(0.0);
                            continue;
                        };
                        let src = &channel[iy * w..(iy + 1) * w];
                        for (t, slot) in dst.iter_mut().enumerate() {
                            let ox = ox0 + t;
                            *slot = if ox >= lo && ox < hi {
                                f64::from(src[ox * self.stride + offset - self.cols.pad_before])
                            } else {
                                0.0
                            };
                        }
                    }
                    k += 1;
                }
            }
        }
    }

    /// Scatter-adds a column tile back onto an input-shaped buffer.
    fn fold(&self, col: &[f64], start: usize, len: usize, plane: &mut [f64]) {
        let runs = self.row_runs(start, len);
        let w = self.cols.input;
        let mut k = 0;
        for ci in 0..self.c_in {
            let channel = &mut plane[ci * self.in_plane()..(ci + 1) * self.in_plane()];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &col[k * len..(k + 1) * len];
                    let offset = kx * self.dilation;
                    let (lo, hi) = self.valid_cols(offset);
                    for &(oy, ox0, count, at) in &runs {
                        let Some(iy) = self.source_row(oy, ky) else {
                            continue;
                        };
                        let dst = &mut channel[iy * w..(iy + 1) * w];
                        let first = lo.max(ox0);
                        let last = hi.min(ox0 + count);
                        for ox in first..last {
                            dst[ox * self.stride + offset - self.cols.pad_before] += row[at + ox - ox0];
                        }
                    }
                    k += 1;
                }
            }
        }
    }
}

/// `c[m][n] = sum_k a[m][k] * b[k][n]`, each element summed in ascending `k`.
///
/// `a` is `m x inner`, `b` is `inner x n`, `c` is `m x n`, all row-major.
fn matmul(a: &[f64], m: usize, inner: usize, b: &[f64], n: usize, c: &mut [f64]) {
    const MR: usize = 4;
    const NR: usize = 8;
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    // Column panels of `b`, each `inner x NR` and contiguous.
    let mut packed = vec![0.0f64; n_main * inner];
    for (p, panel) in packed.chunks_exact_mut(inner * NR).enumerate() {
        for (dst, brow) in panel.chunks_exact_mut(NR).zip(b.chunks_exact(n)) {
            dst.copy_from_slice(&brow[p * NR..(p + 1) * NR]);
        }
    }
    for i0 in (0..m_main).step_by(MR) {
        let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i0 + r) * inner..(i0 + r + 1) * inner]);
        for (p, panel) in packed.chunks_exact(inner * NR).enumerate() {
            let j0 = p * NR;
            let mut acc = [[0.0f64; NR]; MR];
            for (k, bk) in panel.chunks_exact(NR).enumerate() {
                for r in 0..MR {
                    let av = rows[r][k];
                    for l in 0..NR {
                        acc[r][l] += av * bk[l];
                    }
                }
            }
            for r in 0..MR {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(&acc[r]);
            }
        }
        for j in n_main..n {
            for r in 0..MR {
                let mut acc = 0.0;
                for k in 0..inner {
                    acc += rows[r][k] * b[k * n + j];
                }
                c[(i0 + r) * n + j] = acc;
            }
        }
    }
    for i in m_main..m {
        let row = &a[i * inner..(i + 1) * inner];
        let out = &mut c[i * n..(i + 1) * n];
        out.fill(0.0);
        for (k, &av) in row.iter().enumerate() {
            for (o, &bv) in out.iter_mut().zip(&b[k * n..(k + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| f64::from(x)).collect()
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {c_out} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, opts: &Conv2dOptions) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, opts)?;
    check_bias(bias, g.c_out)?;
    let taps = g.taps();
    let weights = to_f64(kernel.data());
    let plane_out = g.out_plane();
    let mut out = vec![0.0f32; g.n * g.c_out * plane_out];
    let mut col = vec![0.0f64; taps * TILE];
    let mut acc = vec![0.0f64; g.c_out * TILE];

    for n in 0..g.n {
        let plane = &input.data()[n * g.c_in * g.in_plane()..(n + 1) * g.c_in * g.in_plane()];
        let dst = &mut out[n * g.c_out * plane_out..(n + 1) * g.c_out * plane_out];
        for start in (0..plane_out).step_by(TILE) {
            let len = TILE.min(plane_out - start);
            g.unfold(plane, start, len, &mut col[..taps * len]);
            matmul(
                &weights,
                g.c_out,
                taps,
                &col[..taps * len],
                len,
                &mut acc[..g.c_out * len],
            );
            for co in 0..g.c_out {
                let b = bias.map_or(0.0, |b| f64::from(b.data()[co]));
                let src = &acc[co * len..(co + 1) * len];
                for (o, &v) in dst[co * plane_out + start..co * plane_out + start + len]
                    .iter_mut()
                    .zip(src)
                {
                    *o = (v + b) as f32;
                }
            }
        }
    }
    Tensor::new(g.output_shape().to_vec(), out)
}

pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    opts: &Conv2dOptions,
) -> Result<Conv2dGrads> {
    let g = ConvGeometry::new(input, kernel, opts)?;
    if grad_out.shape() != g.output_shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            grad_out.shape(),
            g.output_shape()
        )));
    }
    let taps = g.taps();
    let plane_out = g.out_plane();
    let plane_in = g.c_in * g.in_plane();

    // transposed kernel, taps x c_out
    let mut weights_t = vec![0.0f64; taps * g.c_out];
    for co in 0..g.c_out {
        for k in 0..taps {
            weights_t[k * g.c_out + co] = f64::from(kernel.data()[co * taps + k]);
        }
    }

    let mut grad_kernel = vec![0.0f64; g.c_out * taps];
    let mut grad_bias = vec![0.0f64; g.c_out];
    let mut grad_input = vec![0.0f32; g.n * plane_in];
    let mut col = vec![0.0f64; taps * TILE];
    let mut gtile = vec![0.0f64; g.c_out * TILE];
    let mut gcol = vec![0.0f64; taps * TILE];
    let mut col_t = vec![0.0f64; TILE * taps];
    let mut kernel_tile = vec![0.0f64; g.c_out * taps];
    let mut gin = vec![0.0f64; plane_in];

    for n in 0..g.n {
        let plane = &input.data()[n * plane_in..(n + 1) * plane_in];
        let upstream = &grad_out.data()[n * g.c_out * plane_out..(n + 1) * g.c_out * plane_out];
        gin.fill(0.0);
        for start in (0..plane_out).step_by(TILE) {
            let len = TILE.min(plane_out - start);
            g.unfold(plane, start, len, &mut col[..taps * len]);
            for co in 0..g.c_out {
                let src = &upstream[co * plane_out + start..co * plane_out + start + len];
                for (d, &s) in gtile[co * len..(co + 1) * len].iter_mut().zip(src) {
                    *d = f64::from(s);
                }
            }
            let gtile = &gtile[..g.c_out * len];
            let col = &col[..taps * len];

            for co in 0..g.c_out {
                grad_bias[co] += gtile[co * len..(co + 1) * len].iter().sum::<f64>();
            }
            let col_t = &mut col_t[..len * taps];
            for k in 0..taps {
                for (t, &v) in col[k * len..(k + 1) * len].iter().enumerate() {
                    col_t[t * taps + k] = v;
                }
            }
            matmul(gtile, g.c_out, len, col_t, taps, &mut kernel_tile);
            for (acc, v) in grad_kernel.iter_mut().zip(&kernel_tile) {
                *acc += v;
            }

            matmul(&weights_t, taps, g.c_out, gtile, len, &mut gcol[..taps * len]);
            g.fold(&gcol[..taps * len], start, len, &mut gin);
        }
        for (d, &s) in grad_input[n * plane_in..(n + 1) * plane_in].iter_mut().zip(&gin) {
            *d = s as f32;
        }
    }

    Ok(Conv2dGrads {
        input: Tensor::new(input.shape().to_vec(), grad_input)?,
        kernel: Tensor::new(kernel.shape().to_vec(), grad_kernel.iter().map(|&x| x as f32).collect())?,
        bias: Tensor::new(vec![g.c_out], grad_bias.iter().map(|&x| x as f32).collect())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = AxisGeometry::resolve(4, 3, &Conv2dOptions::strided(2)).unwrap();
        assert_eq!((g.output, g.pad_before), (2, 0));
        let g = AxisGeometry::resolve(5, 3, &Conv2dOptions::strided(2)).unwrap();
        assert_eq!((g.output, g.pad_before), (3, 1));
        let g = AxisGeometry::resolve(9, 3, &Conv2dOptions::dilated(4)).unwrap();
        assert_eq!((g.output, g.pad_before), (9, 4));
    }

    #[test]
    fn explicit_padding_geometry() {
        let opts = Conv2dOptions {
            padding: Padding::Explicit(0),
            ..Default::default()
        };
        let g = AxisGeometry::resolve(5, 3, &opts).unwrap();
        assert_eq!(g.output, 3);
        assert!(AxisGeometry::resolve(2, 3, &opts).is_err());
    }

    #[test]
    fn matmul_remainders() {
        // 5x3 times 3x11 exercises both remainder paths.
        let a: Vec<f64> = (0..15).map(|x| x as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..33).map(|x| (x as f64).sin()).collect();
        let mut c = vec![0.0; 55];
        matmul(&a, 5, 3, &b, 11, &mut c);
        for i in 0..5 {
            for j in 0..11 {
                let mut want = 0.0;
                for k in 0..3 {
                    want += a[i * 3 + k] * b[k * 11 + j];
                }
                assert_eq!(c[i * 11 + j], want);
            }
        }
    }

    #[test]
    fn rejects_zero_stride_and_dilation() {
        let x = Tensor::zeros(vec![1, 1, 4, 4]);
        let k = Tensor::zeros(vec![1, 1, 3, 3]);
        for opts in [Conv2dOptions::strided(0), Conv2dOptions::dilated(0)] {
            assert!(matches!(conv2d(&x, &k, None, &opts), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::zeros(vec![1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, None, &Conv2dOptions::default()),
            Err(Error::Shape(_))
        ));
    }
}
