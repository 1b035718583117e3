use covid_rate_core::ops::{conv2d, conv2d_backward, Conv2dOptions, Padding};
use covid_rate_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    dilation: usize,
}

fn same_pad(input: usize, k: usize, stride: usize, dilation: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let span = dilation * (k - 1) + 1;
    let needed = ((out - 1) * stride + span).saturating_sub(input);
    (out, needed / 2)
}

/// Direct nested-loop convolution with f64 accumulation over (ci, ky, kx)
/// and the bias added last.
fn brute_force(x: &Tensor, kernel: &Tensor, bias: &Tensor, c: &Case) -> Vec<f32> {
    let (oh, ph) = same_pad(c.h, c.k, c.stride, c.dilation);
    let (ow, pw) = same_pad(c.w, c.k, c.stride, c.dilation);
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = Vec::with_capacity(c.n * c.c_out * oh * ow);
    for b in 0..c.n {
        for co in 0..c.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c.c_in {
                        for ky in 0..c.k {
                            for kx in 0..c.k {
                                let iy = (oy * c.stride + ky * c.dilation) as isize - ph as isize;
                                let ix = (ox * c.stride + kx * c.dilation) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                    continue;
                                }
                                let xv = xd[((b * c.c_in + ci) * c.h + iy as usize) * c.w + ix as usize];
                                let kv = kd[((co * c.c_in + ci) * c.k + ky) * c.k + kx];
                                acc += f64::from(xv) * f64::from(kv);
                            }
                        }
                    }
                    acc += f64::from(bias.data()[co]);
                    out.push(acc as f32);
                }
            }
        }
    }
    out
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn options(c: &Case) -> Conv2dOptions {
    Conv2dOptions {
        stride: c.stride,
        dilation: c.dilation,
        padding: Padding::Same,
    }
}

#[test]
fn ones_kernel_counts_in_bounds_taps() {
    let x = Tensor::from_fn(vec![1, 1, 5, 5], |_| 1.0);
    let k = Tensor::from_fn(vec![1, 1, 3, 3], |_| 1.0);
    let y = conv2d(&x, &k, None, &Conv2dOptions::default()).unwrap();
    let d = y.data();
    assert_eq!(d[0], 4.0);
    assert_eq!(d[2], 6.0);
    assert_eq!(d[12], 9.0);
    assert_eq!(d[24], 4.0);
}

#[test]
fn dilated_taps_skip_neighbours() {
    // A single hot pixel spreads to exactly the dilated tap positions.
    let mut x = Tensor::zeros(vec![1, 1, 9, 9]);
    x.data_mut()[4 * 9 + 4] = 1.0;
    let k = Tensor::from_fn(vec![1, 1, 3, 3], |_| 1.0);
    for dilation in [1, 2, 4] {
        let y = conv2d(&x, &k, None, &Conv2dOptions::dilated(dilation)).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let dy = (r as isize - 4).unsigned_abs();
                let dx = (c as isize - 4).unsigned_abs();
                let hit = (dy == 0 || dy == dilation) && (dx == 0 || dx == dilation);
                assert_eq!(y.data()[r * 9 + c], f32::from(u8::from(hit)), "d{dilation} ({r},{c})");
            }
        }
    }
}

#[test]
fn convolution_is_linear_in_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(vec![2, 3, 8, 8], &mut rng);
    let b = random(vec![2, 3, 8, 8], &mut rng);
    let k = random(vec![4, 3, 3, 3], &mut rng);
    let opts = Conv2dOptions::dilated(2);
    let sum = Tensor::from_fn(vec![2, 3, 8, 8], |i| 2.0 * a.data()[i] - 0.5 * b.data()[i]);
    let ya = conv2d(&a, &k, None, &opts).unwrap();
    let yb = conv2d(&b, &k, None, &opts).unwrap();
    let ys = conv2d(&sum, &k, None, &opts).unwrap();
    for i in 0..ys.len() {
        let want = 2.0 * ya.data()[i] - 0.5 * yb.data()[i];
        assert!((ys.data()[i] - want).abs() < 1e-5, "{i}");
    }
}

#[test]
fn forward_matches_brute_force_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in [1, 2] {
        for (c_in, c_out) in [(1, 1), (3, 2), (4, 4)] {
            for (h, w) in [(1, 1), (5, 7), (9, 9)] {
                for (stride, dilation) in [(1, 1), (2, 1), (1, 2), (1, 4)] {
                    let c = Case {
                        n,
                        c_in,
                        c_out,
                        h,
                        w,
                        k: 3,
                        stride,
                        dilation,
                    };
                    let x = random(vec![n, c_in, h, w], &mut rng);
                    let k = random(vec![c_out, c_in, 3, 3], &mut rng);
                    let bias = random(vec![c_out], &mut rng);
                    let y = conv2d(&x, &k, Some(&bias), &options(&c)).unwrap();
                    assert_eq!(
                        y.data(),
                        &brute_force(&x, &k, &bias, &c)[..],
                        "{n} {c_in}->{c_out} {h}x{w} s{stride} d{dilation}"
                    );
                }
            }
        }
    }
}

#[test]
fn pointwise_kernel_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = Case {
        n: 2,
        c_in: 5,
        c_out: 3,
        h: 6,
        w: 4,
        k: 1,
        stride: 1,
        dilation: 1,
    };
    let x = random(vec![2, 5, 6, 4], &mut rng);
    let k = random(vec![3, 5, 1, 1], &mut rng);
    let bias = random(vec![3], &mut rng);
    let y = conv2d(&x, &k, Some(&bias), &options(&c)).unwrap();
    assert_eq!(y.data(), &brute_force(&x, &k, &bias, &c)[..]);
}

#[test]
#[allow(clippy::needless_range_loop)]
fn backward_matches_brute_force_scatter() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (stride, dilation) in [(1, 1), (2, 1), (1, 2)] {
        let c = Case {
            n: 2,
            c_in: 3,
            c_out: 2,
            h: 7,
            w: 6,
            k: 3,
            stride,
            dilation,
        };
        let x = random(vec![2, 3, 7, 6], &mut rng);
        let k = random(vec![2, 3, 3, 3], &mut rng);
        let (oh, ph) = same_pad(c.h, 3, stride, dilation);
        let (ow, pw) = same_pad(c.w, 3, stride, dilation);
        let g = random(vec![2, 2, oh, ow], &mut rng);
        let grads = conv2d_backward(&x, &k, &g, &options(&c)).unwrap();

        let mut gx = vec![0.0f64; x.len()];
        let mut gk = vec![0.0f64; k.len()];
        let mut gb = [0.0f64; 2];
        for b in 0..2 {
            for co in 0..2 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = f64::from(g.data()[((b * 2 + co) * oh + oy) * ow + ox]);
                        gb[co] += go;
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky * dilation) as isize - ph as isize;
                                    let ix = (ox * stride + kx * dilation) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                        continue;
                                    }
                                    let xi = ((b * 3 + ci) * 7 + iy as usize) * 6 + ix as usize;
                                    let ki = ((co * 3 + ci) * 3 + ky) * 3 + kx;
                                    gx[xi] += go * f64::from(k.data()[ki]);
                                    gk[ki] += go * f64::from(x.data()[xi]);
                                }
                            }
                        }
                    }
                }
            }
        }
        let close = |got: &[f32], want: &[f64], what: &str| {
            for (i, (a, b)) in got.iter().zip(want).enumerate() {
                assert!(
                    (f64::from(*a) - b).abs() <= 1e-5 * (1.0 + b.abs()),
                    "{what}[{i}] s{stride} d{dilation}: {a} vs {b}"
                );
            }
        };
        close(grads.input.data(), &gx, "input");
        close(grads.kernel.data(), &gk, "kernel");
        close(grads.bias.data(), &gb, "bias");
    }
}
