//! Finite-difference verification of analytic gradients.
//!
//! Tape-level checks reduce the op output to a scalar `sum(w * y)` and
//! compare the tape's gradients with central differences. With
//! [`Reduction::Sum`] every weight is 1; [`Reduction::Weighted`] draws fixed
//! random weights, which is needed for ops such as batch normalization whose
//! plain sum has an identically zero gradient.
//!
//! The differences can be taken through the tape's own `f32` forward pass
//! or through an `f64` reference forward from [`reference`]; the suite uses
//! the latter for every primitive.

pub mod reference;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    focal_tversky_with_grad, hybrid_loss, weighted_bce_with_grad, LesionWeight, LossConfig, PixelProbs,
};
use crate::network::{build_model, loss_and_gradients, Mode, ModelConfig, ModelParams};
use crate::ops::{Conv2dOptions, Padding};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f32 = 1e-3;
/// Tolerance for single primitives and losses.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-3;
/// Tolerance for loss-versus-parameter checks through the whole network.
pub const NETWORK_TOLERANCE: f64 = 5e-3;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Fixed pseudo-random weights in `[0.5, 1.5)` drawn from the seed.
    Weighted(u64),
}

impl Reduction {
    fn weights(self, shape: &[usize]) -> Tensor {
        match self {
            Reduction::Sum => Tensor::full(shape.to_vec(), 1.0),
            Reduction::Weighted(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.5..1.5))
            }
        }
    }
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Largest relative error per checked input, in input order.
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error.iter().all(|e| *e < self.tolerance)
    }
}

fn reduce(value: &Tensor, weights: &Tensor) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite("gradient check produced a non-finite output".into()));
    }
    Ok(value
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&y, &w)| f64::from(y) * f64::from(w))
        .sum())
}

fn reduce_f64(value: &[f64], weights: &Tensor) -> Result<f64> {
    if value.len() != weights.len() {
        return Err(Error::shape(format!(
            "reference produced {} values for {} outputs",
            value.len(),
            weights.len()
        )));
    }
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient check produced a non-finite output".into()));
    }
    Ok(value.iter().zip(weights.data()).map(|(&y, &w)| y * f64::from(w)).sum())
}

/// Central difference of `f` at element `i` of `inputs[k]`. The step is the
/// actual distance between the two perturbed `f32` values.
fn central_difference(
    inputs: &mut [Tensor],
    k: usize,
    i: usize,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<f64> {
    let x = inputs[k].data()[i];
    let plus = x + FD_STEP;
    let minus = x - FD_STEP;
    inputs[k].data_mut()[i] = plus;
    let fp = f(inputs)?;
    inputs[k].data_mut()[i] = minus;
    let fm = f(inputs)?;
    inputs[k].data_mut()[i] = x;
    Ok((fp - fm) / (f64::from(plus) - f64::from(minus)))
}

/// `f64` forward used for the numeric side of a check; returns the output
/// values in the tape output's layout.
pub type ReferenceFn<'a> = &'a dyn Fn(&[Tensor]) -> Result<Vec<f64>>;

/// Perturbs analytic gradients before comparison, so tests can confirm a
/// broken backward rule is caught.
pub type Corruption<'a> = &'a dyn Fn(&mut [Tensor]);

/// Checks a closure built from tape primitives.
///
/// `build` receives the tape and one leaf per input and returns the output
/// node. Without a `reference`, central differences go through `build`
/// itself.
pub fn grad_check<F>(
    name: &str,
    build: F,
    reference: Option<ReferenceFn<'_>>,
    inputs: &[Tensor],
    tolerance: f64,
    reduction: Reduction,
    corrupt: Option<Corruption<'_>>,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let evaluate = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        Ok((tape, leaves, out))
    };

    let (tape, leaves, out) = evaluate(inputs)?;
    let weights = reduction.weights(tape.value(out).shape());
    reduce(tape.value(out), &weights)?;
    let grads = tape.backward(out, weights.clone())?;
    let mut analytic: Vec<Tensor> = (0..inputs.len())
        .map(|k| {
            grads
                .get(leaves[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()))
        })
        .collect();
    if let Some(c) = corrupt {
        c(&mut analytic);
    }

    let mut work = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut worst: f64 = 0.0;
        for i in 0..inputs[k].len() {
            let numeric = central_difference(&mut work, k, i, |xs| match reference {
                Some(r) => reduce_f64(&r(xs)?, &weights),
                None => {
                    let (t, _, o) = evaluate(xs)?;
                    reduce(t.value(o), &weights)
                }
            })?;
            worst = worst.max(relative_error(f64::from(analytic[k].data()[i]), numeric));
        }
        max_rel_error.push(worst);
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error,
        tolerance,
    })
}

/// Checks a scalar function that returns its own gradient.
pub fn check_scalar<F>(
    name: &str,
    f: F,
    x: &Tensor,
    tolerance: f64,
    corrupt: Option<Corruption<'_>>,
) -> Result<CheckReport>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let (value, grad) = f(x)?;
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!("{name}: non-finite value or gradient")));
    }
    let mut analytic = vec![grad];
    if let Some(c) = corrupt {
        c(&mut analytic);
    }
    let mut work = vec![x.clone()];
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let numeric = central_difference(&mut work, 0, i, |xs| {
            let (v, _) = f(&xs[0])?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name}: non-finite value")));
            }
            Ok(v)
        })?;
        worst = worst.max(relative_error(f64::from(analytic[0].data()[i]), numeric));
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error: vec![worst],
        tolerance,
    })
}

/// Settings for [`check_network`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkCheck {
    /// Number of scalar parameters to check.
    pub count: usize,
    pub seed: u64,
    /// Only parameters whose analytic gradient has at least this magnitude
    /// are sampled; smaller ones sit below the `f32` noise floor of the
    /// loss.
    pub min_grad: f64,
    pub l2: f64,
}

impl Default for NetworkCheck {
    fn default() -> Self {
        Self {
            count: 20,
            seed: 0,
            min_grad: 1e-2,
            l2: 1e-4,
        }
    }
}

/// Loss-versus-parameter check through the whole network in training mode.
///
/// A sampled parameter is redrawn when its forward and backward one-sided
/// differences disagree by more than 0.2%: a ReLU kink then lies inside the
/// difference interval and no finite difference is meaningful there.
pub fn check_network(
    params: &ModelParams,
    image: &Tensor,
    mask: &Tensor,
    loss: &LossConfig,
    opts: &NetworkCheck,
) -> Result<CheckReport> {
    let total =
        |p: &ModelParams| -> Result<f64> { Ok(loss_and_gradients(p, image, mask, loss, opts.l2, Mode::Train)?.total) };
    let step = loss_and_gradients(params, image, mask, loss, opts.l2, Mode::Train)?;
    let base = step.total;
    let mut candidates = Vec::new();
    for (name, g) in &step.grads {
        for (i, &v) in g.data().iter().enumerate() {
            if f64::from(v).abs() >= opts.min_grad {
                candidates.push((name.clone(), i, f64::from(v)));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Degenerate("no parameter has a usable gradient".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut errors = Vec::with_capacity(opts.count);
    let mut kinks = 0usize;
    while errors.len() < opts.count {
        if kinks > 20 * opts.count {
            return Err(Error::Degenerate("too many parameters straddle a kink".into()));
        }
        let (name, i, analytic) = candidates[rng.gen_range(0..candidates.len())].clone();
        let x = probe.tensor(&name)?.data()[i];
        let (plus, minus) = (x + FD_STEP, x - FD_STEP);
        probe.tensor_mut(&name)?.data_mut()[i] = plus;
        let fp = total(&probe)?;
        probe.tensor_mut(&name)?.data_mut()[i] = minus;
        let fm = total(&probe)?;
        probe.tensor_mut(&name)?.data_mut()[i] = x;
        let forward = (fp - base) / (f64::from(plus) - f64::from(x));
        let backward = (base - fm) / (f64::from(x) - f64::from(minus));
        if relative_error(forward, backward) > 2e-3 {
            kinks += 1;
            log::debug!("{name}[{i}]: kink inside the difference interval, redrawing");
            continue;
        }
        let numeric = (fp - fm) / (f64::from(plus) - f64::from(minus));
        errors.push(relative_error(analytic, numeric));
    }
    Ok(CheckReport {
        name: "network_loss".into(),
        max_rel_error: errors,
        tolerance: NETWORK_TOLERANCE,
    })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0f32..1.0))
}

/// Values bounded away from zero so a step of [`FD_STEP`] never crosses a
/// kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05f32..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn probabilities(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.05f32..0.95))
}

fn truth(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(shape.to_vec(), |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    // keep both classes present
    t.data_mut()[0] = 1.0;
    t.data_mut()[1] = 0.0;
    t
}

/// Names of every check in [`gradient_suite`], in run order.
pub const SUITE_CHECKS: [&str; 19] = [
    "conv2d",
    "conv2d_stride2",
    "conv2d_dilation2",
    "conv2d_dilation4",
    "conv2d_dilation8",
    "conv2d_stride2_dilation2",
    "conv2d_1x1_explicit_pad",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "upsample2x",
    "concat_channels",
    "add",
    "weighted_bce",
    "focal_tversky",
    "hybrid_loss",
    "hybrid_loss_fixed_weight",
    "network_loss",
];

/// Options for [`gradient_suite`].
#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Corrupt the analytic gradient of the named check.
    pub inject_fault: Option<String>,
    /// Skip the whole-network check.
    pub skip_network: bool,
}

fn corrupt_all(v: &mut [Tensor]) {
    for t in v.iter_mut() {
        for g in t.data_mut() {
            *g = *g * 1.05 + 0.01;
        }
    }
}

/// Runs every primitive, loss and network gradient check.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fault: Corruption<'_> = &corrupt_all;
    let corrupt_for = |name: &str| (opts.inject_fault.as_deref() == Some(name)).then_some(fault);
    let tol = PRIMITIVE_TOLERANCE;
    let mut out = Vec::new();

    let same = |stride, dilation| Conv2dOptions {
        stride,
        dilation,
        padding: Padding::Same,
    };
    let cases: [(&str, Conv2dOptions, [usize; 4], [usize; 4]); 7] = [
        ("conv2d", same(1, 1), [2, 3, 8, 8], [2, 3, 3, 3]),
        ("conv2d_stride2", same(2, 1), [2, 3, 8, 8], [2, 3, 3, 3]),
        ("conv2d_dilation2", same(1, 2), [2, 3, 8, 8], [2, 3, 3, 3]),
        ("conv2d_dilation4", same(1, 4), [2, 3, 8, 8], [2, 3, 3, 3]),
        ("conv2d_dilation8", same(1, 8), [2, 3, 8, 8], [2, 3, 3, 3]),
        ("conv2d_stride2_dilation2", same(2, 2), [1, 2, 8, 8], [2, 2, 3, 3]),
        (
            "conv2d_1x1_explicit_pad",
            Conv2dOptions {
                padding: Padding::Explicit(1),
                ..same(1, 1)
            },
            [1, 3, 6, 6],
            [2, 3, 1, 1],
        ),
    ];
    for (i, (name, o, input, kernel)) in cases.into_iter().enumerate() {
        let x = random(&input, &mut rng);
        let k = random(&kernel, &mut rng);
        let b = random(&[kernel[0]], &mut rng);
        out.push(grad_check(
            name,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), o),
            Some(&|xs: &[Tensor]| reference::conv2d(&xs[0], &xs[1], Some(&xs[2]), &o)),
            &[x, k, b],
            tol,
            Reduction::Weighted(opts.seed ^ (100 + i as u64)),
            corrupt_for(name),
        )?);
    }

    let shape = [2, 3, 4, 4];
    let x = random(&shape, &mut rng);
    let scale = Tensor::from_fn(vec![3], |_| rng.gen_range(0.5f32..1.5));
    let shift = random(&[3], &mut rng);
    out.push(grad_check(
        "batch_norm_train",
        |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2])?.0),
        Some(&|xs: &[Tensor]| reference::batch_norm_train(&xs[0], &xs[1], &xs[2])),
        &[x.clone(), scale.clone(), shift.clone()],
        tol,
        Reduction::Weighted(opts.seed ^ 200),
        corrupt_for("batch_norm_train"),
    )?);
    let rm = random(&[3], &mut rng);
    let rv = Tensor::from_fn(vec![3], |_| rng.gen_range(0.5f32..2.0));
    out.push(grad_check(
        "batch_norm_eval",
        |t, v| t.batch_norm_eval(v[0], v[1], v[2], &rm, &rv),
        Some(&|xs: &[Tensor]| reference::batch_norm_eval(&xs[0], &xs[1], &xs[2], &rm, &rv)),
        &[x, scale, shift],
        tol,
        Reduction::Weighted(opts.seed ^ 201),
        corrupt_for("batch_norm_eval"),
    )?);

    let x = away_from_zero(&shape, &mut rng);
    out.push(grad_check(
        "relu",
        |t, v| Ok(t.relu(v[0])),
        Some(&|xs: &[Tensor]| Ok(reference::relu(&xs[0]))),
        std::slice::from_ref(&x),
        tol,
        Reduction::Weighted(opts.seed ^ 300),
        corrupt_for("relu"),
    )?);
    out.push(grad_check(
        "sigmoid",
        |t, v| Ok(t.sigmoid(v[0])),
        Some(&|xs: &[Tensor]| Ok(reference::sigmoid(&xs[0]))),
        std::slice::from_ref(&x),
        tol,
        Reduction::Weighted(opts.seed ^ 301),
        corrupt_for("sigmoid"),
    )?);
    out.push(grad_check(
        "upsample2x",
        |t, v| t.upsample2x(v[0]),
        Some(&|xs: &[Tensor]| reference::upsample2x(&xs[0])),
        std::slice::from_ref(&x),
        tol,
        Reduction::Weighted(opts.seed ^ 302),
        corrupt_for("upsample2x"),
    )?);
    let y = random(&[2, 2, 4, 4], &mut rng);
    out.push(grad_check(
        "concat_channels",
        |t, v| t.concat_channels(v[0], v[1]),
        Some(&|xs: &[Tensor]| reference::concat_channels(&xs[0], &xs[1])),
        &[x.clone(), y],
        tol,
        Reduction::Weighted(opts.seed ^ 303),
        corrupt_for("concat_channels"),
    )?);
    let z = random(&shape, &mut rng);
    out.push(grad_check(
        "add",
        |t, v| t.add(v[0], v[1]),
        Some(&|xs: &[Tensor]| Ok(reference::add(&xs[0], &xs[1]))),
        &[x, z],
        tol,
        Reduction::Weighted(opts.seed ^ 304),
        corrupt_for("add"),
    )?);

    let lshape = [2, 1, 8, 8];
    let p = probabilities(&lshape, &mut rng);
    let g = truth(&lshape, &mut rng);
    let cfg = LossConfig::default();
    let as_tensor = |v: Vec<f64>| Tensor::new(lshape.to_vec(), v.into_iter().map(|x| x as f32).collect());
    out.push(check_scalar(
        "weighted_bce",
        |x| {
            let probs = PixelProbs::new(x, &g)?;
            let (v, grad) = weighted_bce_with_grad(&probs, 3.0);
            Ok((v, as_tensor(grad)?))
        },
        &p,
        tol,
        corrupt_for("weighted_bce"),
    )?);
    out.push(check_scalar(
        "focal_tversky",
        |x| {
            let probs = PixelProbs::new(x, &g)?;
            let (v, grad) = focal_tversky_with_grad(&probs, &cfg);
            Ok((v, as_tensor(grad)?))
        },
        &p,
        tol,
        corrupt_for("focal_tversky"),
    )?);
    out.push(check_scalar(
        "hybrid_loss",
        |x| {
            let l = hybrid_loss(x, &g, &cfg)?;
            Ok((l.total, l.grad))
        },
        &p,
        tol,
        corrupt_for("hybrid_loss"),
    )?);
    let fixed = LossConfig {
        lesion_weight: LesionWeight::Fixed(2.0),
        ..cfg
    };
    out.push(check_scalar(
        "hybrid_loss_fixed_weight",
        |x| {
            let l = hybrid_loss(x, &g, &fixed)?;
            Ok((l.total, l.grad))
        },
        &p,
        tol,
        corrupt_for("hybrid_loss_fixed_weight"),
    )?);

    if !opts.skip_network {
        let params = build_model(ModelConfig {
            base_width: 8,
            cpb_enabled: true,
            seed: opts.seed,
        })?;
        let image = random(&[1, 1, 32, 32], &mut rng);
        let mask = Tensor::from_fn(vec![1, 1, 32, 32], |i| {
            let (y, x) = (i / 32, i % 32);
            if (10..20).contains(&y) && (8..22).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let check = NetworkCheck {
            seed: opts.seed,
            ..NetworkCheck::default()
        };
        let mut report = check_network(&params, &image, &mask, &cfg, &check)?;
        if opts.inject_fault.as_deref() == Some("network_loss") {
            report.max_rel_error.iter_mut().for_each(|e| *e += 1.0);
        }
        out.push(report);
    }
    Ok(out)
}

/// Fixed-width table: name, status, worst relative error, per-input errors.
pub fn format_suite(reports: &[CheckReport]) -> String {
    let mut s = format!("{:<28} {:<6} {:>12}  per-input\n", "check", "status", "max_rel_err");
    for r in reports {
        let per: Vec<String> = r.max_rel_error.iter().map(|e| format!("{e:.3e}")).collect();
        let _ = writeln!(
            s,
            "{:<28} {:<6} {:>12.3e}  {}",
            r.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.worst(),
            per.join(" ")
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn linear_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let r = grad_check(
            "sum_2x",
            |t, v| t.add(v[0], v[0]),
            None,
            &[x],
            1e-4,
            Reduction::Sum,
            None,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corruption_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let k = random(&[1, 1, 3, 3], &mut rng);
        let bad = |v: &mut [Tensor]| v[0].data_mut()[0] += 0.5;
        let r = grad_check(
            "conv",
            |t, v| t.conv2d(v[0], v[1], None, Conv2dOptions::default()),
            None,
            &[x, k],
            1e-3,
            Reduction::Sum,
            Some(&bad),
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_output_fails() {
        let x = Tensor::new(vec![1], vec![f32::MAX]).unwrap();
        let r = grad_check(
            "overflow",
            |t, v| t.add(v[0], v[0]),
            None,
            &[x],
            1e-3,
            Reduction::Sum,
            None,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
