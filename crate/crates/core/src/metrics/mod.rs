//! Pixel-level segmentation metrics, infection-rate quantification and
//! slice-level discrimination statistics.
//!
//! Vacuous cases are scored as perfect: DSC is 1 when prediction and truth
//! are both empty, and SEN/SPC are 1 when their denominator is zero.

mod report;

pub use report::{format_summary, MetricsReport, SliceRow, SummaryBlock, REPORT_COLUMNS};

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slices with an infection rate below this are in group A.
pub const GROUP_THRESHOLD: f64 = 0.015;
/// Predicted infection rates above this mark a slice as infected.
pub const DISCRIMINATION_THRESHOLD: f64 = 0.005;
/// Probability cut-off when turning network output into a mask.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::validation(format!(
            "mask shapes {:?} and {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::validation("masks must be binary (0 or 1)"));
    }
    Ok(())
}

pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2 TP / (2 TP + FP + FN)`.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// `(TP / (TP + FN), TN / (TN + FP))`.
pub fn sen_spc(c: &ConfusionCounts) -> (f64, f64) {
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fn_), ratio(c.tn, c.tn + c.fp))
}

/// Mean absolute pixel difference over the whole image.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::validation(format!(
            "mask shapes {:?} and {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| f64::from((p - g).abs()))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean absolute difference restricted to pixels inside `region`.
pub fn mae_in_region(pred: &Tensor, gt: &Tensor, region: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() || region.shape() != gt.shape() {
        return Err(Error::validation("mask shapes differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&p, &g), &r) in pred.data().iter().zip(gt.data()).zip(region.data()) {
        if r != 0.0 {
            sum += f64::from((p - g).abs());
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Degenerate("evaluation region is empty".into()));
    }
    Ok(sum / n as f64)
}

/// Lesion area inside the lung divided by lung area.
pub fn infection_rate(mask: &Tensor, lung: &Tensor) -> Result<f64> {
    check_pair(mask, lung)?;
    let lung_area = lung.count_nonzero();
    if lung_area == 0 {
        return Err(Error::Degenerate("lung mask is empty".into()));
    }
    let inside = mask
        .data()
        .iter()
        .zip(lung.data())
        .filter(|(&m, &l)| m != 0.0 && l != 0.0)
        .count();
    Ok(inside as f64 / lung_area as f64)
}

pub fn binarize(probs: &Tensor, threshold: f32) -> Tensor {
    probs.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Group {
    /// Small lesion burden.
    A,
    B,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::A => "A",
            Group::B => "B",
        })
    }
}

pub fn assign_group(rate: f64) -> Group {
    assign_group_at(rate, GROUP_THRESHOLD)
}

pub fn assign_group_at(rate: f64, threshold: f64) -> Group {
    if rate < threshold {
        Group::A
    } else {
        Group::B
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Infected,
    Clean,
}

impl Verdict {
    pub fn from_label(infected: bool) -> Self {
        if infected {
            Verdict::Infected
        } else {
            Verdict::Clean
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Infected => "infected",
            Verdict::Clean => "clean",
        })
    }
}

pub fn discriminate(rate_pred: f64, threshold: f64) -> Verdict {
    Verdict::from_label(rate_pred > threshold)
}

/// Slice-level discrimination quality. Ratios with a zero denominator are
/// `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiscriminationStats {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
}

pub fn discrimination_stats(verdicts: &[Verdict], labels: &[Verdict]) -> Result<DiscriminationStats> {
    if verdicts.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} verdicts for {} labels",
            verdicts.len(),
            labels.len()
        )));
    }
    if verdicts.is_empty() {
        return Err(Error::validation("no slices to score"));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&v, &l) in verdicts.iter().zip(labels) {
        correct += usize::from(v == l);
        match (v, l) {
            (Verdict::Infected, Verdict::Infected) => tp += 1,
            (Verdict::Infected, Verdict::Clean) => fp += 1,
            (Verdict::Clean, Verdict::Infected) => fn_ += 1,
            (Verdict::Clean, Verdict::Clean) => {}
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(DiscriminationStats {
        accuracy: correct as f64 / verdicts.len() as f64,
        sensitivity: ratio(tp, tp + fn_),
        ppv: ratio(tp, tp + fp),
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::validation(format!(
            "pearson needs two equal-length sequences of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Metrics for one evaluated slice.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SliceScore {
    pub dsc: f64,
    pub sen: f64,
    pub spc: f64,
    pub mae: f64,
    pub rate_pred: f64,
    pub rate_gt: f64,
    pub group: Group,
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub group: f64,
    pub discriminate: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            group: GROUP_THRESHOLD,
            discriminate: DISCRIMINATION_THRESHOLD,
        }
    }
}

/// Scores a binary prediction against the ground truth of one slice. With
/// `lung_only_mae` the absolute error is averaged over the lung instead of
/// the whole image.
pub fn score_slice(
    pred: &Tensor,
    gt: &Tensor,
    lung: &Tensor,
    thresholds: Thresholds,
    lung_only_mae: bool,
) -> Result<SliceScore> {
    let c = confusion(pred, gt)?;
    let (sen, spc) = sen_spc(&c);
    let rate_pred = infection_rate(pred, lung)?;
    let rate_gt = infection_rate(gt, lung)?;
    Ok(SliceScore {
        dsc: dsc(&c),
        sen,
        spc,
        mae: if lung_only_mae {
            mae_in_region(pred, gt, lung)?
        } else {
            mae(pred, gt)?
        },
        rate_pred,
        rate_gt,
        group: assign_group_at(rate_gt, thresholds.group),
        verdict: discriminate(rate_pred, thresholds.discriminate),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregateMode {
    MeanStd,
    MedianIqr,
}

/// One metric summarized over slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Summary {
    MeanStd { mean: f64, std: f64 },
    MedianIqr { median: f64, q25: f64, q75: f64 },
}

/// Percentile with linear interpolation between order statistics; `q` in
/// `[0, 1]`, `sorted` ascending and non-empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summarizes one sequence of values. Standard deviation is the
/// population form.
pub fn summarize(values: &[f64], mode: AggregateMode) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::validation("cannot summarize an empty list"));
    }
    Ok(match mode {
        AggregateMode::MeanStd => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Summary::MeanStd { mean, std: var.sqrt() }
        }
        AggregateMode::MedianIqr => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            Summary::MedianIqr {
                median: percentile(&sorted, 0.5),
                q25: percentile(&sorted, 0.25),
                q75: percentile(&sorted, 0.75),
            }
        }
    })
}

/// Per-metric summaries of a set of slice scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub dsc: Summary,
    pub sen: Summary,
    pub spc: Summary,
    pub mae: Summary,
}

pub fn aggregate(scores: &[SliceScore], mode: AggregateMode) -> Result<Aggregate> {
    let col = |f: fn(&SliceScore) -> f64| scores.iter().map(f).collect::<Vec<_>>();
    Ok(Aggregate {
        count: scores.len(),
        dsc: summarize(&col(|s| s.dsc), mode)?,
        sen: summarize(&col(|s| s.sen), mode)?,
        spc: summarize(&col(|s| s.spc), mode)?,
        mae: summarize(&col(|s| s.mae), mode)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(data: &[f32]) -> Tensor {
        Tensor::new(vec![2, 2], data.to_vec()).unwrap()
    }

    #[test]
    fn confusion_enumeration() {
        let ones = mask(&[1.0; 4]);
        assert_eq!(
            confusion(&ones, &ones).unwrap(),
            ConfusionCounts {
                tp: 4,
                ..Default::default()
            }
        );

        let gt = mask(&[1.0, 0.0, 1.0, 0.0]);
        let inv = gt.map(|v| 1.0 - v);
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));

        // pred {(0,0),(0,1)}, gt {(0,1),(1,1)}
        let c = confusion(&mask(&[1.0, 1.0, 0.0, 0.0]), &mask(&[0.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!(dsc(&c), 0.5);
    }

    #[test]
    fn rejects_non_binary() {
        let a = mask(&[0.5, 0.0, 0.0, 0.0]);
        assert!(matches!(confusion(&a, &a), Err(Error::Validation(_))));
    }

    #[test]
    fn dsc_cases() {
        let a = mask(&[1.0, 1.0, 0.0, 0.0]);
        let b = mask(&[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dsc(&confusion(&a, &a).unwrap()), 1.0);
        assert_eq!(dsc(&confusion(&a, &b).unwrap()), 0.0);
        let empty = mask(&[0.0; 4]);
        assert_eq!(dsc(&confusion(&empty, &empty).unwrap()), 1.0);
    }

    #[test]
    fn sensitivity_specificity() {
        let c = ConfusionCounts {
            tp: 3,
            fn_: 1,
            tn: 5,
            fp: 1,
        };
        let (sen, spc) = sen_spc(&c);
        assert_eq!(sen, 0.75);
        assert!((spc - 5.0 / 6.0).abs() < 1e-15);

        let gt = mask(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(sen_spc(&confusion(&gt, &gt).unwrap()), (1.0, 1.0));
        assert_eq!(sen_spc(&confusion(&mask(&[1.0; 4]), &gt).unwrap()), (1.0, 0.0));
    }

    #[test]
    fn mae_cases() {
        let gt = mask(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&gt.map(|v| 1.0 - v), &gt).unwrap(), 1.0);
        assert_eq!(mae(&mask(&[1.0, 0.0, 1.0, 1.0]), &gt).unwrap(), 0.25);
        assert!(mae(&gt, &Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn infection_rate_cases() {
        let lung = Tensor::from_fn(vec![10, 20], |i| if i < 100 { 1.0 } else { 0.0 });
        let lesion = Tensor::from_fn(vec![10, 20], |i| if i < 10 { 1.0 } else { 0.0 });
        assert!((infection_rate(&lesion, &lung).unwrap() - 0.10).abs() < 1e-15);
        assert_eq!(infection_rate(&Tensor::zeros(vec![10, 20]), &lung).unwrap(), 0.0);
        let outside = Tensor::from_fn(vec![10, 20], |i| if i >= 150 { 1.0 } else { 0.0 });
        assert_eq!(infection_rate(&outside, &lung).unwrap(), 0.0);
        assert!(matches!(
            infection_rate(&lesion, &Tensor::zeros(vec![10, 20])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn threshold_rules() {
        assert_eq!(assign_group(0.010), Group::A);
        assert_eq!(assign_group(0.020), Group::B);
        assert_eq!(assign_group(0.015), Group::B);
        assert_eq!(discriminate(0.006, DISCRIMINATION_THRESHOLD), Verdict::Infected);
        assert_eq!(discriminate(0.004, DISCRIMINATION_THRESHOLD), Verdict::Clean);
        assert_eq!(discriminate(0.005, DISCRIMINATION_THRESHOLD), Verdict::Clean);
    }

    #[test]
    fn discrimination_enumeration() {
        use Verdict::*;
        let s = discrimination_stats(&[Infected, Infected, Clean, Clean], &[Infected, Clean, Infected, Clean]).unwrap();
        assert_eq!((s.accuracy, s.sensitivity, s.ppv), (0.5, Some(0.5), Some(0.5)));
        let s = discrimination_stats(&[Infected, Clean], &[Infected, Clean]).unwrap();
        assert_eq!((s.accuracy, s.sensitivity, s.ppv), (1.0, Some(1.0), Some(1.0)));
        let s = discrimination_stats(&[Clean, Clean], &[Infected, Clean]).unwrap();
        assert_eq!(s.ppv, None);
        assert!(discrimination_stats(&[], &[]).is_err());
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // cov = 1.5, sx = 1, sy = sqrt(7/3) (sample); r = 1.5 / sqrt(7/3)/... closed form 3/sqrt(28/3)
        let r = pearson(&x, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.98198).abs() < 1e-5);
        assert!(matches!(pearson(&x, &[2.0; 3]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn summaries() {
        match summarize(&[0.0, 1.0], AggregateMode::MedianIqr).unwrap() {
            Summary::MedianIqr { median, q25, q75 } => assert_eq!((median, q25, q75), (0.5, 0.25, 0.75)),
            _ => unreachable!(),
        }
        assert_eq!(
            summarize(&[0.4], AggregateMode::MeanStd).unwrap(),
            Summary::MeanStd { mean: 0.4, std: 0.0 }
        );
        assert_eq!(
            summarize(&[0.7; 5], AggregateMode::MedianIqr).unwrap(),
            Summary::MedianIqr {
                median: 0.7,
                q25: 0.7,
                q75: 0.7
            }
        );
        assert!(summarize(&[], AggregateMode::MeanStd).is_err());
    }
}
