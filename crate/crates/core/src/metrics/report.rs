use std::fmt::Write as _;

use super::{
    aggregate, discrimination_stats, pearson, Aggregate, AggregateMode, DiscriminationStats, SliceScore, Summary,
    Verdict,
};
use crate::error::Result;

pub const REPORT_COLUMNS: [&str; 10] = [
    "patient",
    "slice",
    "dsc",
    "sen",
    "spc",
    "mae",
    "rate_gt",
    "rate_pred",
    "group",
    "verdict",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRow {
    pub patient_id: String,
    pub slice_id: String,
    pub score: SliceScore,
    /// Slice-level label, when the manifest carries one.
    pub label: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryBlock {
    pub aggregate: Aggregate,
    /// Correlation between predicted and true infection rates; absent when
    /// either side has no variance.
    pub rate_correlation: Option<f64>,
    /// Present when every row carries a label.
    pub discrimination: Option<DiscriminationStats>,
}

/// Per-slice scores in manifest order plus their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<SliceRow>,
    pub mode: AggregateMode,
}

impl MetricsReport {
    pub fn new(rows: Vec<SliceRow>, mode: AggregateMode) -> Self {
        Self { rows, mode }
    }

    pub fn scores(&self) -> Vec<SliceScore> {
        self.rows.iter().map(|r| r.score.clone()).collect()
    }

    pub fn summary(&self) -> Result<SummaryBlock> {
        let scores = self.scores();
        let aggregate = aggregate(&scores, self.mode)?;
        let pred: Vec<f64> = scores.iter().map(|s| s.rate_pred).collect();
        let gt: Vec<f64> = scores.iter().map(|s| s.rate_gt).collect();
        let rate_correlation = pearson(&pred, &gt).ok();
        let labels: Option<Vec<Verdict>> = self.rows.iter().map(|r| r.label.map(Verdict::from_label)).collect();
        let discrimination = match labels {
            Some(labels) => {
                let verdicts: Vec<Verdict> = scores.iter().map(|s| s.verdict).collect();
                Some(discrimination_stats(&verdicts, &labels)?)
            }
            None => None,
        };
        Ok(SummaryBlock {
            aggregate,
            rate_correlation,
            discrimination,
        })
    }

    /// Tab-separated table, one row per slice, followed by `#`-prefixed
    /// summary lines.
    pub fn to_tsv(&self) -> Result<String> {
        let mut out = REPORT_COLUMNS.join("\t");
        out.push('\n');
        for r in &self.rows {
            let s = &r.score;
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
                r.patient_id, r.slice_id, s.dsc, s.sen, s.spc, s.mae, s.rate_gt, s.rate_pred, s.group, s.verdict
            );
        }
        let summary = self.summary()?;
        let agg = &summary.aggregate;
        let _ = writeln!(out, "# slices\t{}", agg.count);
        for (name, value) in [("dsc", agg.dsc), ("sen", agg.sen), ("spc", agg.spc), ("mae", agg.mae)] {
            let _ = writeln!(out, "# {name}\t{}", format_summary(value));
        }
        if let Some(r) = summary.rate_correlation {
            let _ = writeln!(out, "# rate_pearson\t{r:.6}");
        }
        if let Some(d) = summary.discrimination {
            let _ = writeln!(out, "# accuracy\t{:.6}", d.accuracy);
            let _ = writeln!(out, "# sensitivity\t{}", format_optional(d.sensitivity));
            let _ = writeln!(out, "# ppv\t{}", format_optional(d.ppv));
        }
        Ok(out)
    }
}

pub fn format_summary(s: Summary) -> String {
    match s {
        Summary::MeanStd { mean, std } => format!("{mean:.6} ± {std:.6}"),
        Summary::MedianIqr { median, q25, q75 } => format!("{median:.6} ({q25:.6}, {q75:.6})"),
    }
}

fn format_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}
