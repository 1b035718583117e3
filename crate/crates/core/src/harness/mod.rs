//! Batch commands: training with cross-validation, evaluation, slice
//! discrimination, synthetic corpus generation, gradient checks and
//! parameter counting.

mod config;
mod predict;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use config::{DataConfig, ExperimentConfig, PathsConfig, SplitConfig, ThresholdConfig};
pub use predict::{EmptyPredictor, NetworkPredictor, OraclePredictor, Predictor};

use crate::augment::{generate_corpus, Corpus};
use crate::data_io::{
    kfold, load_exclusions, preprocess, split, CtSlice, DatasetManifest, ExclusionList, Fold, FoldPlan,
};
use crate::error::{Error, Result};
use crate::gradcheck::{format_suite, gradient_suite, CheckReport, SuiteOptions};
use crate::metrics::{
    aggregate, binarize, discriminate, discrimination_stats, format_summary, pearson, score_slice, Aggregate,
    AggregateMode, DiscriminationStats, Group, MetricsReport, SliceRow, Verdict,
};
use crate::network::{
    build_model, count_params, load_weights, reference_deviation, save_weights, ModelConfig, ModelParams, ParamLedger,
};
use crate::tensor::Tensor;
use crate::trainer::{train, Sample, TrainLog};

use config::require;

pub const SNAPSHOT_FILE: &str = "config.snapshot.toml";
pub const RUN_REPORT_FILE: &str = "run_report.txt";

/// Deviation from the reference parameter count above which
/// `param-count` flags the model.
pub const PARAM_COUNT_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Only slices whose infection mask has lesion pixels.
    Slice,
    /// Every lung-containing slice, clean ones scored against an empty mask.
    Volume,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slice" => Ok(EvalMode::Slice),
            "volume" => Ok(EvalMode::Volume),
            other => Err(Error::Config(vec![format!(
                "--mode: expected `slice` or `volume`, got {other:?}"
            )])),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Slice => "slice",
            EvalMode::Volume => "volume",
        })
    }
}

fn slice_id(s: &CtSlice) -> String {
    format!("{}/{}", s.patient_id, s.slice_id)
}

fn lesion_area(mask: &Tensor, lung: &Tensor) -> usize {
    mask.data()
        .iter()
        .zip(lung.data())
        .filter(|(&m, &l)| m != 0.0 && l != 0.0)
        .count()
}

/// Binary `(H, W)` prediction for a slice.
fn predict_mask(predictor: &dyn Predictor, slice: &CtSlice, threshold: f64) -> Result<Tensor> {
    let probs = predictor.predict(slice)?;
    if probs.shape() != slice.image.shape() {
        return Err(Error::shape(format!(
            "{}: prediction is {:?}, image is {:?}",
            slice_id(slice),
            probs.shape(),
            slice.image.shape()
        )));
    }
    Ok(binarize(&probs, threshold as f32))
}

/// Summed lesion and lung areas over one patient's evaluated slices.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRate {
    pub patient_id: String,
    pub slices: usize,
    pub lung_area: usize,
    pub lesion_gt: usize,
    pub lesion_pred: usize,
}

impl VolumeRate {
    pub fn rate_gt(&self) -> f64 {
        self.lesion_gt as f64 / self.lung_area as f64
    }

    pub fn rate_pred(&self) -> f64 {
        self.lesion_pred as f64 / self.lung_area as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mode: EvalMode,
    /// Per-slice scores, summarized as mean ± std.
    pub report: MetricsReport,
    /// Median and quartiles per ground-truth infection-rate group.
    pub groups: Vec<(Group, Aggregate)>,
    /// Correlation of predicted and true rates over slices with lesions.
    pub lesion_pearson: Option<f64>,
    pub volumes: Vec<VolumeRate>,
}

/// Scores `predictor` on `slices`. Slices without lung tissue are skipped.
pub fn evaluate(
    predictor: &dyn Predictor,
    slices: &[CtSlice],
    mode: EvalMode,
    config: &ExperimentConfig,
) -> Result<Evaluation> {
    let thresholds = config.thresholds.scoring();
    let mut rows = Vec::new();
    let mut volumes: BTreeMap<String, VolumeRate> = BTreeMap::new();
    for slice in slices.iter().filter(|s| s.has_lung()) {
        let truth = match (mode, slice.truth_mask()) {
            (EvalMode::Slice, Some(m)) if m.count_nonzero() > 0 => m,
            (EvalMode::Slice, _) => continue,
            (EvalMode::Volume, Some(m)) => m,
            (EvalMode::Volume, None) => {
                return Err(Error::validation(format!(
                    "{}: no infection mask or clean label to score against",
                    slice_id(slice)
                )))
            }
        };
        let pred = predict_mask(predictor, slice, config.thresholds.binarize)?;
        let score = score_slice(&pred, &truth, &slice.lung_mask, thresholds, config.data.lung_only_mae)?;
        let v = volumes.entry(slice.patient_id.clone()).or_insert_with(|| VolumeRate {
            patient_id: slice.patient_id.clone(),
            slices: 0,
            lung_area: 0,
            lesion_gt: 0,
            lesion_pred: 0,
        });
        v.slices += 1;
        v.lung_area += slice.lung_mask.count_nonzero();
        v.lesion_gt += lesion_area(&truth, &slice.lung_mask);
        v.lesion_pred += lesion_area(&pred, &slice.lung_mask);
        rows.push(SliceRow {
            patient_id: slice.patient_id.clone(),
            slice_id: slice.slice_id.clone(),
            score,
            label: slice.infected_label,
        });
    }
    if rows.is_empty() {
        return Err(Error::validation(format!("no slices to evaluate in {mode} mode")));
    }
    assemble(mode, rows, volumes.into_values().collect())
}

fn assemble(mode: EvalMode, rows: Vec<SliceRow>, volumes: Vec<VolumeRate>) -> Result<Evaluation> {
    let report = MetricsReport::new(rows, AggregateMode::MeanStd);
    let scores = report.scores();
    let mut groups = Vec::new();
    for g in [Group::A, Group::B] {
        let members: Vec<_> = scores.iter().filter(|s| s.group == g).cloned().collect();
        if !members.is_empty() {
            groups.push((g, aggregate(&members, AggregateMode::MedianIqr)?));
        }
    }
    let (pred, gt): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .filter(|s| s.rate_gt > 0.0)
        .map(|s| (s.rate_pred, s.rate_gt))
        .unzip();
    Ok(Evaluation {
        mode,
        lesion_pearson: pearson(&pred, &gt).ok(),
        report,
        groups,
        volumes,
    })
}

fn write_aggregate(out: &mut String, agg: &Aggregate) {
    for (name, value) in [("dsc", agg.dsc), ("sen", agg.sen), ("spc", agg.spc), ("mae", agg.mae)] {
        let _ = writeln!(out, "{name}\t{}", format_summary(value));
    }
}

fn format_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

impl Evaluation {
    /// Summary tables: overall mean ± std, per-group median (q25, q75),
    /// lesion-slice rate correlation and per-patient volume rates.
    pub fn to_text(&self) -> Result<String> {
        let summary = self.report.summary()?;
        let mut out = String::new();
        let _ = writeln!(out, "mode\t{}", self.mode);
        let _ = writeln!(out, "slices\t{}", summary.aggregate.count);
        out.push_str("\n[overall: mean ± std]\n");
        write_aggregate(&mut out, &summary.aggregate);
        for (g, agg) in &self.groups {
            let _ = writeln!(out, "\n[group {g}: median (q25, q75), {} slices]", agg.count);
            write_aggregate(&mut out, agg);
        }
        let _ = writeln!(out, "\nlesion_rate_pearson\t{}", format_optional(self.lesion_pearson));
        out.push_str("\n[volumes]\npatient\tslices\trate_gt\trate_pred\n");
        for v in &self.volumes {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}",
                v.patient_id,
                v.slices,
                v.rate_gt(),
                v.rate_pred()
            );
        }
        out.push_str("# volume rates sum lesion and lung areas over slices; slice thickness is not weighted\n");
        Ok(out)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the effective config beside a command's outputs.
pub fn write_snapshot(out_dir: &Path, config: &ExperimentConfig) -> Result<PathBuf> {
    let path = out_dir.join(SNAPSHOT_FILE);
    write_file(&path, &config.to_toml())?;
    Ok(path)
}

fn load_manifest(config: &ExperimentConfig, explicit: Option<&Path>) -> Result<DatasetManifest> {
    match explicit {
        Some(p) => DatasetManifest::load(p),
        None => DatasetManifest::load(require(&config.paths.manifest, "manifest")?),
    }
}

/// Loads a checkpoint, evaluates it on a manifest and writes
/// `metrics.tsv` and `eval_report.txt` into `out_dir`.
pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    manifest: Option<&Path>,
    mode: EvalMode,
    out_dir: &Path,
) -> Result<Evaluation> {
    let params = load_weights(checkpoint)?;
    let slices = load_manifest(config, manifest)?.load_slices()?;
    let evaluation = evaluate(&NetworkPredictor { params: &params }, &slices, mode, config)?;
    write_file(&out_dir.join("metrics.tsv"), &evaluation.report.to_tsv()?)?;
    write_file(&out_dir.join("eval_report.txt"), &evaluation.to_text()?)?;
    write_snapshot(out_dir, config)?;
    Ok(evaluation)
}

/// One scored slice in a discrimination run.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminationRow {
    pub patient_id: String,
    pub slice_id: String,
    pub rate_pred: f64,
    pub verdict: Verdict,
    pub label: Verdict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrimination {
    pub rows: Vec<DiscriminationRow>,
    pub stats: DiscriminationStats,
    /// Slices dropped by the exclusion list.
    pub excluded: usize,
}

impl Discrimination {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("patient\tslice\trate_pred\tverdict\tlabel\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{}\t{}",
                r.patient_id, r.slice_id, r.rate_pred, r.verdict, r.label
            );
        }
        let _ = writeln!(out, "# slices\t{}", self.rows.len());
        let _ = writeln!(out, "# excluded\t{}", self.excluded);
        let _ = writeln!(out, "# accuracy\t{:.6}", self.stats.accuracy);
        let _ = writeln!(out, "# sensitivity\t{}", format_optional(self.stats.sensitivity));
        let _ = writeln!(out, "# ppv\t{}", format_optional(self.stats.ppv));
        out
    }
}

/// Segments every lung-containing slice and calls it infected when the
/// predicted infection rate exceeds the discrimination threshold.
pub fn discriminate_slices(
    predictor: &dyn Predictor,
    slices: &[CtSlice],
    exclusions: &ExclusionList,
    config: &ExperimentConfig,
) -> Result<Discrimination> {
    let mut rows = Vec::new();
    let mut excluded = 0;
    for slice in slices {
        if exclusions.contains(&slice.patient_id, &slice.slice_id) {
            excluded += 1;
            continue;
        }
        if !slice.has_lung() {
            continue;
        }
        let label = slice
            .infected_label
            .ok_or_else(|| Error::validation(format!("{}: slice-level label is missing", slice_id(slice))))?;
        let pred = predict_mask(predictor, slice, config.thresholds.binarize)?;
        let rate_pred = crate::metrics::infection_rate(&pred, &slice.lung_mask)?;
        rows.push(DiscriminationRow {
            patient_id: slice.patient_id.clone(),
            slice_id: slice.slice_id.clone(),
            rate_pred,
            verdict: discriminate(rate_pred, config.thresholds.discriminate),
            label: Verdict::from_label(label),
        });
    }
    let verdicts: Vec<Verdict> = rows.iter().map(|r| r.verdict).collect();
    let labels: Vec<Verdict> = rows.iter().map(|r| r.label).collect();
    let stats = discrimination_stats(&verdicts, &labels)?;
    Ok(Discrimination { rows, stats, excluded })
}

pub fn cmd_discriminate(
    config: &ExperimentConfig,
    checkpoint: &Path,
    manifest: Option<&Path>,
    exclusions: Option<&Path>,
    out_dir: &Path,
) -> Result<Discrimination> {
    let params = load_weights(checkpoint)?;
    let slices = load_manifest(config, manifest)?.load_slices()?;
    let exclusions = match exclusions.or(config.paths.exclusions.as_deref()) {
        Some(p) => load_exclusions(p)?,
        None => ExclusionList::default(),
    };
    let result = discriminate_slices(&NetworkPredictor { params: &params }, &slices, &exclusions, config)?;
    write_file(&out_dir.join("discrimination.tsv"), &result.to_tsv())?;
    write_snapshot(out_dir, config)?;
    Ok(result)
}

/// Builds the synthetic corpus from the configured infected and healthy
/// manifests and writes it to `out_dir`.
pub fn cmd_augment(config: &ExperimentConfig, out_dir: &Path) -> Result<Corpus> {
    let infected = DatasetManifest::load(require(&config.paths.infected_manifest, "infected_manifest")?)?;
    let healthy = DatasetManifest::load(require(&config.paths.healthy_manifest, "healthy_manifest")?)?;
    let infected: Vec<CtSlice> = infected
        .load_slices()?
        .into_iter()
        .filter(|s| s.has_lung() && s.infection_mask.as_ref().is_some_and(|m| m.count_nonzero() > 0))
        .collect();
    let healthy: Vec<CtSlice> = healthy
        .load_slices()?
        .into_iter()
        .filter(|s| s.has_lung() && s.infected_label != Some(true))
        .collect();
    let corpus = generate_corpus(
        &infected,
        &healthy,
        config.data.synthetic_count,
        config.schedule.seed,
        config.thresholds.synthetic_min_rate,
    )?;
    corpus.write(out_dir)?;
    write_snapshot(out_dir, config)?;
    Ok(corpus)
}

/// Runs the gradient suite; returns the rendered table and whether every
/// check passed.
pub fn cmd_gradcheck(opts: &SuiteOptions) -> Result<(Vec<CheckReport>, String, bool)> {
    let reports = gradient_suite(opts)?;
    let table = format_suite(&reports);
    let passed = reports.iter().all(CheckReport::passed);
    Ok((reports, table, passed))
}

/// Parameter totals with and without the context module at one width.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSummary {
    pub config: ModelConfig,
    pub ledger: ParamLedger,
    pub with_cpb: usize,
    pub without_cpb: usize,
    /// Relative deviation from the reference total, at base width 32 only.
    pub deviation: Option<f64>,
}

impl ParamSummary {
    pub fn flagged(&self) -> bool {
        self.deviation.is_some_and(|d| d.abs() > PARAM_COUNT_TOLERANCE)
    }

    pub fn to_text(&self, per_layer: bool) -> String {
        let mut out = String::new();
        if per_layer {
            out.push_str("layer\tparams\n");
            for r in &self.ledger.rows {
                let _ = writeln!(out, "{}\t{}", r.layer, r.count);
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "base_width\t{}\ncpb_enabled\t{}\ntotal\t{}",
            self.config.base_width, self.config.cpb_enabled, self.ledger.total
        );
        let _ = writeln!(
            out,
            "with_cpb\t{}\nwithout_cpb\t{}\ncpb_delta\t{}",
            self.with_cpb,
            self.without_cpb,
            self.with_cpb - self.without_cpb
        );
        match self.deviation {
            Some(d) => {
                let _ = writeln!(out, "reference_deviation\t{:+.3}%", d * 100.0);
                if self.flagged() {
                    let _ = writeln!(
                        out,
                        "FLAG\tdeviation exceeds {:.0}% of the reference total",
                        PARAM_COUNT_TOLERANCE * 100.0
                    );
                }
            }
            None => out.push_str("reference_deviation\tn/a (reference totals exist for base_width 32)\n"),
        }
        out
    }
}

pub fn cmd_param_count(model: ModelConfig) -> Result<ParamSummary> {
    let total =
        |cpb_enabled| -> Result<usize> { Ok(count_params(&build_model(ModelConfig { cpb_enabled, ..model })?).total) };
    let ledger = count_params(&build_model(model)?);
    Ok(ParamSummary {
        deviation: reference_deviation(&model, ledger.total),
        config: model,
        with_cpb: total(true)?,
        without_cpb: total(false)?,
        ledger,
    })
}

/// Training samples from lung-containing slices with known ground truth.
pub fn training_samples(slices: &[CtSlice]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for s in slices {
        let (Some(mask), Some(image)) = (s.truth_mask(), preprocess(s)?) else {
            continue;
        };
        let shape = image.shape().to_vec();
        out.push(Sample::new(image, mask.reshape(shape)?)?);
    }
    Ok(out)
}

/// Synthetic pairs are already normalized and lung-masked; they are used
/// as written.
fn synthetic_samples(slices: &[CtSlice]) -> Result<Vec<Sample>> {
    slices
        .iter()
        .filter_map(|s| s.infection_mask.as_ref().map(|m| (s, m)))
        .map(|(s, m)| {
            let (h, w) = s.image.dims2()?;
            Sample::new(
                s.image.clone().reshape(vec![1, h, w])?,
                m.clone().reshape(vec![1, h, w])?,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub index: usize,
    pub patients: Fold,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub diverged: bool,
    pub checksum: u64,
    pub evaluation: Evaluation,
}

/// Everything `train` reports, rendered without timings so reruns compare
/// byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub folds: Vec<FoldResult>,
    /// All test slices of all folds, scored together.
    pub overall: Evaluation,
    pub params: ParamSummary,
}

fn join_ids(ids: &[String]) -> String {
    if ids.is_empty() {
        "-".to_string()
    } else {
        ids.join(",")
    }
}

impl RunReport {
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::from("[config]\n");
        out.push_str(&self.config.to_toml());
        out.push_str("\n[parameters]\n");
        out.push_str(&self.params.to_text(false));
        for f in &self.folds {
            let _ = writeln!(out, "\n[fold {}]", f.index);
            let _ = writeln!(out, "train\t{}", join_ids(&f.patients.train));
            let _ = writeln!(out, "val\t{}", join_ids(&f.patients.val));
            let _ = writeln!(out, "test\t{}", join_ids(&f.patients.test));
            let _ = writeln!(
                out,
                "epochs\t{}\nbest_epoch\t{}\nbest_val_loss\t{:.6}\ndiverged\t{}\nchecksum\t{:016x}",
                f.epochs_run, f.best_epoch, f.best_val_loss, f.diverged, f.checksum
            );
            let summary = f.evaluation.report.summary()?;
            let _ = writeln!(out, "slices\t{}", summary.aggregate.count);
            write_aggregate(&mut out, &summary.aggregate);
        }
        out.push_str("\n[aggregate]\n");
        out.push_str(&self.overall.to_text()?);
        Ok(out)
    }
}

fn fold_plan(manifest: &DatasetManifest, config: &ExperimentConfig) -> Result<FoldPlan> {
    if config.split.k == 1 {
        split(manifest, config.split.ratios, config.split.seed)
    } else {
        kfold(manifest, config.split.k, config.split.val_fraction, config.split.seed)
    }
}

fn select(slices: &[CtSlice], patients: &[String]) -> Vec<CtSlice> {
    slices
        .iter()
        .filter(|s| patients.contains(&s.patient_id))
        .cloned()
        .collect()
}

/// Trains one model per fold, evaluates each on its test patients, and
/// writes per-fold checkpoints, logs and metrics plus the run report.
pub fn cmd_train(config: &ExperimentConfig, manifest: Option<&Path>, out_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    let manifest = load_manifest(config, manifest)?;
    let slices = manifest.load_slices()?;
    let plan = fold_plan(&manifest, config)?;
    plan.check(&manifest.patients())?;
    let synthetic = match &config.paths.synthetic_manifest {
        Some(p) => synthetic_samples(&DatasetManifest::load(p)?.load_slices()?)?,
        None => Vec::new(),
    };
    write_snapshot(out_dir, config)?;

    let mut folds = Vec::with_capacity(plan.folds.len());
    let mut rows = Vec::new();
    let mut volumes = Vec::new();
    for (i, fold) in plan.folds.iter().enumerate() {
        let index = i + 1;
        let dir = out_dir.join(format!("fold{index:02}"));
        let train_set = training_samples(&select(&slices, &fold.train))?;
        let val_set = training_samples(&select(&slices, &fold.val))?;
        log::info!(
            "fold {index}/{}: {} train, {} val, {} synthetic samples",
            plan.folds.len(),
            train_set.len(),
            val_set.len(),
            synthetic.len()
        );
        let outcome = train(
            build_model(config.model)?,
            &train_set,
            &synthetic,
            &val_set,
            &config.schedule,
            &config.loss,
        )?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_weights(dir.join("checkpoint.crw"), &outcome.params)?;
        write_file(&dir.join("train_log.tsv"), &outcome.log.to_text())?;

        let test = select(&slices, &fold.test);
        let evaluation = evaluate(
            &NetworkPredictor {
                params: &outcome.params,
            },
            &test,
            EvalMode::Slice,
            config,
        )?;
        write_file(&dir.join("metrics.tsv"), &evaluation.report.to_tsv()?)?;
        rows.extend(evaluation.report.rows.iter().cloned());
        volumes.extend(evaluation.volumes.iter().cloned());
        folds.push(fold_result(index, fold, &outcome.params, &outcome.log, evaluation));
    }

    // Test groups are disjoint, so pooled rows cover each patient once.
    volumes.sort_by(|a: &VolumeRate, b| a.patient_id.cmp(&b.patient_id));
    let overall = assemble(EvalMode::Slice, rows, volumes)?;
    let report = RunReport {
        config: config.clone(),
        folds,
        overall,
        params: cmd_param_count(config.model)?,
    };
    write_file(&out_dir.join(RUN_REPORT_FILE), &report.to_text()?)?;
    Ok(report)
}

fn fold_result(index: usize, fold: &Fold, params: &ModelParams, log: &TrainLog, evaluation: Evaluation) -> FoldResult {
    FoldResult {
        index,
        patients: fold.clone(),
        best_epoch: log.best_epoch,
        best_val_loss: log.best_val_loss,
        epochs_run: log.epochs.len(),
        diverged: log.diverged,
        checksum: params.checksum(),
        evaluation,
    }
}
