//! Adam optimization, early stopping and the training loop.

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{affine_augment, sample_rng, AffineParams, AffineRanges};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, LossConfig};
use crate::metrics::{binarize, confusion, dsc, BINARIZE_THRESHOLD};
use crate::network::{forward, loss_and_gradients, Mode, ModelParams};
use crate::tensor::Tensor;

/// One training or evaluation example: a standardized `(1, H, W)` image and
/// its binary `(1, H, W)` lesion mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        if image.shape() != mask.shape() || image.rank() != 3 || image.shape()[0] != 1 {
            return Err(Error::shape(format!(
                "sample image {:?} and mask {:?} must both be (1,H,W)",
                image.shape(),
                mask.shape()
            )));
        }
        Ok(Self { image, mask })
    }
}

/// Stacks samples into `(N, 1, H, W)` image and mask batches.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments per parameter name plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: IndexMap<String, Tensor>,
    pub second: IndexMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }
}

/// One bias-corrected Adam update. Every gradient is validated before any
/// parameter changes; a non-finite or mis-shaped gradient aborts the step
/// with an error naming the parameter.
pub fn adam_step(params: &mut ModelParams, grads: &IndexMap<String, Tensor>, state: &mut OptimizerState) -> Result<()> {
    for (name, g) in grads {
        let p = params.tensor(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params.tensor_mut(name)?;
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gv = f64::from(gv);
            let m_new = beta1 * f64::from(*mv) + (1.0 - beta1) * gv;
            let v_new = beta2 * f64::from(*vv) + (1.0 - beta2) * gv * gv;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = learning_rate * (m_new / c1) / ((v_new / c2).sqrt() + epsilon);
            *pv = (f64::from(*pv) - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random zoom, shift and shear per training sample.
    pub augment: bool,
    /// Coefficient of the squared-kernel penalty on the CPB convolutions.
    pub l2_coefficient: f64,
    /// A validation loss counts as an improvement only when it beats the
    /// best so far by at least this much.
    pub min_delta: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub affine: AffineRanges,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            max_epochs: 100,
            patience: 10,
            batch_size: 4,
            seed: 0,
            augment: true,
            l2_coefficient: 1e-4,
            min_delta: 1e-6,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            affine: AffineRanges::default(),
        }
    }
}

impl TrainSchedule {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.max_epochs == 0 {
            out.push(format!("{prefix}.max_epochs: must be positive"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            out.push(format!(
                "{prefix}.patience: {} must be in [1, max_epochs = {}]",
                self.patience, self.max_epochs
            ));
        }
        if self.batch_size == 0 {
            out.push(format!("{prefix}.batch_size: must be positive"));
        }
        if !(self.l2_coefficient >= 0.0) {
            out.push(format!("{prefix}.l2_coefficient: must be non-negative"));
        }
        if !(self.min_delta >= 0.0) {
            out.push(format!("{prefix}.min_delta: must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            out.push(format!("{prefix}.learning_rate: must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            out.push(format!("{prefix}.beta1/beta2: must be in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            out.push(format!("{prefix}.epsilon: must be positive"));
        }
        out.extend(self.affine.problems(&format!("{prefix}.affine")));
        out
    }
}

/// Patience-based early stopping on a monitored loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the loss of `epoch` (1-based). Returns whether it improved on
    /// the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        (self.best_epoch > 0).then_some((self.best_epoch, self.best))
    }
}

/// Runs the stopping rule over a loss sequence; returns
/// `(last epoch run, best epoch)`.
pub fn simulate_stopping(losses: &[f64], max_epochs: usize, patience: usize, min_delta: f64) -> (usize, usize) {
    let mut stop = EarlyStopping::new(patience, min_delta);
    let mut last = 0;
    for (i, &l) in losses.iter().take(max_epochs).enumerate() {
        last = i + 1;
        stop.observe(last, l);
        if stop.should_stop() {
            break;
        }
    }
    (last, stop.best().map_or(0, |(e, _)| e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_secs: f64,
    /// Synthetic samples drawn during the epoch.
    pub synthetic_used: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Set when a non-finite loss ended training early.
    pub diverged: bool,
}

impl TrainLog {
    /// One line per epoch: epoch, train loss, validation loss, seconds.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\telapsed_s\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.2}\n",
                e.epoch, e.train_loss, e.val_loss, e.elapsed_secs
            ));
        }
        s
    }

    pub fn losses(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect()
    }
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch (or the initial ones when
    /// no epoch finished).
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Training order for one epoch: every real and synthetic sample exactly
/// once, shuffled by a generator derived from `(seed, epoch)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    /// `(is_synthetic, index)` in visiting order.
    pub order: Vec<(bool, usize)>,
}

impl EpochPlan {
    pub fn new(real: usize, synthetic: usize, seed: u64, epoch: usize) -> Self {
        let mut order: Vec<(bool, usize)> = (0..real)
            .map(|i| (false, i))
            .chain((0..synthetic).map(|i| (true, i)))
            .collect();
        let mut rng = sample_rng(seed, 1_000_000 + epoch as u64);
        order.shuffle(&mut rng);
        Self { order }
    }

    /// Times each synthetic sample is visited.
    pub fn synthetic_uses(&self, synthetic: usize) -> Vec<usize> {
        let mut uses = vec![0; synthetic];
        for &(syn, i) in &self.order {
            if syn {
                uses[i] += 1;
            }
        }
        uses
    }
}

fn augment_batch(samples: &[&Sample], ranges: &AffineRanges, seed: u64, key: u64) -> Result<Vec<Sample>> {
    let mut rng = sample_rng(seed, key);
    samples
        .iter()
        .map(|s| {
            let (_, h, w) = (s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]);
            let p = AffineParams::sample(ranges, h, w, &mut rng);
            let (image, mask) = affine_augment(&s.image, &s.mask, &p)?;
            Ok(Sample { image, mask })
        })
        .collect()
}

/// Mean hybrid loss over `samples` in evaluation mode.
pub fn evaluate_loss(params: &ModelParams, samples: &[Sample], batch_size: usize, loss: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::validation("no samples to evaluate"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, masks) = collate(&refs)?;
        let probs = forward(params, &images, Mode::Eval)?;
        total += hybrid_loss(&probs, &masks, loss)?.total * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Trains with Adam and early stopping on the validation loss.
///
/// Each epoch visits every training sample and every synthetic sample once.
/// Running batch-norm statistics are updated after every step.
pub fn train(
    initial: ModelParams,
    train_set: &[Sample],
    synthetic: &[Sample],
    val_set: &[Sample],
    schedule: &TrainSchedule,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::validation("training partition is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::validation("validation partition is empty"));
    }
    let problems = schedule.problems("schedule");
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let mut params = initial.clone();
    let mut best = initial;
    let mut state = OptimizerState::new(schedule.adam());
    let mut stopper = EarlyStopping::new(schedule.patience, schedule.min_delta);
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        diverged: false,
    };
    let started = Instant::now();

    'epochs: for epoch in 1..=schedule.max_epochs {
        let plan = EpochPlan::new(train_set.len(), synthetic.len(), schedule.seed, epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in plan.order.chunks(schedule.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk
                .iter()
                .map(|&(syn, i)| if syn { &synthetic[i] } else { &train_set[i] })
                .collect();
            let augmented;
            let batch: Vec<&Sample> = if schedule.augment {
                let key = ((epoch as u64) << 32) | b as u64;
                augmented = augment_batch(&refs, &schedule.affine, schedule.seed, key)?;
                augmented.iter().collect()
            } else {
                refs
            };
            let (images, masks) = collate(&batch)?;
            let step = loss_and_gradients(&params, &images, &masks, loss, schedule.l2_coefficient, Mode::Train)?;
            if !step.total.is_finite() {
                log::warn!("epoch {epoch}: non-finite training loss, keeping the last good parameters");
                log.diverged = true;
                break 'epochs;
            }
            if let Err(e) = adam_step(&mut params, &step.grads, &mut state) {
                log::warn!("epoch {epoch}: {e}; keeping the last good parameters");
                log.diverged = true;
                break 'epochs;
            }
            params.apply_batch_stats(&step.batch_stats)?;
            loss_sum += step.total * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_loss = evaluate_loss(&params, val_set, schedule.batch_size, loss)?;
        if !val_loss.is_finite() {
            log::warn!("epoch {epoch}: non-finite validation loss");
            log.diverged = true;
            break;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            elapsed_secs: started.elapsed().as_secs_f64(),
            synthetic_used: plan.synthetic_uses(synthetic.len()).iter().sum(),
        };
        log::info!(
            "epoch {epoch}: train {:.6} val {:.6}",
            record.train_loss,
            record.val_loss
        );
        log.epochs.push(record);
        if stopper.observe(epoch, val_loss) {
            best = params.clone();
            log.best_epoch = epoch;
            log.best_val_loss = val_loss;
        }
        if stopper.should_stop() {
            break;
        }
    }
    Ok(TrainOutcome { params: best, log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Training loss before each step.
    pub losses: Vec<f64>,
    /// Mean per-sample DSC after training, batch statistics from the whole
    /// tiny set.
    pub dsc: f64,
    pub params: ModelParams,
}

impl ProbeResult {
    /// Steps among the first `window` whose loss did not drop.
    pub fn non_decreasing_steps(&self, window: usize) -> usize {
        self.losses
            .iter()
            .take(window + 1)
            .collect::<Vec<_>>()
            .windows(2)
            .filter(|w| w[1] >= w[0])
            .count()
    }
}

/// Mean per-sample DSC of binarized predictions. `mode` selects which
/// batch-norm statistics are used; training mode normalizes with the
/// statistics of `samples` as one batch.
pub fn in_sample_dsc(params: &ModelParams, samples: &[Sample], mode: Mode) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let (images, masks) = collate(&refs)?;
    let probs = forward(params, &images, mode)?;
    let mut sum = 0.0;
    for i in 0..samples.len() {
        let pred = binarize(&probs.batch_item(i)?, BINARIZE_THRESHOLD);
        sum += dsc(&confusion(&pred, &masks.batch_item(i)?)?);
    }
    Ok(sum / samples.len() as f64)
}

/// Fits a tiny set by full-batch Adam without augmentation and reports the
/// in-sample DSC. A sanity check that the model and optimizer can learn.
pub fn overfit_probe(
    initial: ModelParams,
    tiny_set: &[Sample],
    steps: usize,
    adam: AdamConfig,
    loss: &LossConfig,
) -> Result<ProbeResult> {
    if tiny_set.is_empty() {
        return Err(Error::validation("probe set is empty"));
    }
    if tiny_set.iter().any(|s| s.mask.count_nonzero() == 0) {
        return Err(Error::validation("probe masks must be non-empty"));
    }
    let refs: Vec<&Sample> = tiny_set.iter().collect();
    let (images, masks) = collate(&refs)?;
    let mut params = initial;
    let mut state = OptimizerState::new(adam);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step = loss_and_gradients(&params, &images, &masks, loss, 0.0, Mode::Train)?;
        if !step.total.is_finite() {
            return Err(Error::NonFinite("probe loss".into()));
        }
        losses.push(step.total);
        adam_step(&mut params, &step.grads, &mut state)?;
        params.apply_batch_stats(&step.batch_stats)?;
    }
    let dsc = in_sample_dsc(&params, tiny_set, Mode::Train)?;
    Ok(ProbeResult { losses, dsc, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, ParamKind};

    fn scalar_model(value: f32) -> ModelParams {
        let mut p = ModelParams::empty(ModelConfig::default());
        p.insert("w", ParamKind::Weight, Tensor::full(vec![1], value));
        p
    }

    fn grads(g: f32) -> IndexMap<String, Tensor> {
        let mut m = IndexMap::new();
        m.insert("w.weight".to_string(), Tensor::full(vec![1], g));
        m
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_model(0.3);
        let mut s = OptimizerState::new(AdamConfig::default());
        for k in 1..=5 {
            adam_step(&mut p, &grads(0.0), &mut s).unwrap();
            assert_eq!(s.step, k);
        }
        assert_eq!(p.tensor("w.weight").unwrap().data(), &[0.3]);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        // scalar simulation: with constant g the bias-corrected ratio is 1,
        // so each step moves by lr / (1 + eps / |g|)
        let mut p = scalar_model(0.0);
        let mut s = OptimizerState::new(AdamConfig::default());
        let mut prev = 0.0f32;
        for _ in 0..50 {
            adam_step(&mut p, &grads(0.5), &mut s).unwrap();
            let now = p.tensor("w.weight").unwrap().data()[0];
            assert!(now < prev);
            prev = now;
        }
        assert!((f64::from(prev) + 50.0 * 1e-3).abs() < 1e-5);
    }

    #[test]
    fn non_finite_gradient_names_the_layer() {
        let mut p = scalar_model(1.0);
        let mut s = OptimizerState::new(AdamConfig::default());
        let err = adam_step(&mut p, &grads(f32::NAN), &mut s).unwrap_err();
        assert!(err.to_string().contains("w.weight"));
        assert_eq!(s.step, 0);
        assert_eq!(p.tensor("w.weight").unwrap().data(), &[1.0]);
    }

    #[test]
    fn stopping_rule() {
        assert_eq!(simulate_stopping(&[0.5; 100], 100, 10, 1e-6), (11, 1));
        let improving: Vec<f64> = (0..100).map(|i| 1.0 - 0.001 * i as f64).collect();
        assert_eq!(simulate_stopping(&improving, 100, 10, 1e-6), (100, 100));
        // improvements smaller than min_delta do not count
        let creeping: Vec<f64> = (0..100).map(|i| 1.0 - 1e-8 * i as f64).collect();
        assert_eq!(simulate_stopping(&creeping, 100, 10, 1e-6), (11, 1));
        let dip = [1.0, 0.9, 0.95, 0.8, 0.85, 0.86, 0.87];
        assert_eq!(simulate_stopping(&dip, 100, 3, 1e-6), (7, 4));
    }

    #[test]
    fn epoch_plan_uses_each_sample_once() {
        let plan = EpochPlan::new(7, 5, 3, 2);
        assert_eq!(plan.order.len(), 12);
        assert_eq!(plan.synthetic_uses(5), vec![1; 5]);
        assert_eq!(plan, EpochPlan::new(7, 5, 3, 2));
        assert_ne!(plan, EpochPlan::new(7, 5, 3, 3));
    }

    #[test]
    fn schedule_validation() {
        let bad = TrainSchedule {
            patience: 200,
            batch_size: 0,
            ..TrainSchedule::default()
        };
        let p = bad.problems("schedule");
        assert!(p.iter().any(|m| m.starts_with("schedule.patience")));
        assert!(p.iter().any(|m| m.starts_with("schedule.batch_size")));
        assert!(TrainSchedule::default().problems("schedule").is_empty());
    }
}
