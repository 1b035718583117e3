use indexmap::IndexMap;

use super::{cpb_layer_names, ModelParams, CPB_DILATIONS, DECODER_MULTIPLIERS, ENCODER_MULTIPLIERS, SPATIAL_MULTIPLE};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{hybrid_loss, LossConfig, LossValue};
use crate::ops::{BatchStats, Conv2dOptions};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running averages are reported back.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Which CPB paths contribute to the fused output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CpbPaths {
    pub projection: bool,
    pub dilated: [bool; 4],
}

impl CpbPaths {
    pub const ALL: CpbPaths = CpbPaths {
        projection: true,
        dilated: [true; 4],
    };

    pub const PROJECTION_ONLY: CpbPaths = CpbPaths {
        projection: true,
        dilated: [false; 4],
    };
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    /// Lesion probabilities, `(N, 1, H, W)`.
    pub output: Var,
    /// Tape leaves for every parameter the pass read.
    pub leaves: IndexMap<String, Var>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub batch_stats: Vec<(String, BatchStats)>,
    /// `l2 * sum(w^2)` over the CPB convolution kernels.
    pub l2_penalty: f64,
}

struct Builder<'a> {
    params: &'a ModelParams,
    tape: Tape,
    mode: Mode,
    leaves: IndexMap<String, Var>,
    stats: Vec<(String, BatchStats)>,
}

impl<'a> Builder<'a> {
    fn new(params: &'a ModelParams, mode: Mode) -> Self {
        Self {
            params,
            tape: Tape::new(),
            mode,
            leaves: IndexMap::new(),
            stats: Vec::new(),
        }
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.tensor(name)?.clone());
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, layer: &str, opts: Conv2dOptions) -> Result<Var> {
        let w = self.param(&format!("{layer}.weight"))?;
        let b = self.param(&format!("{layer}.bias"))?;
        self.tape.conv2d(x, w, Some(b), opts)
    }

    fn bn(&mut self, x: Var, layer: &str) -> Result<Var> {
        let scale = self.param(&format!("{layer}.scale"))?;
        let shift = self.param(&format!("{layer}.shift"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, scale, shift)?;
                self.stats.push((layer.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.tensor(&format!("{layer}.running_mean"))?;
                let var = self.params.tensor(&format!("{layer}.running_var"))?;
                self.tape.batch_norm_eval(x, scale, shift, mean, var)
            }
        }
    }

    fn conv_bn_relu(&mut self, x: Var, conv: &str, bn: &str, opts: Conv2dOptions) -> Result<Var> {
        let y = self.conv(x, conv, opts)?;
        let y = self.bn(y, bn)?;
        Ok(self.tape.relu(y))
    }

    /// Two residual units; the first down-samples with a stride-2 conv and
    /// projects its skip path with a strided 1x1 conv.
    fn encoding_block(&mut self, x: Var, blk: &str) -> Result<Var> {
        let down = Conv2dOptions::strided(2);
        let same = Conv2dOptions::default();

        let a = self.conv_bn_relu(x, &format!("{blk}.unit1.conv1"), &format!("{blk}.unit1.bn1"), down)?;
        let a = self.conv_bn_relu(a, &format!("{blk}.unit1.conv2"), &format!("{blk}.unit1.bn2"), same)?;
        let skip = self.conv(x, &format!("{blk}.unit1.proj"), down)?;
        let u1 = self.tape.add(a, skip)?;

        let c = self.conv_bn_relu(u1, &format!("{blk}.unit2.conv1"), &format!("{blk}.unit2.bn1"), same)?;
        let c = self.conv_bn_relu(c, &format!("{blk}.unit2.conv2"), &format!("{blk}.unit2.bn2"), same)?;
        self.tape.add(c, u1)
    }

    fn cpb(&mut self, x: Var, paths: CpbPaths) -> Result<Var> {
        let mut fused: Option<Var> = None;
        let mut push = |b: &mut Self, y: Var| -> Result<()> {
            fused = Some(match fused {
                None => y,
                Some(acc) => b.tape.add(acc, y)?,
            });
            Ok(())
        };
        if paths.projection {
            let y = self.conv(x, "cpb.proj", Conv2dOptions::default())?;
            push(self, y)?;
        }
        for (d, enabled) in CPB_DILATIONS.iter().zip(paths.dilated) {
            if enabled {
                let y = self.conv(x, &format!("cpb.rate{d}"), Conv2dOptions::dilated(*d))?;
                push(self, y)?;
            }
        }
        fused.ok_or_else(|| Error::Parameter("CPB needs at least one enabled path".into()))
    }

    fn decoding_block(&mut self, x: Var, skip: Var, blk: &str) -> Result<Var> {
        let up = self.tape.upsample2x(x)?;
        let cat = self.tape.concat_channels(up, skip)?;
        self.conv_bn_relu(
            cat,
            &format!("{blk}.conv"),
            &format!("{blk}.bn"),
            Conv2dOptions::default(),
        )
    }

    fn l2_penalty(&self, coefficient: f64) -> Result<f64> {
        if !self.params.config().cpb_enabled || coefficient == 0.0 {
            return Ok(0.0);
        }
        let mut sum = 0.0;
        for layer in cpb_layer_names() {
            sum += self.params.tensor(&format!("{layer}.weight"))?.sum_squares();
        }
        Ok(coefficient * sum)
    }
}

fn check_input(params: &ModelParams, batch: &Tensor) -> Result<()> {
    let (_, c, h, w) = batch.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("network expects 1 input channel, got {c}")));
    }
    if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        return Err(Error::shape(format!(
            "input spatial size {h}x{w} must be a positive multiple of {SPATIAL_MULTIPLE}"
        )));
    }
    if params.is_empty() {
        return Err(Error::Parameter("model has no parameters".into()));
    }
    Ok(())
}

/// Runs the network on `(N, 1, H, W)` and keeps the tape for backward.
pub fn forward_pass(params: &ModelParams, batch: &Tensor, mode: Mode, l2_coefficient: f64) -> Result<ForwardPass> {
    check_input(params, batch)?;
    let mut b = Builder::new(params, mode);
    let x = b.tape.leaf(batch.clone());

    let stem = b.conv_bn_relu(x, "init.conv", "init.bn", Conv2dOptions::default())?;
    let mut encoded = Vec::with_capacity(ENCODER_MULTIPLIERS.len());
    let mut h = stem;
    for i in 1..=ENCODER_MULTIPLIERS.len() {
        h = b.encoding_block(h, &format!("enc{i}"))?;
        encoded.push(h);
    }
    if params.config().cpb_enabled {
        h = b.cpb(h, CpbPaths::ALL)?;
    }
    // dec1 <- enc3, dec2 <- enc2, dec3 <- enc1, dec4 <- stem
    let skips = [encoded[2], encoded[1], encoded[0], stem];
    for (i, skip) in (1..=DECODER_MULTIPLIERS.len()).zip(skips) {
        h = b.decoding_block(h, skip, &format!("dec{i}"))?;
    }
    let logits = b.conv(h, "head.conv", Conv2dOptions::default())?;
    let output = b.tape.sigmoid(logits);

    let l2_penalty = b.l2_penalty(l2_coefficient)?;
    Ok(ForwardPass {
        tape: b.tape,
        output,
        leaves: b.leaves,
        batch_stats: b.stats,
        l2_penalty,
    })
}

/// Lesion probability map for a batch. Running statistics are not updated.
pub fn forward(params: &ModelParams, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    let pass = forward_pass(params, batch, mode, 0.0)?;
    Ok(pass.tape.value(pass.output).clone())
}

/// Applies the CPB module alone (selected paths, fused by summation).
pub fn cpb_forward(params: &ModelParams, input: &Tensor, paths: CpbPaths) -> Result<Tensor> {
    let expected = params.config().base_width * ENCODER_MULTIPLIERS[3];
    let (_, c, _, _) = input.dims4()?;
    if c != expected {
        return Err(Error::shape(format!("CPB expects {expected} channels, got {c}")));
    }
    if !params.config().cpb_enabled {
        return Err(Error::Parameter("model was built without the CPB module".into()));
    }
    let mut b = Builder::new(params, Mode::Eval);
    let x = b.tape.leaf(input.clone());
    let y = b.cpb(x, paths)?;
    Ok(b.tape.value(y).clone())
}

/// Loss and parameter gradients for one mini-batch.
pub struct StepResult {
    pub loss: LossValue,
    pub l2_penalty: f64,
    /// Hybrid loss plus the CPB penalty.
    pub total: f64,
    pub grads: IndexMap<String, Tensor>,
    pub batch_stats: Vec<(String, BatchStats)>,
}

pub fn loss_and_gradients(
    params: &ModelParams,
    images: &Tensor,
    masks: &Tensor,
    loss_cfg: &LossConfig,
    l2_coefficient: f64,
    mode: Mode,
) -> Result<StepResult> {
    let pass = forward_pass(params, images, mode, l2_coefficient)?;
    let probs = pass.tape.value(pass.output);
    let loss = hybrid_loss(probs, masks, loss_cfg)?;
    let mut tape_grads = pass.tape.backward(pass.output, loss.grad.clone())?;

    let mut grads = IndexMap::with_capacity(pass.leaves.len());
    for (name, var) in &pass.leaves {
        let g = tape_grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(pass.tape.value(*var).shape().to_vec()));
        grads.insert(name.clone(), g);
    }
    if params.config().cpb_enabled && l2_coefficient != 0.0 {
        for layer in cpb_layer_names() {
            let name = format!("{layer}.weight");
            let w = params.tensor(&name)?;
            let g = grads
                .get_mut(&name)
                .ok_or_else(|| Error::Parameter(format!("no gradient for {name}")))?;
            for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                *gv = (f64::from(*gv) + 2.0 * l2_coefficient * f64::from(wv)) as f32;
            }
        }
    }
    Ok(StepResult {
        total: loss.total + pass.l2_penalty,
        loss,
        l2_penalty: pass.l2_penalty,
        grads,
        batch_stats: pass.batch_stats,
    })
}
