//! The segmentation network: an initial convolution, four residual encoding
//! blocks with strided down-sampling, an optional context perception
//! boosting (CPB) module, four decoding blocks with skip connections, and a
//! 1x1 sigmoid head.
//!
//! Parameters live in [`ModelParams`], an ordered map from layer path to
//! tensor. The forward pass is built on a [`Tape`](crate::autograd::Tape)
//! so the same code serves inference and training.

mod forward;
mod weights;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use forward::{cpb_forward, forward, forward_pass, loss_and_gradients, CpbPaths, ForwardPass, Mode, StepResult};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, WEIGHTS_MAGIC};

/// Trainable parameter totals reported for the full network and for the
/// network without the CPB module.
pub const REFERENCE_PARAMS_WITH_CPB: usize = 8_750_000;
pub const REFERENCE_PARAMS_WITHOUT_CPB: usize = 6_320_000;

/// Dilation rates of the four parallel CPB convolutions.
pub const CPB_DILATIONS: [usize; 4] = [1, 2, 4, 8];

/// Encoder widths as multiples of the base width.
pub(crate) const ENCODER_MULTIPLIERS: [usize; 4] = [1, 2, 4, 8];
/// Decoder widths as multiples of the base width.
pub(crate) const DECODER_MULTIPLIERS: [usize; 4] = [16, 8, 4, 2];

/// Input height and width must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_width: usize,
    pub cpb_enabled: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            cpb_enabled: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::Weight,
        ParamKind::Bias,
        ParamKind::Scale,
        ParamKind::Shift,
        ParamKind::RunningMean,
        ParamKind::RunningVar,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Scale => "scale",
            ParamKind::Shift => "shift",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Named network parameters in construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    entries: IndexMap<String, Param>,
}

/// One layer of the architecture, used to build and count parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        name: String,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
}

impl LayerSpec {
    fn conv(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            c_in,
            c_out,
            kernel,
        }
    }

    fn bn(name: impl Into<String>, channels: usize) -> Self {
        LayerSpec::BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. } | LayerSpec::BatchNorm { name, .. } => name,
        }
    }

    pub fn trainable_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                c_in, c_out, kernel, ..
            } => kernel * kernel * c_in * c_out + c_out,
            LayerSpec::BatchNorm { channels, .. } => 2 * channels,
        }
    }
}

/// The layer list for a configuration, in forward order.
pub fn architecture(config: &ModelConfig) -> Vec<LayerSpec> {
    let b = config.base_width;
    let mut layers = vec![LayerSpec::conv("init.conv", 1, b, 3), LayerSpec::bn("init.bn", b)];

    let mut c_in = b;
    for (i, m) in ENCODER_MULTIPLIERS.iter().enumerate() {
        let f = m * b;
        let blk = format!("enc{}", i + 1);
        layers.push(LayerSpec::conv(format!("{blk}.unit1.conv1"), c_in, f, 3));
        layers.push(LayerSpec::bn(format!("{blk}.unit1.bn1"), f));
        layers.push(LayerSpec::conv(format!("{blk}.unit1.conv2"), f, f, 3));
        layers.push(LayerSpec::bn(format!("{blk}.unit1.bn2"), f));
        layers.push(LayerSpec::conv(format!("{blk}.unit1.proj"), c_in, f, 1));
        layers.push(LayerSpec::conv(format!("{blk}.unit2.conv1"), f, f, 3));
        layers.push(LayerSpec::bn(format!("{blk}.unit2.bn1"), f));
        layers.push(LayerSpec::conv(format!("{blk}.unit2.conv2"), f, f, 3));
        layers.push(LayerSpec::bn(format!("{blk}.unit2.bn2"), f));
        c_in = f;
    }

    if config.cpb_enabled {
        layers.push(LayerSpec::conv("cpb.proj", c_in, c_in, 1));
        for d in CPB_DILATIONS {
            layers.push(LayerSpec::conv(format!("cpb.rate{d}"), c_in, c_in, 3));
        }
    }

    // Skip sources by resolution: enc3, enc2, enc1, then the initial conv.
    let skips = [4 * b, 2 * b, b, b];
    for (i, (m, skip)) in DECODER_MULTIPLIERS.iter().zip(skips).enumerate() {
        let f = m * b;
        let blk = format!("dec{}", i + 1);
        layers.push(LayerSpec::conv(format!("{blk}.conv"), c_in + skip, f, 3));
        layers.push(LayerSpec::bn(format!("{blk}.bn"), f));
        c_in = f;
    }
    layers.push(LayerSpec::conv("head.conv", c_in, 1, 1));
    layers
}

pub(crate) fn cpb_layer_names() -> Vec<String> {
    std::iter::once("cpb.proj".to_string())
        .chain(CPB_DILATIONS.iter().map(|d| format!("cpb.rate{d}")))
        .collect()
}

/// Allocates and initializes all parameters.
///
/// Convolution kernels are drawn from `N(0, 2 / fan_in)`; biases start at
/// zero, batch-norm scale at one and shift at zero, running statistics at
/// mean 0 / variance 1.
pub fn build_model(config: ModelConfig) -> Result<ModelParams> {
    if config.base_width < 4 {
        return Err(Error::Parameter(format!(
            "base_width must be at least 4, got {}",
            config.base_width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::empty(config);
    for layer in architecture(&config) {
        match layer {
            LayerSpec::Conv {
                name,
                c_in,
                c_out,
                kernel,
            } => {
                let fan_in = (c_in * kernel * kernel) as f32;
                let w = Tensor::randn(vec![c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), &mut rng);
                params.insert(&name, ParamKind::Weight, w);
                params.insert(&name, ParamKind::Bias, Tensor::zeros(vec![c_out]));
            }
            LayerSpec::BatchNorm { name, channels } => {
                params.insert(&name, ParamKind::Scale, Tensor::full(vec![channels], 1.0));
                params.insert(&name, ParamKind::Shift, Tensor::zeros(vec![channels]));
                params.insert(&name, ParamKind::RunningMean, Tensor::zeros(vec![channels]));
                params.insert(&name, ParamKind::RunningVar, Tensor::full(vec![channels], 1.0));
            }
        }
    }
    Ok(params)
}

impl ModelParams {
    pub fn empty(config: ModelConfig) -> Self {
        Self {
            config,
            entries: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn insert(&mut self, layer: &str, kind: ParamKind, tensor: Tensor) {
        self.entries
            .insert(format!("{layer}.{}", kind.suffix()), Param { kind, tensor });
    }

    pub(crate) fn insert_named(&mut self, name: String, param: Param) {
        self.entries.insert(name, param);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .filter(|(_, p)| p.kind.trainable())
            .map(|(k, p)| (k, &p.tensor))
    }

    /// Folds batch statistics from a training-mode forward pass into the
    /// running averages of the named batch-norm layers.
    pub fn apply_batch_stats(&mut self, stats: &[(String, crate::ops::BatchStats)]) -> Result<()> {
        for (layer, s) in stats {
            let mean_key = format!("{layer}.running_mean");
            let var_key = format!("{layer}.running_var");
            let mut mean = self.tensor(&mean_key)?.clone();
            let mut var = self.tensor(&var_key)?.clone();
            s.blend_into(&mut mean, &mut var);
            *self.tensor_mut(&mean_key)? = mean;
            *self.tensor_mut(&var_key)? = var;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.is_finite())
    }

    /// FNV-1a over names and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, p) in &self.entries {
            feed(name.as_bytes());
            for v in p.tensor.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerRow {
    pub layer: String,
    pub count: usize,
}

/// Trainable parameters per layer (running statistics excluded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLedger {
    pub rows: Vec<LedgerRow>,
    pub total: usize,
}

impl ParamLedger {
    /// Trainable parameters in layers whose path starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.layer.starts_with(prefix))
            .map(|r| r.count)
            .sum()
    }
}

pub fn count_params(params: &ModelParams) -> ParamLedger {
    let mut rows: Vec<LedgerRow> = Vec::new();
    for (name, p) in params.iter().filter(|(_, p)| p.kind.trainable()) {
        let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
        match rows.last_mut() {
            Some(row) if row.layer == layer => row.count += p.tensor.len(),
            _ => rows.push(LedgerRow {
                layer: layer.to_string(),
                count: p.tensor.len(),
            }),
        }
    }
    let total = rows.iter().map(|r| r.count).sum();
    ParamLedger { rows, total }
}

/// Relative deviation of `total` from the reference count for the
/// configuration, when one exists (base width 32 only).
pub fn reference_deviation(config: &ModelConfig, total: usize) -> Option<f64> {
    if config.base_width != 32 {
        return None;
    }
    let target = if config.cpb_enabled {
        REFERENCE_PARAMS_WITH_CPB
    } else {
        REFERENCE_PARAMS_WITHOUT_CPB
    };
    Some((total as f64 - target as f64) / target as f64)
}
