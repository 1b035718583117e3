use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::SplitRatios;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{self, Thresholds};
use crate::network::ModelConfig;
use crate::trainer::TrainSchedule;

/// Single split (`k = 1`, using `ratios`) or k-fold cross-validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub k: usize,
    pub ratios: SplitRatios,
    /// Share of the non-test patients held out for validation in k-fold mode.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            k: 10,
            ratios: SplitRatios::default(),
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub binarize: f64,
    pub group: f64,
    pub discriminate: f64,
    pub synthetic_min_rate: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            binarize: f64::from(metrics::BINARIZE_THRESHOLD),
            group: metrics::GROUP_THRESHOLD,
            discriminate: metrics::DISCRIMINATION_THRESHOLD,
            synthetic_min_rate: crate::augment::MIN_SYNTHETIC_RATE,
        }
    }
}

impl ThresholdConfig {
    pub fn scoring(&self) -> Thresholds {
        Thresholds {
            group: self.group,
            discriminate: self.discriminate,
        }
    }
}

/// File locations. Relative paths are resolved against the directory of
/// the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Main dataset for training and evaluation.
    pub manifest: Option<PathBuf>,
    /// Synthetic pairs mixed into every training epoch.
    pub synthetic_manifest: Option<PathBuf>,
    /// Sources for corpus generation.
    pub infected_manifest: Option<PathBuf>,
    pub healthy_manifest: Option<PathBuf>,
    pub exclusions: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic pairs requested from `augment`.
    pub synthetic_count: usize,
    /// Average the absolute error over the lung only.
    pub lung_only_mae: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic_count: 100,
            lung_only_mae: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub split: SplitConfig,
    pub thresholds: ThresholdConfig,
    pub paths: PathsConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Parses TOML text. Unknown keys are rejected; relative paths are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_string()]))?;
        config.paths.resolve(base_dir);
        Ok(config)
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let config = Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msgs) => {
                Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Replaces every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.schedule.seed = seed;
        self.split.seed = seed;
        self
    }

    /// Every problem with the config, each prefixed by its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.model.base_width == 0 {
            out.push("model.base_width: must be positive".to_string());
        }
        out.extend(self.loss.problems("loss"));
        out.extend(self.schedule.problems("schedule"));

        let s = &self.split;
        if s.k == 0 {
            out.push("split.k: must be positive (1 selects a single ratio split)".to_string());
        }
        let r = s.ratios;
        if r.train < 0.0 || r.val < 0.0 || r.test < 0.0 || !(r.train + r.val + r.test > 0.0) {
            out.push("split.ratios: must be non-negative with a positive sum".to_string());
        }
        if !(0.0..1.0).contains(&s.val_fraction) {
            out.push(format!("split.val_fraction: {} is outside [0, 1)", s.val_fraction));
        }

        let t = &self.thresholds;
        for (name, v) in [
            ("binarize", t.binarize),
            ("group", t.group),
            ("discriminate", t.discriminate),
            ("synthetic_min_rate", t.synthetic_min_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("thresholds.{name}: {v} is outside [0, 1]"));
            }
        }

        let p = &self.paths;
        for (name, path) in [
            ("manifest", &p.manifest),
            ("synthetic_manifest", &p.synthetic_manifest),
            ("infected_manifest", &p.infected_manifest),
            ("healthy_manifest", &p.healthy_manifest),
            ("exclusions", &p.exclusions),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    out.push(format!("paths.{name}: {} does not exist", path.display()));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are always representable")
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.manifest,
            &mut self.synthetic_manifest,
            &mut self.infected_manifest,
            &mut self.healthy_manifest,
            &mut self.exclusions,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Required path from the config, or a config error naming the field.
pub(crate) fn require<'a>(path: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(vec![format!("paths.{field}: required for this command")]))
}
