//! Tab-separated dataset manifests and exclusion lists.
//!
//! Manifest lines carry six fields:
//!
//! ```text
//! patient_id  slice_id  image_path  lung_mask_path  infection_mask_path|-  label|-
//! ```
//!
//! Labels are `1` (infected) or `0` (clean). Paths are relative to the
//! manifest's directory. Lines starting with `#` are comments, except
//! `# source: <tag>` which names the dataset.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data_io::format::{read_mask, read_tensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One chest CT slice with its masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CtSlice {
    pub patient_id: String,
    pub slice_id: String,
    /// Raw intensities, `(H, W)`.
    pub image: Tensor,
    pub lung_mask: Tensor,
    pub infection_mask: Option<Tensor>,
    pub infected_label: Option<bool>,
}

impl CtSlice {
    /// Checks shape agreement, mask binarity, and that a present infection
    /// mask agrees with the slice-level label.
    pub fn validate(&self) -> Result<()> {
        let id = format!("{}/{}", self.patient_id, self.slice_id);
        self.image
            .dims2()
            .map_err(|_| Error::shape(format!("{id}: image must be (H,W), got {:?}", self.image.shape())))?;
        let masks = std::iter::once(&self.lung_mask).chain(self.infection_mask.as_ref());
        for m in masks {
            if m.shape() != self.image.shape() {
                return Err(Error::shape(format!(
                    "{id}: mask shape {:?} differs from image {:?}",
                    m.shape(),
                    self.image.shape()
                )));
            }
            if !m.is_binary() {
                return Err(Error::validation(format!("{id}: masks must be binary")));
            }
        }
        if let (Some(mask), Some(label)) = (&self.infection_mask, self.infected_label) {
            if (mask.count_nonzero() > 0) != label {
                return Err(Error::validation(format!(
                    "{id}: label {} contradicts infection mask",
                    if label { "infected" } else { "clean" }
                )));
            }
        }
        Ok(())
    }

    pub fn has_lung(&self) -> bool {
        self.lung_mask.count_nonzero() > 0
    }

    /// The infection mask, or an all-zero mask for slices known to be clean.
    pub fn truth_mask(&self) -> Option<Tensor> {
        match (&self.infection_mask, self.infected_label) {
            (Some(m), _) => Some(m.clone()),
            (None, Some(false)) => Some(Tensor::zeros(self.image.shape().to_vec())),
            _ => None,
        }
    }

    pub fn key(&self) -> (String, String) {
        (self.patient_id.clone(), self.slice_id.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub slice_id: String,
    pub image: PathBuf,
    pub lung_mask: PathBuf,
    pub infection_mask: Option<PathBuf>,
    pub label: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub source: Option<String>,
    /// Sorted by `(patient_id, slice_id)`.
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: &Path, origin: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Manifest {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut manifest = DatasetManifest::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                if let Some(tag) = comment.trim().strip_prefix("source:") {
                    manifest.source = Some(tag.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(err(
                    lineno,
                    format!("expected 6 tab-separated fields, found {}", fields.len()),
                ));
            }
            let optional = |s: &str| (s != "-").then(|| base_dir.join(s));
            let label = match fields[5] {
                "-" => None,
                "1" => Some(true),
                "0" => Some(false),
                other => return Err(err(lineno, format!("label must be 1, 0 or -, got {other:?}"))),
            };
            let entry = ManifestEntry {
                patient_id: fields[0].to_string(),
                slice_id: fields[1].to_string(),
                image: base_dir.join(fields[2]),
                lung_mask: base_dir.join(fields[3]),
                infection_mask: optional(fields[4]),
                label,
            };
            if entry.patient_id.is_empty() || entry.slice_id.is_empty() {
                return Err(err(lineno, "patient and slice ids must be non-empty".into()));
            }
            if !seen.insert((entry.patient_id.clone(), entry.slice_id.clone())) {
                return Err(err(
                    lineno,
                    format!("duplicate slice {}/{}", entry.patient_id, entry.slice_id),
                ));
            }
            manifest.entries.push(entry);
        }
        manifest
            .entries
            .sort_by(|a, b| (&a.patient_id, &a.slice_id).cmp(&(&b.patient_id, &b.slice_id)));
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Manifest text with paths written relative to `base_dir` where possible.
    pub fn to_text(&self, base_dir: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base_dir).unwrap_or(p).to_string_lossy().into_owned();
        let mut out = String::new();
        if let Some(src) = &self.source {
            let _ = writeln!(out, "# source: {src}");
        }
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.patient_id,
                e.slice_id,
                rel(&e.image),
                rel(&e.lung_mask),
                e.infection_mask.as_deref().map_or("-".to_string(), rel),
                match e.label {
                    Some(true) => "1",
                    Some(false) => "0",
                    None => "-",
                }
            );
        }
        out
    }

    /// Distinct patient ids in sorted order.
    pub fn patients(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.patient_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn without(&self, exclusions: &ExclusionList) -> Self {
        Self {
            source: self.source.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| !exclusions.contains(&e.patient_id, &e.slice_id))
                .cloned()
                .collect(),
        }
    }

    pub fn for_patients(&self, patients: &[String]) -> Self {
        let keep: HashSet<&str> = patients.iter().map(String::as_str).collect();
        Self {
            source: self.source.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| keep.contains(e.patient_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Reads every referenced tensor, in manifest order.
    pub fn load_slices(&self) -> Result<Vec<CtSlice>> {
        self.entries
            .iter()
            .map(|e| {
                let slice = CtSlice {
                    patient_id: e.patient_id.clone(),
                    slice_id: e.slice_id.clone(),
                    image: read_tensor(&e.image)?,
                    lung_mask: read_mask(&e.lung_mask)?,
                    infection_mask: e.infection_mask.as_ref().map(read_mask).transpose()?,
                    infected_label: e.label,
                };
                slice.validate()?;
                Ok(slice)
            })
            .collect()
    }
}

/// `(patient_id, slice_id)` pairs to drop from an experiment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExclusionList {
    pairs: BTreeSet<(String, String)>,
}

impl ExclusionList {
    pub fn contains(&self, patient: &str, slice: &str) -> bool {
        self.pairs.contains(&(patient.to_string(), slice.to_string()))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One `patient_id slice_id` pair per line, separated by a tab or spaces.
pub fn parse_exclusions(text: &str, origin: &Path) -> Result<ExclusionList> {
    let mut list = ExclusionList::default();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [patient, slice] = fields[..] else {
            return Err(Error::Manifest {
                path: origin.to_path_buf(),
                line: idx + 1,
                reason: format!("expected `patient_id slice_id`, got {line:?}"),
            });
        };
        list.pairs.insert((patient.to_string(), slice.to_string()));
    }
    Ok(list)
}

pub fn load_exclusions(path: impl AsRef<Path>) -> Result<ExclusionList> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_exclusions(&text, path)
}
