//! Patient-independent train/validation/test partitions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::manifest::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.1,
            test: 0.3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Checks that no patient appears in two partitions of one fold and, for
    /// k > 1, that the test groups partition the patient population.
    pub fn check(&self, patients: &[String]) -> Result<()> {
        use std::collections::BTreeSet;
        for (i, fold) in self.folds.iter().enumerate() {
            let mut seen = BTreeSet::new();
            for p in fold.train.iter().chain(&fold.val).chain(&fold.test) {
                if !seen.insert(p) {
                    return Err(Error::validation(format!("fold {i}: patient {p} appears twice")));
                }
            }
        }
        if self.k > 1 {
            let mut tests: Vec<&String> = self.folds.iter().flat_map(|f| &f.test).collect();
            tests.sort();
            let mut all: Vec<&String> = patients.iter().collect();
            all.sort();
            if tests != all {
                return Err(Error::validation("test groups do not partition the patients"));
            }
        }
        Ok(())
    }
}

fn shuffled_patients(manifest: &DatasetManifest, seed: u64) -> Vec<String> {
    let mut patients = manifest.patients();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    patients
}

/// Single 60/10/30-style split at patient granularity. Validation and test
/// counts are rounded to nearest (minimum one each); training takes the rest.
pub fn split(manifest: &DatasetManifest, ratios: SplitRatios, seed: u64) -> Result<FoldPlan> {
    let patients = shuffled_patients(manifest, seed);
    let n = patients.len();
    if n < 3 {
        return Err(Error::validation(format!(
            "need at least 3 patients for a train/val/test split, have {n}"
        )));
    }
    let total = ratios.train + ratios.val + ratios.test;
    if !(total > 0.0) || ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 {
        return Err(Error::validation(
            "split ratios must be non-negative with a positive sum",
        ));
    }
    let n_val = ((ratios.val / total * n as f64).round() as usize).max(1);
    let n_test = ((ratios.test / total * n as f64).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::validation(format!(
            "{n} patients leave no training patients after {n_val} val / {n_test} test"
        )));
    }
    let mut test = patients[..n_test].to_vec();
    let mut val = patients[n_test..n_test + n_val].to_vec();
    let mut train = patients[n_test + n_val..].to_vec();
    test.sort();
    val.sort();
    train.sort();
    Ok(FoldPlan {
        k: 1,
        folds: vec![Fold { train, val, test }],
    })
}

/// k-fold cross-validation at patient granularity. Patients are shuffled
/// once and cut into k near-equal test groups; in each fold `val_fraction`
/// of the remaining patients (rounded, at least one) form the validation set.
pub fn kfold(manifest: &DatasetManifest, k: usize, val_fraction: f64, seed: u64) -> Result<FoldPlan> {
    let patients = shuffled_patients(manifest, seed);
    let n = patients.len();
    if k < 2 {
        return Err(Error::validation(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::validation(format!("{n} patients cannot fill {k} folds")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::validation("val_fraction must be in [0, 1)"));
    }

    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let size = n / k + usize::from(i < n % k);
        groups.push(patients[start..start + size].to_vec());
        start += size;
    }

    let mut folds = Vec::with_capacity(k);
    for (i, test) in groups.iter().enumerate() {
        let mut rest: Vec<String> = groups
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, g)| g.iter().cloned())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        rest.shuffle(&mut rng);
        let n_val = if val_fraction > 0.0 {
            ((val_fraction * rest.len() as f64).round() as usize)
                .max(1)
                .min(rest.len().saturating_sub(1))
        } else {
            0
        };
        let mut val = rest[..n_val].to_vec();
        let mut train = rest[n_val..].to_vec();
        let mut test = test.clone();
        val.sort();
        train.sort();
        test.sort();
        folds.push(Fold { train, val, test });
    }
    Ok(FoldPlan { k, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::manifest::ManifestEntry;
    use proptest::prelude::*;
    use std::path::PathBuf;

    fn manifest(patients: usize, slices: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for p in 0..patients {
            for s in 0..slices {
                entries.push(ManifestEntry {
                    patient_id: format!("p{p:02}"),
                    slice_id: format!("s{s}"),
                    image: PathBuf::from("i"),
                    lung_mask: PathBuf::from("l"),
                    infection_mask: None,
                    label: None,
                });
            }
        }
        DatasetManifest { source: None, entries }
    }

    #[test]
    fn ten_patients_split_six_one_three() {
        let m = manifest(10, 3);
        let plan = split(&m, SplitRatios::default(), 4).unwrap();
        let f = &plan.folds[0];
        assert_eq!((f.train.len(), f.val.len(), f.test.len()), (6, 1, 3));
        plan.check(&m.patients()).unwrap();
        assert_eq!(plan, split(&m, SplitRatios::default(), 4).unwrap());
    }

    #[test]
    fn too_few_patients() {
        assert!(split(&manifest(2, 1), SplitRatios::default(), 0).is_err());
        assert!(split(&manifest(3, 1), SplitRatios::default(), 0).is_ok());
        assert!(kfold(&manifest(5, 1), 10, 0.1, 0).is_err());
    }

    #[test]
    fn kfold_groups_of_two() {
        let m = manifest(20, 2);
        let plan = kfold(&m, 10, 0.1, 9).unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 2));
        plan.check(&m.patients()).unwrap();
        assert_eq!(plan, kfold(&m, 10, 0.1, 9).unwrap());
    }

    proptest! {
        #[test]
        fn folds_are_patient_independent(n in 3usize..40, k in 2usize..6, seed in any::<u64>()) {
            let m = manifest(n, 1);
            let patients = m.patients();
            if n >= k {
                let plan = kfold(&m, k, 0.1, seed).unwrap();
                prop_assert!(plan.check(&patients).is_ok());
                for f in &plan.folds {
                    prop_assert_eq!(f.train.len() + f.val.len() + f.test.len(), n);
                }
            }
            let plan = split(&m, SplitRatios::default(), seed).unwrap();
            prop_assert!(plan.check(&patients).is_ok());
        }
    }
}
