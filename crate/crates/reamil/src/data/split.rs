//! Patient-level stratified splitting.
//!
//! Assignment works on patients, never slides, so no patient can leak
//! across splits. Within each class, patients are shuffled by a seeded
//! stream and dealt to train/val/test with largest-remainder rounding,
//! which keeps per-class proportions within one patient of the targets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{DataError, Split};
use crate::rng::derived_rng;

#[derive(Clone, Copy, Debug)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DataError> {
        let sum = train + val + test;
        if train < 0.0 || val < 0.0 || test < 0.0 || (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::BadRatios {
                ratios: [train, val, test],
                sum,
            });
        }
        Ok(SplitRatios { train, val, test })
    }

    fn as_array(self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// A slide pending split assignment.
#[derive(Clone, Debug)]
pub struct SplitEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub label: usize,
}

/// Largest-remainder apportionment of `n` into parts proportional to
/// `ratios`. Ties go to the earlier split, deterministically.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    let mut assigned = 0;
    for i in 0..3 {
        let target = ratios[i] * n as f64;
        counts[i] = target.floor() as usize;
        remainders[i] = target - target.floor();
        assigned += counts[i];
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| remainders[b].partial_cmp(&remainders[a]).unwrap().then(a.cmp(&b)));
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Assigns every slide to a split via its patient. Stratification is by
/// patient class: the patient's lowest slide label (patients in this corpus
/// carry one slide, so this is simply that slide's label).
pub fn split_patients(
    entries: &[SplitEntry],
    ratios: SplitRatios,
    seed: u64,
) -> Result<BTreeMap<String, Split>, DataError> {
    // patient -> (class, slides), in a deterministic order.
    let mut patients: BTreeMap<&str, (usize, Vec<&str>)> = BTreeMap::new();
    for e in entries {
        let entry = patients
            .entry(e.patient_id.as_str())
            .or_insert((e.label, Vec::new()));
        entry.0 = entry.0.min(e.label);
        entry.1.push(e.slide_id.as_str());
    }

    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (pid, (class, _)) in &patients {
        by_class.entry(*class).or_default().push(pid);
    }

    let mut patient_split: BTreeMap<&str, Split> = BTreeMap::new();
    for (class, mut ids) in by_class {
        if ids.len() < Split::ALL.len() {
            return Err(DataError::TooFewPatients {
                class,
                patients: ids.len(),
                splits: Split::ALL.len(),
            });
        }
        ids.sort_unstable();
        let mut rng = derived_rng(seed, "patient-split", class as u64);
        ids.shuffle(&mut rng);
        let counts = apportion(ids.len(), ratios.as_array());
        let mut cursor = 0;
        for (split, &count) in Split::ALL.iter().zip(&counts) {
            for &pid in &ids[cursor..cursor + count] {
                patient_split.insert(pid, *split);
            }
            cursor += count;
        }
    }

    let mut out = BTreeMap::new();
    for (pid, (_, slides)) in &patients {
        let split = patient_split[pid];
        for &sid in slides {
            out.insert(sid.to_string(), split);
        }
    }
    Ok(out)
}
