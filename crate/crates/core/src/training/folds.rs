//! Patient-level stratified k-fold assignment.
//!
//! Patients are the unit of assignment: all slides of a patient land in the
//! same fold. Each patient is filed under the modal label of its slides.
//! Within a class, patient groups are shuffled, ordered largest first, and
//! each goes to the fold holding the fewest slides of that class (then the
//! fewest slides overall, then the lowest index). With one slide per
//! patient this deals the class round-robin, so per-fold class counts differ
//! by at most one.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SlideRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// slide id → test fold
    pub assignments: BTreeMap<String, usize>,
    pub folds: Vec<FoldSplit>,
}

impl FoldPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

struct PatientGroup<'a> {
    patient: &'a str,
    class: usize,
    slides: Vec<&'a SlideRecord>,
}

fn modal_label(slides: &[&SlideRecord]) -> usize {
    let mut counts = BTreeMap::new();
    for s in slides {
        *counts.entry(s.label.expect("checked")).or_insert(0usize) += 1;
    }
    // highest count, lowest label on ties
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&l, _)| l)
        .expect("patient has slides")
}

fn group_patients(records: &[SlideRecord]) -> Result<Vec<Vec<PatientGroup<'_>>>> {
    let mut by_patient: BTreeMap<&str, Vec<&SlideRecord>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in records {
        if r.label.is_none() {
            return Err(Error::Contract(format!(
                "slide {} has no label",
                r.slide_id
            )));
        }
        if r.patient_id.is_empty() {
            return Err(Error::Contract(format!(
                "slide {} has no patient id",
                r.slide_id
            )));
        }
        if !seen.insert(r.slide_id.as_str()) {
            return Err(Error::Contract(format!(
                "duplicate slide id {}",
                r.slide_id
            )));
        }
        by_patient.entry(&r.patient_id).or_default().push(r);
    }
    let n_classes = records.iter().filter_map(|r| r.label).max().unwrap_or(0) + 1;
    let mut classes: Vec<Vec<PatientGroup>> = (0..n_classes).map(|_| Vec::new()).collect();
    for (patient, mut slides) in by_patient {
        slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        let class = modal_label(&slides);
        classes[class].push(PatientGroup {
            patient,
            class,
            slides,
        });
    }
    Ok(classes)
}

/// Per class, holds out `round(val_fraction * n)` of the eligible patients
/// (keeping at least one for training).
fn split_holdout<'a, 'r>(
    classes: &'a [Vec<PatientGroup<'r>>],
    eligible: impl Fn(&PatientGroup) -> bool,
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(Vec<&'a PatientGroup<'r>>, Vec<&'a PatientGroup<'r>>), String> {
    let mut val_groups: Vec<&PatientGroup> = Vec::new();
    let mut train_groups: Vec<&PatientGroup> = Vec::new();
    for groups in classes {
        // canonical order before shuffling so the split ignores input order
        let mut rest: Vec<&PatientGroup> = groups.iter().filter(|g| eligible(g)).collect();
        rest.sort_by_key(|g| g.patient);
        rest.shuffle(rng);
        let n_val = if rest.len() < 2 {
            0
        } else {
            ((rest.len() as f64 * val_fraction).round() as usize).min(rest.len() - 1)
        };
        val_groups.extend(&rest[..n_val]);
        train_groups.extend(&rest[n_val..]);
    }
    if val_groups.is_empty() && train_groups.len() > 1 {
        // every class had a single patient: hold out the one with the most
        // slides
        let i = (0..train_groups.len())
            .max_by_key(|&i| (train_groups[i].slides.len(), std::cmp::Reverse(i)))
            .unwrap();
        val_groups.push(train_groups.remove(i));
    }
    if train_groups.is_empty() || val_groups.is_empty() {
        return Err("too few patients for a train/val split".into());
    }
    Ok((train_groups, val_groups))
}

fn slide_ids(groups: &[&PatientGroup]) -> Vec<String> {
    let mut v: Vec<String> = groups
        .iter()
        .flat_map(|g| g.slides.iter().map(|s| s.slide_id.clone()))
        .collect();
    v.sort();
    v
}

/// Patient-level stratified train/validation split of a whole cohort, for
/// training a single model outside cross-validation. Returns sorted
/// (train, val) slide ids.
pub fn patient_holdout(
    records: &[SlideRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    check_val_fraction(val_fraction)?;
    let classes = group_patients(records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, val) =
        split_holdout(&classes, |_| true, val_fraction, &mut rng).map_err(Error::Contract)?;
    Ok((slide_ids(&train), slide_ids(&val)))
}

fn check_val_fraction(val_fraction: f64) -> Result<()> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "val fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    Ok(())
}

/// Assigns patients to `k` test folds and splits each fold's remaining
/// patients into train and validation, stratified by class.
pub fn stratified_patient_folds(
    records: &[SlideRecord],
    k: usize,
    seed: u64,
    val_fraction: f64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Contract(format!("need k >= 2 folds, got {k}")));
    }
    check_val_fraction(val_fraction)?;
    let mut classes = group_patients(records)?;
    let n_patients: usize = classes.iter().map(Vec::len).sum();
    if k > n_patients {
        return Err(Error::Contract(format!(
            "{k} folds requested but only {n_patients} patients"
        )));
    }
    let n_classes = classes.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_counts = vec![vec![0usize; n_classes]; k];
    let mut totals = vec![0usize; k];
    let mut fold_of_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for groups in classes.iter_mut() {
        groups.shuffle(&mut rng);
        groups.sort_by_key(|g| std::cmp::Reverse(g.slides.len()));
        for g in groups.iter() {
            let f = (0..k)
                .min_by_key(|&f| (class_counts[f][g.class], totals[f], f))
                .expect("k >= 2");
            for s in &g.slides {
                class_counts[f][s.label.unwrap()] += 1;
            }
            totals[f] += g.slides.len();
            fold_of_patient.insert(g.patient, f);
        }
    }

    let mut assignments = BTreeMap::new();
    for groups in &classes {
        for g in groups {
            for s in &g.slides {
                assignments.insert(s.slide_id.clone(), fold_of_patient[g.patient]);
            }
        }
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(f as u64 + 1)));
        let mut test_ids = Vec::new();
        for groups in &classes {
            for g in groups.iter().filter(|g| fold_of_patient[g.patient] == f) {
                test_ids.extend(g.slides.iter().map(|s| s.slide_id.clone()));
            }
        }
        let (train_groups, val_groups) = split_holdout(
            &classes,
            |g| fold_of_patient[g.patient] != f,
            val_fraction,
            &mut rng,
        )
        .map_err(|m| Error::Contract(format!("fold {f}: {m}")))?;
        test_ids.sort();
        folds.push(FoldSplit {
            train_ids: slide_ids(&train_groups),
            val_ids: slide_ids(&val_groups),
            test_ids,
        });
    }
    Ok(FoldPlan {
        k,
        assignments,
        folds,
    })
}
