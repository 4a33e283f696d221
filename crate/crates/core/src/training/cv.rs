//! k-fold evaluation of the MIL head and of the probe + vote baseline on
//! held-out test folds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use super::{stratified_patient_folds, train_mil, EpochLog, FoldPlan, TrainConfig};
use crate::baseline::{predict_slide, train_probe, PatchDataset};
use crate::data::SlideRecord;
use crate::error::{Error, Result};
use crate::metrics::{
    cohen_kappa, confusion, fold_summary, format_mean_std, per_class_f1, weighted_f1,
    ConfusionMatrix,
};
use crate::mil::{predict, Bag, MilConfig};
use crate::SLIDE_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvOptions {
    pub k: usize,
    /// Seed of the fold plan. Training seeds come from the train configs.
    pub seed: u64,
    /// Worker threads for running folds; 0 = all cores.
    pub threads: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            k: 5,
            seed: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub confusion: ConfusionMatrix,
    pub weighted_f1: f64,
    pub kappa: f64,
    /// `None` for classes absent from the test fold.
    pub per_class_f1: Vec<Option<f64>>,
    /// (slide id, true class, predicted class)
    pub predictions: Vec<(String, usize, usize)>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub weighted_f1: (f64, f64),
    pub kappa: (f64, f64),
}

impl CvReport {
    fn from_folds(plan: FoldPlan, folds: Vec<FoldResult>) -> Result<Self> {
        let wf1: Vec<f64> = folds.iter().map(|f| f.weighted_f1).collect();
        let kappa: Vec<f64> = folds.iter().map(|f| f.kappa).collect();
        Ok(CvReport {
            weighted_f1: fold_summary(&wf1)?,
            kappa: fold_summary(&kappa)?,
            plan,
            folds,
        })
    }

    /// `fold,weighted_f1,kappa,f1_class0..` with `NA` for absent classes.
    pub fn to_csv(&self) -> String {
        let k = self
            .folds
            .first()
            .map_or(SLIDE_CLASSES.len(), |f| f.per_class_f1.len());
        let mut out = String::from("fold,weighted_f1,kappa");
        for c in 0..k {
            let _ = write!(out, ",f1_class{c}");
        }
        out.push('\n');
        for f in &self.folds {
            let _ = write!(out, "{},{:.6},{:.6}", f.fold, f.weighted_f1, f.kappa);
            for v in &f.per_class_f1 {
                match v {
                    Some(x) => {
                        let _ = write!(out, ",{x:.6}");
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable summary: per-fold lines and `mean±std` rows.
    pub fn table(&self, title: &str) -> String {
        let mut out = format!("{title} (held-out test folds, k={})\n", self.plan.k);
        let _ = writeln!(out, "{:<6} {:>11} {:>7}", "fold", "Weighted F1", "κ");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{:<6} {:>11.3} {:>7.3}",
                f.fold, f.weighted_f1, f.kappa
            );
        }
        let _ = writeln!(
            out,
            "{:<6} {:>11} {:>7}",
            "mean",
            format_mean_std(self.weighted_f1),
            format_mean_std(self.kappa)
        );
        let mut pooled = ConfusionMatrix::zeros(SLIDE_CLASSES.len());
        for f in &self.folds {
            let _ = pooled.merge(&f.confusion);
        }
        let f1 = per_class_f1(&pooled);
        let _ = write!(out, "per-class F1 (pooled):");
        for (name, v) in SLIDE_CLASSES.iter().zip(f1) {
            match v {
                Some(x) => {
                    let _ = write!(out, " {name}={x:.3}");
                }
                None => {
                    let _ = write!(out, " {name}=NA");
                }
            }
        }
        out.push('\n');
        out
    }
}

fn records_for(bags: &[Bag]) -> Result<Vec<SlideRecord>> {
    let mut seen = HashSet::new();
    bags.iter()
        .map(|b| {
            if b.label.is_none() {
                return Err(Error::Contract(format!("bag {} has no label", b.slide_id)));
            }
            if !seen.insert(&b.slide_id) {
                return Err(Error::Contract(format!(
                    "duplicate slide id {}",
                    b.slide_id
                )));
            }
            Ok(SlideRecord::for_bag(b))
        })
        .collect()
}

fn run_folds<F>(bags: &[Bag], opts: &CvOptions, val_fraction: f64, fold_fn: F) -> Result<CvReport>
where
    F: Fn(&[Bag], &[Bag], &[Bag]) -> Result<(Vec<usize>, Vec<EpochLog>)> + Sync,
{
    let records = records_for(bags)?;
    let plan = stratified_patient_folds(&records, opts.k, opts.seed, val_fraction)?;
    let by_id: HashMap<&str, &Bag> = bags.iter().map(|b| (b.slide_id.as_str(), b)).collect();
    let gather =
        |ids: &[String]| -> Vec<Bag> { ids.iter().map(|id| by_id[id.as_str()].clone()).collect() };

    let eval_fold = |f: usize| -> Result<FoldResult> {
        let split = &plan.folds[f];
        let (train, val, test) = (
            gather(&split.train_ids),
            gather(&split.val_ids),
            gather(&split.test_ids),
        );
        let (preds, log) = fold_fn(&train, &val, &test)?;
        let truth: Vec<usize> = test.iter().map(|b| b.label.unwrap()).collect();
        let cm = confusion(&truth, &preds, SLIDE_CLASSES.len())?;
        Ok(FoldResult {
            fold: f,
            weighted_f1: weighted_f1(&cm),
            kappa: cohen_kappa(&cm),
            per_class_f1: per_class_f1(&cm),
            predictions: test
                .iter()
                .zip(&truth)
                .zip(&preds)
                .map(|((b, &t), &p)| (b.slide_id.clone(), t, p))
                .collect(),
            confusion: cm,
            best_epoch: log.last().map_or(0, |l| l.best_epoch),
            log,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let folds = pool.install(|| {
        (0..plan.k)
            .into_par_iter()
            .map(eval_fold)
            .collect::<Result<Vec<_>>>()
    })?;
    CvReport::from_folds(plan, folds)
}

/// Trains the MIL head on each fold's train split, early-stops on its
/// validation split and scores the test split.
pub fn cross_validate_mil(
    bags: &[Bag],
    opts: &CvOptions,
    config: MilConfig,
    tcfg: &TrainConfig,
) -> Result<CvReport> {
    run_folds(bags, opts, tcfg.val_fraction, |train, val, test| {
        let (params, log) = train_mil(train, val, config, tcfg)?;
        let preds = test
            .iter()
            .map(|b| predict(&params, b).map(|p| p.class))
            .collect::<Result<Vec<_>>>()?;
        Ok((preds, log))
    })
}

/// Trains the patch probe on the annotated patches of each fold's train
/// slides, early-stops on those of its validation slides, and scores the test
/// slides by majority vote.
pub fn cross_validate_vote(
    bags: &[Bag],
    patch_labels: &BTreeMap<String, Vec<Option<u8>>>,
    opts: &CvOptions,
    tcfg: &TrainConfig,
) -> Result<CvReport> {
    run_folds(bags, opts, tcfg.val_fraction, |train, val, test| {
        let train_set = PatchDataset::from_bags(train, patch_labels, |_| true)?;
        let val_set = PatchDataset::from_bags(val, patch_labels, |_| true)?;
        let (probe, log) = train_probe(&train_set, &val_set, tcfg)?;
        let preds = test
            .iter()
            .map(|b| predict_slide(&probe, b).map(|(c, _)| c))
            .collect::<Result<Vec<_>>>()?;
        Ok((preds, log))
    })
}
