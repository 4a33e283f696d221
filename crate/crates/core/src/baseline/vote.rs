use super::{probe_forward, PatchPrediction, ProbeParams};
use crate::error::{Error, Result};
use crate::mil::Bag;
use crate::SLIDE_CLASSES;

/// Slide label from per-patch predictions.
///
/// Background votes are dropped and the most frequent remaining pattern
/// wins. Count ties go to the tied pattern with the larger summed
/// probability over the voting patches, then to the lowest index. When every
/// patch votes background, the pattern with the largest probability summed
/// over all patches wins. Patch class `i + 1` maps to slide class `i`.
pub fn majority_vote(preds: &[PatchPrediction]) -> Result<usize> {
    if preds.is_empty() {
        return Err(Error::Contract("majority vote over no patches".into()));
    }
    let k = SLIDE_CLASSES.len();
    let mut votes = vec![0usize; k];
    let mut voter_mass = vec![0.0; k];
    let mut all_mass = vec![0.0; k];
    for p in preds {
        if p.probs.len() != k + 1 {
            return Err(Error::Dimension(format!(
                "patch prediction has {} probabilities, expected {}",
                p.probs.len(),
                k + 1
            )));
        }
        for (m, &q) in all_mass.iter_mut().zip(&p.probs[1..]) {
            *m += q;
        }
        if p.pred == 0 {
            continue;
        }
        votes[p.pred - 1] += 1;
        for (m, &q) in voter_mass.iter_mut().zip(&p.probs[1..]) {
            *m += q;
        }
    }
    let pick = |key: &dyn Fn(usize) -> (usize, f64)| {
        (0..k)
            .max_by(|&a, &b| {
                let (ca, ma) = key(a);
                let (cb, mb) = key(b);
                ca.cmp(&cb).then(ma.total_cmp(&mb)).then(b.cmp(&a))
            })
            .expect("k > 0")
    };
    if votes.iter().all(|&v| v == 0) {
        return Ok(pick(&|c| (0, all_mass[c])));
    }
    Ok(pick(&|c| (votes[c], voter_mass[c])))
}

/// Classifies every patch of `bag` with the probe and votes.
pub fn predict_slide(params: &ProbeParams, bag: &Bag) -> Result<(usize, Vec<PatchPrediction>)> {
    let preds = (0..bag.len())
        .map(|i| probe_forward(params, bag.embeddings.row(i), bag.coords[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((majority_vote(&preds)?, preds))
}
