//! Seeded synthetic cohorts standing in for encoder features.
//!
//! Patch class `j` (0 = background, 1..=5 = growth patterns) is an isotropic
//! Gaussian around `separation * e_j`. A slide labeled with pattern `c` draws
//! a fraction of its patches from component `c + 1`; the rest come either
//! from the other components or from a confuser component shared by every
//! slide. The confuser sits at `separation * (e_mimic + e_6)`: a patch
//! classifier trained only on annotated components reads it as the mimicked
//! pattern, while slide-level training can learn to ignore it.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::Coord;
use crate::error::{Error, Result};
use crate::mil::Bag;
use crate::numerics::Matrix;
use crate::{PATCH_CLASSES, SLIDE_CLASSES};

/// Direction used by the confuser component.
const CONFUSER_AXIS: usize = PATCH_CLASSES.len();

/// Where the non-predominant patches of a slide come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Remainder {
    /// Uniformly from background and the four other patterns. Annotated.
    OtherClasses,
    /// From one confuser component shared by all slides. Unannotated.
    SharedConfuser {
        /// Patch class the confuser resembles.
        mimic: u8,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_slides: usize,
    pub dim: usize,
    /// inclusive
    pub patches_per_slide: (usize, usize),
    /// inclusive, within (0, 1]
    pub predominant_fraction: (f64, f64),
    pub class_separation: f64,
    pub noise_sigma: f64,
    /// relative slide-label frequencies; uniform when absent
    pub class_weights: Option<[f64; 5]>,
    pub remainder: Remainder,
    pub patch_size: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_slides: 100,
            dim: 32,
            patches_per_slide: (50, 200),
            predominant_fraction: (0.5, 0.8),
            class_separation: 6.0,
            noise_sigma: 1.0,
            class_weights: None,
            remainder: Remainder::OtherClasses,
            patch_size: 448,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("synthetic spec: {m}")));
        let min_dim = match self.remainder {
            Remainder::OtherClasses => PATCH_CLASSES.len(),
            Remainder::SharedConfuser { mimic } => {
                if !(1..PATCH_CLASSES.len() as u8).contains(&mimic) {
                    return bad(format!(
                        "confuser must mimic a pattern class 1..=5, got {mimic}"
                    ));
                }
                CONFUSER_AXIS + 1
            }
        };
        if self.n_slides == 0 {
            return bad("n_slides must be >= 1".into());
        }
        if self.dim < min_dim {
            return bad(format!("dim must be >= {min_dim}, got {}", self.dim));
        }
        let (lo, hi) = self.patches_per_slide;
        if lo == 0 || lo > hi {
            return bad(format!("bad patch count range {lo}..={hi}"));
        }
        let (flo, fhi) = self.predominant_fraction;
        if !(flo > 0.0 && flo <= fhi && fhi <= 1.0) {
            return bad(format!("bad predominant fraction range {flo}..={fhi}"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad("separation must be positive".into());
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be positive".into());
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!("bad class weights {w:?}"));
            }
        }
        Ok(())
    }
}

/// Output of [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub bags: Vec<Bag>,
    /// Per-slide patch annotations, `None` for confuser patches.
    pub patch_labels: BTreeMap<String, Vec<Option<u8>>>,
}

/// Number of predominant patches for a bag of `n`: uniform over counts whose
/// fraction lies in `[lo, hi]`, or the nearest count when none does.
fn predominant_count(rng: &mut impl Rng, n: usize, (lo, hi): (f64, f64)) -> usize {
    let min = ((lo * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let max = ((hi * n as f64) + 1e-9).floor().min(n as f64) as usize;
    if min <= max {
        rng.random_range(min..=max)
    } else {
        let rho = rng.random_range(lo..=hi);
        ((rho * n as f64).round() as usize).clamp(1, n)
    }
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = spec.class_weights.unwrap_or([1.0; 5]);
    let label_dist = WeightedIndex::new(weights).map_err(|e| Error::Contract(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
    let sep = spec.class_separation;

    let mut bags = Vec::with_capacity(spec.n_slides);
    let mut patch_labels = BTreeMap::new();
    for s in 0..spec.n_slides {
        let label = label_dist.sample(&mut rng);
        let own = label as u8 + 1;
        let (lo, hi) = spec.patches_per_slide;
        let n = rng.random_range(lo..=hi);
        let n_pred = predominant_count(&mut rng, n, spec.predominant_fraction);

        // component per patch: Some(j) = annotated class j, None = confuser
        let mut comps: Vec<Option<u8>> = vec![Some(own); n_pred];
        for _ in n_pred..n {
            comps.push(match spec.remainder {
                Remainder::OtherClasses => {
                    let others: Vec<u8> = (0..PATCH_CLASSES.len() as u8)
                        .filter(|&j| j != own)
                        .collect();
                    Some(*others.choose(&mut rng).unwrap())
                }
                Remainder::SharedConfuser { .. } => None,
            });
        }
        comps.shuffle(&mut rng);

        let mut data = Vec::with_capacity(n * spec.dim);
        for comp in &comps {
            let start = data.len();
            data.extend((0..spec.dim).map(|_| noise.sample(&mut rng)));
            let row = &mut data[start..];
            match (comp, spec.remainder) {
                (Some(j), _) => row[*j as usize] += sep,
                (None, Remainder::SharedConfuser { mimic }) => {
                    row[mimic as usize] += sep;
                    row[CONFUSER_AXIS] += sep;
                }
                (None, Remainder::OtherClasses) => unreachable!(),
            }
            // stored embeddings are f32
            for v in row.iter_mut() {
                *v = *v as f32 as f64;
            }
        }

        let width = (n as f64).sqrt().ceil() as usize;
        let ps = spec.patch_size as i32;
        let coords = (0..n)
            .map(|i| Coord::new((i % width) as i32 * ps, (i / width) as i32 * ps))
            .collect();
        let slide_id = format!("slide-{s:04}");
        let bag = Bag::new(
            slide_id.clone(),
            format!("patient-{s:04}"),
            Matrix::from_vec(n, spec.dim, data)?,
            coords,
            spec.patch_size,
            Some(label),
        )?;
        patch_labels.insert(slide_id, comps);
        bags.push(bag);
    }
    debug_assert!(bags.iter().all(|b| b.label.unwrap() < SLIDE_CLASSES.len()));
    Ok(SyntheticCohort { bags, patch_labels })
}
