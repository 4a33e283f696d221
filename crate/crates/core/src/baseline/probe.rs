use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::binio::{self, put_f64s, put_u32, to_u32, ByteReader};
use crate::data::Coord;
use crate::error::{Error, Result};
use crate::mil::Bag;
use crate::numerics::{adam_step, argmax, log_softmax, softmax, AdamState, Matrix};
use crate::training::{weighted_sample_indices, EarlyStopper, EpochLog, TrainConfig};
use crate::PATCH_CLASSES;

const N_PATCH_CLASSES: usize = PATCH_CLASSES.len();

/// Softmax regression weights over the six patch classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    /// `6 x dim`
    pub w: Matrix,
    /// `1 x 6`
    pub b: Matrix,
}

impl ProbeParams {
    pub fn zeros(dim: usize) -> Self {
        ProbeParams {
            w: Matrix::zeros(N_PATCH_CLASSES, dim),
            b: Matrix::zeros(1, N_PATCH_CLASSES),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        (0..N_PATCH_CLASSES)
            .map(|c| {
                self.w.row(c).iter().zip(h).map(|(w, x)| w * x).sum::<f64>() + self.b.data()[c]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    pub coord: Coord,
    pub probs: Vec<f64>,
    pub pred: usize,
}

pub fn probe_forward(
    params: &ProbeParams,
    embedding: &[f64],
    coord: Coord,
) -> Result<PatchPrediction> {
    if embedding.len() != params.dim() {
        return Err(Error::Dimension(format!(
            "{}-dim embedding for a {}-dim probe",
            embedding.len(),
            params.dim()
        )));
    }
    let probs = softmax(&params.logits(embedding))?;
    let pred = argmax(&probs).expect("six classes");
    Ok(PatchPrediction { coord, probs, pred })
}

/// Annotated patch embeddings pooled across slides.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub slide_ids: Vec<String>,
}

impl PatchDataset {
    /// Collects every annotated patch of the bags accepted by `keep`.
    pub fn from_bags<'a>(
        bags: impl IntoIterator<Item = &'a Bag>,
        patch_labels: &BTreeMap<String, Vec<Option<u8>>>,
        mut keep: impl FnMut(&Bag) -> bool,
    ) -> Result<Self> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut slide_ids = Vec::new();
        let mut dim = None;
        for bag in bags {
            if !keep(bag) {
                continue;
            }
            let Some(pl) = patch_labels.get(&bag.slide_id) else {
                continue;
            };
            if pl.len() != bag.len() {
                return Err(Error::Data(format!(
                    "slide {}: {} patch labels for {} patches",
                    bag.slide_id,
                    pl.len(),
                    bag.len()
                )));
            }
            if *dim.get_or_insert(bag.dim()) != bag.dim() {
                return Err(Error::Dimension(format!(
                    "slide {} has {}-dim embeddings, expected {}",
                    bag.slide_id,
                    bag.dim(),
                    dim.unwrap()
                )));
            }
            for (i, l) in pl.iter().enumerate() {
                if let Some(l) = l {
                    data.extend_from_slice(bag.embeddings.row(i));
                    labels.push(*l as usize);
                    slide_ids.push(bag.slide_id.clone());
                }
            }
        }
        let dim = dim.unwrap_or(0);
        Ok(PatchDataset {
            embeddings: Matrix::from_vec(labels.len(), dim, data)?,
            labels,
            slide_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract(format!("{what} patch set is empty")));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= N_PATCH_CLASSES) {
            return Err(Error::Contract(format!(
                "{what} patch label {l} out of range"
            )));
        }
        Ok(())
    }
}

fn mean_probe_loss(params: &ProbeParams, set: &PatchDataset) -> Result<f64> {
    let mut total = 0.0;
    for (i, &y) in set.labels.iter().enumerate() {
        total -= log_softmax(&params.logits(set.embeddings.row(i)))?[y];
    }
    Ok(total / set.len() as f64)
}

/// Minibatch Adam on inverse-frequency-sampled patches, early-stopped on the
/// validation loss. Weights start at zero; `cfg.seed` drives the sampling.
pub fn train_probe(
    train: &PatchDataset,
    val: &PatchDataset,
    cfg: &TrainConfig,
) -> Result<(ProbeParams, Vec<EpochLog>)> {
    cfg.validate()?;
    train.validate("training")?;
    val.validate("validation")?;
    let dim = train.embeddings.cols();
    if val.embeddings.cols() != dim {
        return Err(Error::Dimension(format!(
            "train patches are {dim}-dim, validation {}-dim",
            val.embeddings.cols()
        )));
    }
    let mut params = ProbeParams::zeros(dim);
    let mut w_state = AdamState::for_param(&params.w, cfg.learning_rate);
    let mut b_state = AdamState::for_param(&params.b, cfg.learning_rate);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9B0B_E5EE_D000_0002);

    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let val0 = mean_probe_loss(&params, val)?;
    stopper.observe(0, val0);
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: mean_probe_loss(&params, train)?,
        val_loss: val0,
        best_epoch: 0,
    }];
    let mut best = params.clone();
    let mut gw = Matrix::zeros(N_PATCH_CLASSES, dim);
    let mut gb = Matrix::zeros(1, N_PATCH_CLASSES);

    for epoch in 1..=cfg.max_epochs {
        let order = weighted_sample_indices(&train.labels, train.len(), sampler.next_u64());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            gw.fill(0.0);
            gb.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let h = train.embeddings.row(i);
                let y = train.labels[i];
                let mut d = softmax(&params.logits(h))?;
                epoch_loss -= d[y].max(f64::MIN_POSITIVE).ln();
                d[y] -= 1.0;
                for (c, dc) in d.iter().enumerate() {
                    for (g, x) in gw.row_mut(c).iter_mut().zip(h) {
                        *g += scale * dc * x;
                    }
                    gb.data_mut()[c] += scale * dc;
                }
            }
            adam_step(&mut params.w, &gw, &mut w_state)?;
            adam_step(&mut params.b, &gb, &mut b_state)?;
        }
        let val_loss = mean_probe_loss(&params, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "probe validation loss {val_loss} at epoch {epoch}"
            )));
        }
        let decision = stopper.observe(epoch, val_loss);
        if decision.new_best {
            best = params.clone();
        }
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            val_loss,
            best_epoch: stopper.best_epoch(),
        });
        if decision.stop {
            break;
        }
    }
    Ok((best, log))
}

const MAGIC: &[u8; 4] = b"PRB1";
const VERSION: u32 = 1;

/// `PRB1` | u32 version | u32 classes | u32 dim | W (f64 LE, row-major) | b
pub fn write_probe(params: &ProbeParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, N_PATCH_CLASSES as u32);
    put_u32(&mut out, to_u32(params.dim(), "dim")?);
    put_f64s(&mut out, params.w.data());
    put_f64s(&mut out, params.b.data());
    Ok(out)
}

pub fn read_probe(bytes: &[u8], path: &Path) -> Result<ProbeParams> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let k = r.u32("classes")? as usize;
    if k != N_PATCH_CLASSES {
        return Err(r.err(format!("probe has {k} classes, expected {N_PATCH_CLASSES}")));
    }
    let dim = r.u32("dim")? as usize;
    let w = r.f64s(k * dim, "W")?;
    let b = r.f64s(k, "b")?;
    r.finish()?;
    let to_fmt = |e: Error| r.err(e.to_string());
    Ok(ProbeParams {
        w: Matrix::from_vec(k, dim, w).map_err(to_fmt)?,
        b: Matrix::from_vec(1, k, b).map_err(to_fmt)?,
    })
}

pub fn save_probe(params: &ProbeParams, path: &Path) -> Result<()> {
    binio::write_file(path, &write_probe(params)?)
}

pub fn load_probe(path: &Path) -> Result<ProbeParams> {
    read_probe(&binio::read_file(path)?, path)
}
