use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::weighted_sample_indices;
use crate::error::{Error, Result};
use crate::mil::{init_params, mil_forward, mil_loss_and_grad, Bag, MilConfig, MilParams};
use crate::numerics::{adam_step, cross_entropy_from_logits, AdamState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without an improvement larger than `min_delta` before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Share of non-test patients held out for early stopping.
    pub val_fraction: f64,
    pub min_delta: f64,
}

impl TrainConfig {
    /// MIL head: lr 1e-4, batch 1, patience 20.
    pub fn mil() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 1,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            val_fraction: 0.25,
            min_delta: 1e-6,
        }
    }

    /// Patch probe: lr 1e-5, batch 8, patience 15.
    pub fn probe() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 8,
            patience: 15,
            ..TrainConfig::mil()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.max_epochs == 0 || self.patience > self.max_epochs {
            return bad(format!(
                "need 1 <= max_epochs and patience <= max_epochs, got {} / {}",
                self.max_epochs, self.patience
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!(
                "val fraction must be in (0, 1), got {}",
                self.val_fraction
            ));
        }
        Ok(())
    }
}

/// One row of a training log. Epoch 0 evaluates the initial parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
}

impl EpochLog {
    pub fn csv_header() -> &'static str {
        "epoch,train_loss,val_loss"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:.9},{:.9}", self.epoch, self.train_loss, self.val_loss)
    }
}

/// Tracks the best validation loss.
///
/// Any strictly lower loss becomes the new best checkpoint, so the returned
/// checkpoint never loses to a logged epoch; only drops larger than
/// `min_delta` reset the patience counter.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: usize,
    reference: f64,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub new_best: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
            reference: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let new_best = val_loss < self.best;
        if new_best {
            self.best = val_loss;
            self.best_epoch = epoch;
        }
        if val_loss < self.reference - self.min_delta {
            self.reference = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            new_best,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Mean bag cross-entropy. Losses are summed in bag order, independent of
/// the thread count.
pub fn mean_loss(params: &MilParams, bags: &[Bag]) -> Result<f64> {
    let losses = bags
        .par_iter()
        .map(|bag| {
            let label = bag
                .label
                .ok_or_else(|| Error::Contract(format!("bag {} has no label", bag.slide_id)))?;
            mil_forward(params, bag)
                .and_then(|f| cross_entropy_from_logits(&f.logits, label))
                .map_err(|e| match e {
                    Error::Domain(m) => Error::Numeric(format!("slide {}: {m}", bag.slide_id)),
                    other => other,
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn check_labeled(bags: &[Bag], what: &str) -> Result<Vec<usize>> {
    if bags.is_empty() {
        return Err(Error::Contract(format!("{what} set is empty")));
    }
    bags.iter()
        .map(|b| {
            b.label
                .ok_or_else(|| Error::Contract(format!("{what} bag {} has no label", b.slide_id)))
        })
        .collect()
}

/// Trains the MIL head with Adam on inverse-frequency-sampled bags and
/// returns the parameters of the epoch with the lowest validation loss.
///
/// One epoch draws `train.len()` bags with replacement. Parameters are
/// initialized from `tcfg.seed`, and the sampling stream is derived from it.
pub fn train_mil(
    train: &[Bag],
    val: &[Bag],
    config: MilConfig,
    tcfg: &TrainConfig,
) -> Result<(MilParams, Vec<EpochLog>)> {
    tcfg.validate()?;
    let labels = check_labeled(train, "training")?;
    check_labeled(val, "validation")?;

    let mut params = init_params(config, tcfg.seed)?;
    let mut states: Vec<AdamState> = params
        .blocks()
        .iter()
        .map(|b| AdamState::for_param(b, tcfg.learning_rate))
        .collect();
    let mut sampler = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5EED_5A3F_1E00_0001);

    let initial_val = finite(mean_loss(&params, val), 0, "validation")?;
    let initial_train = finite(mean_loss(&params, train), 0, "training")?;
    let mut stopper = EarlyStopper::new(tcfg.patience, tcfg.min_delta);
    stopper.observe(0, initial_val);
    let mut best = params.clone();
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
        best_epoch: 0,
    }];

    for epoch in 1..=tcfg.max_epochs {
        let order = weighted_sample_indices(&labels, train.len(), sampler.next_u64());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let mut acc: Option<MilParams> = None;
            for &i in batch {
                let bag = &train[i];
                let (loss, grads) = mil_loss_and_grad(&params, bag)
                    .map_err(|e| numeric_context(e, epoch, &bag.slide_id))?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss or gradient at epoch {epoch}, slide {}",
                        bag.slide_id
                    )));
                }
                epoch_loss += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, g) in a.blocks_mut().into_iter().zip(grads.blocks()) {
                            x.add_scaled(1.0, g)?;
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for ((p, g), st) in params
                .blocks_mut()
                .into_iter()
                .zip(grads.blocks_mut())
                .zip(states.iter_mut())
            {
                if batch.len() > 1 {
                    g.scale(scale);
                }
                adam_step(p, g, st)?;
            }
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = finite(mean_loss(&params, val), epoch, "validation")?;
        let decision = stopper.observe(epoch, val_loss);
        if decision.new_best {
            best = params.clone();
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            best_epoch: stopper.best_epoch(),
        });
        if decision.stop {
            break;
        }
    }
    Ok((best, log))
}

/// Overflow inside the forward pass surfaces as a domain error from the
/// softmax; report it as a numeric failure with its location.
fn numeric_context(e: Error, epoch: usize, slide: &str) -> Error {
    match e {
        Error::Domain(m) | Error::Numeric(m) => {
            Error::Numeric(format!("epoch {epoch}, slide {slide}: {m}"))
        }
        other => other,
    }
}

fn finite(loss: Result<f64>, epoch: usize, what: &str) -> Result<f64> {
    match loss {
        Ok(l) if l.is_finite() => Ok(l),
        Ok(l) => Err(Error::Numeric(format!(
            "{what} loss is {l} at epoch {epoch}"
        ))),
        Err(Error::Numeric(m)) => Err(Error::Numeric(format!("{what} pass, epoch {epoch}, {m}"))),
        Err(e) => Err(e),
    }
}
