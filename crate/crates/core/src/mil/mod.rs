//! Class-specific gated-attention MIL head.
//!
//! Every patch embedding `hᵢ` is projected to `zᵢ = act(W hᵢ + b)`. A gated
//! attention branch shared by all classes computes
//! `tanh(V zᵢ) ⊙ σ(U zᵢ)`, and each class `c` scores it with its own vector
//! `w_attn[c]`. Scores are softmax-normalized over the patches of the bag, the
//! per-class bag representation is the attention-weighted mean of the `zᵢ`,
//! and an independent linear head per class maps it to one logit.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use model::{mil_forward, mil_loss_and_grad, predict, ForwardCache, Prediction};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Coord;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Nonlinearity applied after the input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjActivation {
    Linear,
    #[default]
    Rectified,
}

impl ProjActivation {
    pub fn tag(self) -> u8 {
        match self {
            ProjActivation::Linear => 0,
            ProjActivation::Rectified => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ProjActivation::Linear),
            1 => Some(ProjActivation::Rectified),
            _ => None,
        }
    }
}

impl std::str::FromStr for ProjActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ProjActivation::Linear),
            "relu" | "rectified" => Ok(ProjActivation::Rectified),
            other => Err(Error::Contract(format!("unknown activation {other:?}"))),
        }
    }
}

impl std::fmt::Display for ProjActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProjActivation::Linear => "linear",
            ProjActivation::Rectified => "rectified",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MilConfig {
    /// Width of the incoming patch embeddings.
    pub input_dim: usize,
    pub proj_dim: usize,
    pub attn_dim: usize,
    pub n_classes: usize,
    pub proj_activation: ProjActivation,
}

impl MilConfig {
    /// 512-wide projection, 256-wide attention, five classes.
    pub fn new(input_dim: usize) -> Self {
        MilConfig {
            input_dim,
            proj_dim: 512,
            attn_dim: 256,
            n_classes: crate::SLIDE_CLASSES.len(),
            proj_activation: ProjActivation::Rectified,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.proj_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Contract(format!(
                "all dimensions must be >= 1: {self:?}"
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// All trainable weights. Biases are stored as `1 x n` matrices so every
/// block can go through the same optimizer code.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    pub config: MilConfig,
    pub w_proj: Matrix,
    pub b_proj: Matrix,
    /// tanh branch, `attn_dim x proj_dim`
    pub v: Matrix,
    /// sigmoid gate branch, `attn_dim x proj_dim`
    pub u: Matrix,
    /// one attention score vector per class, `n_classes x attn_dim`
    pub w_attn: Matrix,
    /// one bag classifier per class, `n_classes x proj_dim`
    pub w_clf: Matrix,
    pub b_clf: Matrix,
}

pub const BLOCK_NAMES: [&str; 7] = ["w_proj", "b_proj", "v", "u", "w_attn", "w_clf", "b_clf"];

impl MilParams {
    pub fn zeros(config: MilConfig) -> Self {
        let MilConfig {
            input_dim: d,
            proj_dim: p,
            attn_dim: l,
            n_classes: k,
            ..
        } = config;
        MilParams {
            config,
            w_proj: Matrix::zeros(p, d),
            b_proj: Matrix::zeros(1, p),
            v: Matrix::zeros(l, p),
            u: Matrix::zeros(l, p),
            w_attn: Matrix::zeros(k, l),
            w_clf: Matrix::zeros(k, p),
            b_clf: Matrix::zeros(1, k),
        }
    }

    /// Blocks in checkpoint order.
    pub fn blocks(&self) -> [&Matrix; 7] {
        [
            &self.w_proj,
            &self.b_proj,
            &self.v,
            &self.u,
            &self.w_attn,
            &self.w_clf,
            &self.b_clf,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.w_proj,
            &mut self.b_proj,
            &mut self.v,
            &mut self.u,
            &mut self.w_attn,
            &mut self.w_clf,
            &mut self.b_clf,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }
}

/// Glorot-uniform weights in `±√(6 / (fan_in + fan_out))`, zero biases.
/// Blocks are drawn in checkpoint order from one seeded stream.
pub fn init_params(config: MilConfig, seed: u64) -> Result<MilParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MilParams::zeros(config);
    for (name, block) in BLOCK_NAMES.iter().zip(params.blocks_mut()) {
        if name.starts_with("b_") {
            continue;
        }
        let (fan_out, fan_in) = block.shape();
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in block.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// One slide: its patch embeddings, their positions, and the slide label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: String,
    pub patient_id: String,
    /// `n_patches x input_dim`
    pub embeddings: Matrix,
    /// Level-0 top-left pixel offsets, one per embedding row.
    pub coords: Vec<Coord>,
    pub patch_size: u32,
    pub label: Option<usize>,
}

impl Bag {
    pub fn new(
        slide_id: impl Into<String>,
        patient_id: impl Into<String>,
        embeddings: Matrix,
        coords: Vec<Coord>,
        patch_size: u32,
        label: Option<usize>,
    ) -> Result<Self> {
        let bag = Bag {
            slide_id: slide_id.into(),
            patient_id: patient_id.into(),
            embeddings,
            coords,
            patch_size,
            label,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.embeddings.rows();
        if n == 0 {
            return Err(Error::Contract(format!("bag {} is empty", self.slide_id)));
        }
        if self.coords.len() != n {
            return Err(Error::Contract(format!(
                "bag {} has {} embeddings but {} coords",
                self.slide_id,
                n,
                self.coords.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        if let Some(dup) = self.coords.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::Contract(format!(
                "bag {} repeats coordinate ({}, {})",
                self.slide_id, dup.x, dup.y
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}
