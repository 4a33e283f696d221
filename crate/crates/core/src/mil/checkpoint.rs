//! `MILP` model checkpoints: magic, u32 version, u32 input/proj/attn dims and
//! class count, u8 activation tag, then every block as little-endian f64 in
//! the order w_proj, b_proj, v, u, w_attn, w_clf, b_clf.

use std::path::Path;

use super::{MilConfig, MilParams, ProjActivation};
use crate::data::binio::{self, put_f64s, put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"MILP";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &MilParams) -> Result<Vec<u8>> {
    let c = params.config;
    let mut out = Vec::with_capacity(25 + params.num_params() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for (v, what) in [
        (c.input_dim, "input_dim"),
        (c.proj_dim, "proj_dim"),
        (c.attn_dim, "attn_dim"),
        (c.n_classes, "n_classes"),
    ] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    out.push(c.proj_activation.tag());
    for block in params.blocks() {
        put_f64s(&mut out, block.data());
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<MilParams> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let input_dim = r.u32("input_dim")? as usize;
    let proj_dim = r.u32("proj_dim")? as usize;
    let attn_dim = r.u32("attn_dim")? as usize;
    let n_classes = r.u32("n_classes")? as usize;
    let tag = r.u8("activation")?;
    let proj_activation = ProjActivation::from_tag(tag)
        .ok_or_else(|| r.err(format!("unknown activation tag {tag}")))?;
    let config = MilConfig {
        input_dim,
        proj_dim,
        attn_dim,
        n_classes,
        proj_activation,
    };
    config
        .validate()
        .map_err(|e| r.err(format!("invalid config: {e}")))?;
    let mut params = MilParams::zeros(config);
    for (name, block) in super::BLOCK_NAMES.iter().zip(params.blocks_mut()) {
        let (rows, cols) = block.shape();
        let data = r.f64s(rows * cols, name)?;
        *block = Matrix::from_vec(rows, cols, data).map_err(|e| match e {
            Error::Numeric(m) => r.err(format!("{name}: {m}")),
            other => other,
        })?;
    }
    r.finish()?;
    Ok(params)
}

pub fn save_checkpoint(params: &MilParams, path: &Path) -> Result<()> {
    binio::write_file(path, &write_checkpoint(params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<MilParams> {
    read_checkpoint(&binio::read_file(path)?, path)
}
