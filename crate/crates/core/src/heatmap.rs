//! Grid-resolution attention maps: one square cell per patch.

use std::fmt::Write as _;

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::mil::{mil_forward, Bag, MilParams};
use crate::numerics::argmax;

/// Which attention column to render.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetClass {
    Predicted,
    Class(usize),
}

impl std::str::FromStr for TargetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("predicted") {
            return Ok(TargetClass::Predicted);
        }
        if let Some(c) = crate::slide_class_index(s) {
            return Ok(TargetClass::Class(c));
        }
        s.parse::<usize>()
            .map(TargetClass::Class)
            .map_err(|_| Error::Contract(format!("unknown class {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapSpec {
    pub target: TargetClass,
    /// output pixels per patch side
    pub cell: u32,
    /// lower and upper clipping percentiles in [0, 100]
    pub percentiles: (f64, f64),
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec {
            target: TargetClass::Predicted,
            cell: 8,
            percentiles: (1.0, 99.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub class: usize,
    pub raster: GrayImage,
    /// `x,y,a_class0..` rows, one per patch, raw attention weights
    pub csv: String,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Clips to the percentile window and stretches to 0..=255. A constant
/// column maps to 255 everywhere.
pub fn normalize_to_gray(values: &[f64], (p_lo, p_hi): (f64, f64)) -> Vec<u8> {
    let lo = percentile(values, p_lo);
    let hi = percentile(values, p_hi);
    if hi - lo <= 0.0 {
        return vec![255; values.len()];
    }
    values
        .iter()
        .map(|&a| ((a.clamp(lo, hi) - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

pub fn render_attention_map(
    params: &MilParams,
    bag: &Bag,
    spec: &HeatmapSpec,
) -> Result<AttentionMap> {
    if spec.cell == 0 {
        return Err(Error::Contract("cell size must be >= 1".into()));
    }
    let (p_lo, p_hi) = spec.percentiles;
    if !(0.0..=100.0).contains(&p_lo) || !(0.0..=100.0).contains(&p_hi) || p_lo > p_hi {
        return Err(Error::Contract(format!(
            "bad percentile window ({p_lo}, {p_hi})"
        )));
    }
    if bag.patch_size == 0 {
        return Err(Error::Data(format!(
            "bag {} has patch size 0",
            bag.slide_id
        )));
    }
    let fwd = mil_forward(params, bag)?;
    let k = params.config.n_classes;
    let class = match spec.target {
        TargetClass::Predicted => argmax(&fwd.logits).expect("k >= 2"),
        TargetClass::Class(c) if c < k => c,
        TargetClass::Class(c) => {
            return Err(Error::Contract(format!(
                "class {c} out of range for {k} classes"
            )))
        }
    };
    let column = fwd.attention.column(class);
    let gray = normalize_to_gray(&column, spec.percentiles);

    let ps = bag.patch_size as i64;
    let min_x = bag.coords.iter().map(|c| c.x as i64).min().unwrap();
    let min_y = bag.coords.iter().map(|c| c.y as i64).min().unwrap();
    let cell_of = |v: i64, min: i64| (v - min).div_euclid(ps) as u32;
    let grid_w = bag
        .coords
        .iter()
        .map(|c| cell_of(c.x as i64, min_x))
        .max()
        .unwrap()
        + 1;
    let grid_h = bag
        .coords
        .iter()
        .map(|c| cell_of(c.y as i64, min_y))
        .max()
        .unwrap()
        + 1;
    let mut raster = GrayImage::filled(grid_w * spec.cell, grid_h * spec.cell, 0);
    for (coord, &g) in bag.coords.iter().zip(&gray) {
        let gx = cell_of(coord.x as i64, min_x) * spec.cell;
        let gy = cell_of(coord.y as i64, min_y) * spec.cell;
        for y in gy..gy + spec.cell {
            for x in gx..gx + spec.cell {
                raster.put(x, y, g);
            }
        }
    }

    let mut csv = String::from("x,y");
    for c in 0..k {
        let _ = write!(csv, ",a_class{c}");
    }
    csv.push('\n');
    for (i, coord) in bag.coords.iter().enumerate() {
        let _ = write!(csv, "{},{}", coord.x, coord.y);
        for c in 0..k {
            let _ = write!(csv, ",{:.9e}", fwd.attention.get(i, c));
        }
        csv.push('\n');
    }
    Ok(AttentionMap { class, raster, csv })
}
