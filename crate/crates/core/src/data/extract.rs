//! Non-overlapping grid tiling with the labeled-patch and tissue-only rules.
//!
//! The grid is anchored at the image origin with stride equal to the patch
//! size; cells that would run past the right or bottom edge are dropped.

use super::raster::{GrayImage, RgbImage};
use super::Coord;
use crate::error::{Error, Result};

pub const DEFAULT_PATCH_SIZE: u32 = 448;
pub const DEFAULT_TISSUE_MIN: f64 = 0.10;
/// Mask value marking cribriform regions.
pub const CRIBRIFORM: u8 = 6;
/// Saturation threshold, in 1/255 units.
const SATURATION_MIN: u32 = 8;

/// One retained training patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSample {
    pub coord: Coord,
    /// 0 = background, 1..=5 = growth pattern, in [`crate::PATCH_CLASSES`] order
    pub label: u8,
    pub tissue_fraction: f64,
}

/// A pixel counts as tissue when its HSV saturation `(max - min) / max` is at
/// least 8/255.
#[inline]
pub fn is_tissue([r, g, b]: [u8; 3]) -> bool {
    let max = r.max(g).max(b) as u32;
    let min = r.min(g).min(b) as u32;
    max > 0 && (max - min) * 255 >= SATURATION_MIN * max
}

/// Share of tissue pixels in the whole raster; 0 for an empty raster.
pub fn tissue_fraction(patch: &RgbImage) -> f64 {
    tissue_fraction_in(patch, 0, 0, patch.width, patch.height)
}

/// Share of tissue pixels in the `w x h` window at `(x0, y0)`, which must lie
/// inside the image.
pub fn tissue_fraction_in(image: &RgbImage, x0: u32, y0: u32, w: u32, h: u32) -> f64 {
    assert!(
        x0 + w <= image.width && y0 + h <= image.height,
        "window outside image"
    );
    if w == 0 || h == 0 {
        return 0.0;
    }
    let mut count = 0usize;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if is_tissue(image.pixel(x, y)) {
                count += 1;
            }
        }
    }
    count as f64 / (w as usize * h as usize) as f64
}

fn grid(width: u32, height: u32, patch_size: u32) -> impl Iterator<Item = (u32, u32)> {
    let (gw, gh) = (width / patch_size, height / patch_size);
    (0..gh).flat_map(move |gy| (0..gw).map(move |gx| (gx * patch_size, gy * patch_size)))
}

fn check_patch_size(patch_size: u32) -> Result<()> {
    if patch_size == 0 {
        return Err(Error::Contract("patch size must be positive".into()));
    }
    Ok(())
}

/// Tiles an annotated image. A patch is kept when the mask holds a single
/// value over it, that value is not cribriform, and its tissue fraction
/// reaches `tissue_min`. Output is in row-major grid order.
pub fn extract_labeled_patches(
    image: &RgbImage,
    mask: &GrayImage,
    patch_size: u32,
    tissue_min: f64,
) -> Result<Vec<PatchSample>> {
    check_patch_size(patch_size)?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::Contract(format!(
            "image is {}x{} but mask is {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    if let Some(i) = mask.data.iter().position(|&v| v > CRIBRIFORM) {
        let w = mask.width as usize;
        return Err(Error::Data(format!(
            "mask value {} at pixel ({}, {}) is not a class id in 0..=6",
            mask.data[i],
            i % w,
            i / w
        )));
    }
    let mut out = Vec::new();
    for (x0, y0) in grid(image.width, image.height, patch_size) {
        let Some(label) = uniform_label(mask, x0, y0, patch_size) else {
            continue;
        };
        if label == CRIBRIFORM {
            continue;
        }
        let tissue = tissue_fraction_in(image, x0, y0, patch_size, patch_size);
        if tissue < tissue_min {
            continue;
        }
        out.push(PatchSample {
            coord: Coord::new(x0 as i32, y0 as i32),
            label,
            tissue_fraction: tissue,
        });
    }
    Ok(out)
}

fn uniform_label(mask: &GrayImage, x0: u32, y0: u32, size: u32) -> Option<u8> {
    let first = mask.pixel(x0, y0);
    for y in y0..y0 + size {
        let start = y as usize * mask.width as usize + x0 as usize;
        if mask.data[start..start + size as usize]
            .iter()
            .any(|&v| v != first)
        {
            return None;
        }
    }
    Some(first)
}

/// Tiles an unannotated slide, keeping cells whose tissue fraction reaches
/// `tissue_min`.
pub fn extract_tissue_patches(
    image: &RgbImage,
    patch_size: u32,
    tissue_min: f64,
) -> Result<Vec<Coord>> {
    check_patch_size(patch_size)?;
    Ok(grid(image.width, image.height, patch_size)
        .filter(|&(x, y)| tissue_fraction_in(image, x, y, patch_size, patch_size) >= tissue_min)
        .map(|(x, y)| Coord::new(x as i32, y as i32))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const WHITE: [u8; 3] = [255, 255, 255];
    const MAGENTA: [u8; 3] = [255, 0, 255];
    const ACINAR: u8 = 2;
    const SOLID: u8 = 5;

    #[test]
    fn tissue_fraction_cases() {
        assert_eq!(tissue_fraction(&RgbImage::filled(4, 4, WHITE)), 0.0);
        assert_eq!(tissue_fraction(&RgbImage::filled(4, 4, MAGENTA)), 1.0);
        let mut half = RgbImage::filled(4, 4, WHITE);
        for y in 0..4 {
            for x in 0..2 {
                half.put(x, y, MAGENTA);
            }
        }
        assert_eq!(tissue_fraction(&half), 0.5);
        // black has max = 0
        assert_eq!(tissue_fraction(&RgbImage::filled(2, 2, [0, 0, 0])), 0.0);
    }

    #[test]
    fn saturation_threshold_boundary() {
        // (255 - 247) / 255 = 8/255 exactly
        assert!(is_tissue([255, 247, 255]));
        assert!(!is_tissue([255, 248, 255]));
    }

    #[test]
    fn four_acinar_patches() {
        let img = RgbImage::filled(896, 896, MAGENTA);
        let mask = GrayImage::filled(896, 896, ACINAR);
        let got = extract_labeled_patches(&img, &mask, 448, 0.10).unwrap();
        assert_eq!(got.len(), 4);
        assert!(got
            .iter()
            .all(|p| p.label == ACINAR && p.tissue_fraction == 1.0));
        let coords: Vec<_> = got.iter().map(|p| (p.coord.x, p.coord.y)).collect();
        assert_eq!(coords, vec![(0, 0), (448, 0), (0, 448), (448, 448)]);
    }

    #[test]
    fn boundary_cribriform_and_blank_patches_dropped() {
        let img = RgbImage::filled(1344, 448, MAGENTA);
        let mut mask = GrayImage::filled(1344, 448, ACINAR);
        // second patch straddles acinar/solid
        for y in 0..448 {
            for x in 600..896 {
                mask.put(x, y, SOLID);
            }
            for x in 896..1344 {
                mask.put(x, y, CRIBRIFORM);
            }
        }
        let got = extract_labeled_patches(&img, &mask, 448, 0.10).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].coord, Coord::new(0, 0));

        let blank = RgbImage::filled(448, 448, WHITE);
        let bg = GrayImage::filled(448, 448, 0);
        assert!(extract_labeled_patches(&blank, &bg, 448, 0.10)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn extraction_errors() {
        let img = RgbImage::filled(10, 10, MAGENTA);
        let mask = GrayImage::filled(10, 12, 0);
        let err = extract_labeled_patches(&img, &mask, 5, 0.1).unwrap_err();
        assert!(err.to_string().contains("10x10") && err.to_string().contains("10x12"));
        let mut mask = GrayImage::filled(10, 10, 0);
        mask.put(3, 7, 9);
        let err = extract_labeled_patches(&img, &mask, 5, 0.1).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("(3, 7)"), "{err}");
    }

    #[test]
    fn tissue_grid() {
        assert!(
            extract_tissue_patches(&RgbImage::filled(900, 900, WHITE), 448, 0.1)
                .unwrap()
                .is_empty()
        );
        let got = extract_tissue_patches(&RgbImage::filled(1344, 448, MAGENTA), 448, 0.1).unwrap();
        assert_eq!(
            got,
            vec![Coord::new(0, 0), Coord::new(448, 0), Coord::new(896, 0)]
        );
        // partial cells at the edge never count
        let got = extract_tissue_patches(&RgbImage::filled(1000, 500, MAGENTA), 448, 0.1).unwrap();
        assert_eq!(got.len(), 2);
    }
}
