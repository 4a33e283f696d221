//! Binary netpbm rasters: RGB images as P6, label masks and heatmaps as P5.
//! Samples are kept as stored (no maxval rescaling), so a mask's pixel value
//! is its class id.

use std::path::Path;

use super::binio;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// interleaved RGB, row-major
    pub data: Vec<u8>,
}

/// Single-channel 8-bit raster. Used for label masks and rendered maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        RgbImage {
            width,
            height,
            data: rgb.iter().copied().cycle().take(n * 3).collect(),
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (width, height, payload) = parse_netpbm(bytes, b"P6", 3, path)?;
        Ok(RgbImage {
            width,
            height,
            data: payload.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_ppm(&binio::read_file(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_ppm())
    }
}

impl GrayImage {
    pub fn filled(width: u32, height: u32, v: u8) -> Self {
        GrayImage {
            width,
            height,
            data: vec![v; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, v: u8) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm(bytes: &[u8], path: &Path) -> Result<Self> {
        let (width, height, payload) = parse_netpbm(bytes, b"P5", 1, path)?;
        Ok(GrayImage {
            width,
            height,
            data: payload.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_pgm(&binio::read_file(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_pgm())
    }
}

fn parse_netpbm<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    channels: usize,
    path: &Path,
) -> Result<(u32, u32, &'a [u8])> {
    let err = |msg: String| Error::format(path, msg);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(err(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| err(format!("bad header field #{}", i + 1)))?;
    }
    let [width, height, maxval] = fields;
    if !(1..=255).contains(&maxval) {
        return Err(err(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err("missing whitespace after header".into()));
    }
    pos += 1;
    let need = width as usize * height as usize * channels;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(err(format!(
            "truncated raster: {} of {need} sample bytes",
            payload.len()
        )));
    }
    Ok((width, height, &payload[..need]))
}
