//! On-disk bag layout.
//!
//! A cohort directory holds `manifest.jsonl` (one [`SlideRecord`] per line)
//! and, per slide, an embedding block (`FEMB`), a coordinate block (`FCOO`)
//! and optionally a patch-label block (`FPLB`) next to the embeddings. All
//! integers are little-endian.
//!
//! ```text
//! FEMB  magic "FEMB" | u32 version=1 | u32 n | u32 dim | n*dim f32 row-major
//! FCOO  magic "FCOO" | u32 version=1 | u32 n | n * (i32 x, i32 y)
//! FPLB  magic "FPLB" | u32 version=1 | u32 n | n * u8 (255 = unannotated)
//! ```

use std::collections::HashSet;
use std::io::Write;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use super::binio::{self, put_u32, to_u32, ByteReader};
use super::Coord;
use crate::error::{Error, Result};
use crate::mil::Bag;
use crate::numerics::Matrix;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const VERSION: u32 = 1;
/// Marks a patch with no annotation in an `FPLB` block.
pub const UNANNOTATED: u8 = 255;

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideRecord {
    pub slide_id: String,
    pub patient_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub n_patches: usize,
    pub dim: usize,
    pub patch_size: u32,
    pub embedding_path: String,
    pub coord_path: String,
}

impl SlideRecord {
    /// Record for `bag` with files under `slides/`.
    pub fn for_bag(bag: &Bag) -> Self {
        SlideRecord {
            slide_id: bag.slide_id.clone(),
            patient_id: bag.patient_id.clone(),
            label: bag.label,
            n_patches: bag.len(),
            dim: bag.dim(),
            patch_size: bag.patch_size,
            embedding_path: format!("slides/{}.femb", bag.slide_id),
            coord_path: format!("slides/{}.fcoo", bag.slide_id),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("slide {:?}: {msg}", self.slide_id)));
        if self.slide_id.is_empty() || self.patient_id.is_empty() {
            return bad("empty slide or patient id".into());
        }
        if self.n_patches == 0 {
            return bad("n_patches must be >= 1".into());
        }
        if let Some(l) = self.label {
            if l >= crate::SLIDE_CLASSES.len() {
                return bad(format!("label {l} out of range"));
            }
        }
        for p in [&self.embedding_path, &self.coord_path] {
            check_relative(p).or_else(&bad)?;
        }
        Ok(())
    }

    /// Patch-label block path, derived from the embedding path.
    pub fn patch_label_path(&self) -> String {
        Path::new(&self.embedding_path)
            .with_extension("fplb")
            .to_string_lossy()
            .into_owned()
    }
}

fn check_relative(p: &str) -> std::result::Result<(), String> {
    let path = Path::new(p);
    if p.is_empty()
        || path
            .components()
            .any(|c| !matches!(c, Component::Normal(_) | Component::CurDir))
    {
        return Err(format!(
            "path {p:?} must be relative and stay inside the cohort"
        ));
    }
    Ok(())
}

/// `n x dim` f32 payload of an `FEMB` file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingBlock {
    pub fn new(n: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("embedding block with n = 0".into()));
        }
        if data.len() != n * dim {
            return Err(Error::Dimension(format!(
                "{} values for a {n}x{dim} block",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding value".into()));
        }
        Ok(EmbeddingBlock { n, dim, data })
    }

    /// Narrows f64 embeddings to f32. Exact for values that came from f32.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        EmbeddingBlock::new(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.n,
            self.dim,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("finite by construction")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(b"FEMB");
        put_u32(&mut out, VERSION);
        put_u32(&mut out, to_u32(self.n, "n")?);
        put_u32(&mut out, to_u32(self.dim, "dim")?);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(b"FEMB")?;
        r.version(VERSION)?;
        let n = r.u32("n")? as usize;
        let dim = r.u32("dim")? as usize;
        if n == 0 {
            return Err(Error::Contract(format!(
                "{}: embedding block has n = 0",
                path.display()
            )));
        }
        let data = r.f32s(n * dim, "embedding payload")?;
        r.finish()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(r.err("non-finite embedding value"));
        }
        Ok(EmbeddingBlock { n, dim, data })
    }
}

pub fn coords_to_bytes(coords: &[Coord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + coords.len() * 8);
    out.extend_from_slice(b"FCOO");
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(coords.len(), "n")?);
    for c in coords {
        out.extend_from_slice(&c.x.to_le_bytes());
        out.extend_from_slice(&c.y.to_le_bytes());
    }
    Ok(out)
}

pub fn coords_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<Coord>> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(b"FCOO")?;
    r.version(VERSION)?;
    let n = r.u32("n")? as usize;
    if n == 0 {
        return Err(Error::Contract(format!(
            "{}: coordinate block has n = 0",
            path.display()
        )));
    }
    let mut coords = Vec::with_capacity(n);
    for _ in 0..n {
        let x = r.i32("x")?;
        let y = r.i32("y")?;
        coords.push(Coord::new(x, y));
    }
    r.finish()?;
    Ok(coords)
}

pub fn patch_labels_to_bytes(labels: &[Option<u8>]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + labels.len());
    out.extend_from_slice(b"FPLB");
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(labels.len(), "n")?);
    out.extend(labels.iter().map(|l| l.unwrap_or(UNANNOTATED)));
    Ok(out)
}

pub fn patch_labels_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<Option<u8>>> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(b"FPLB")?;
    r.version(VERSION)?;
    let n = r.u32("n")? as usize;
    let raw = r.take(n, "labels")?;
    r.finish()?;
    raw.iter()
        .map(|&v| match v {
            UNANNOTATED => Ok(None),
            v if (v as usize) < crate::PATCH_CLASSES.len() => Ok(Some(v)),
            v => Err(r.err(format!("patch label {v} out of range"))),
        })
        .collect()
}

/// Writes the embedding and coordinate files named by `record` under `root`.
/// Nothing is written if the inputs disagree with the record.
pub fn write_bag(
    record: &SlideRecord,
    embeddings: &EmbeddingBlock,
    coords: &[Coord],
    root: &Path,
) -> Result<()> {
    record.validate()?;
    if embeddings.n != record.n_patches || embeddings.dim != record.dim {
        return Err(Error::Contract(format!(
            "slide {}: record says {}x{}, embeddings are {}x{}",
            record.slide_id, record.n_patches, record.dim, embeddings.n, embeddings.dim
        )));
    }
    if coords.len() != record.n_patches {
        return Err(Error::Contract(format!(
            "slide {}: {} coords for {} patches",
            record.slide_id,
            coords.len(),
            record.n_patches
        )));
    }
    let mut seen = HashSet::with_capacity(coords.len());
    if let Some(c) = coords.iter().find(|c| !seen.insert(**c)) {
        return Err(Error::Contract(format!(
            "slide {}: duplicate coordinate ({}, {})",
            record.slide_id, c.x, c.y
        )));
    }
    let emb = embeddings.to_bytes()?;
    let coo = coords_to_bytes(coords)?;
    binio::write_file(&root.join(&record.embedding_path), &emb)?;
    binio::write_file(&root.join(&record.coord_path), &coo)
}

/// Loads the slide described by `record`, widening embeddings to f64.
pub fn read_bag(record: &SlideRecord, root: &Path) -> Result<Bag> {
    record.validate()?;
    let emb_path = root.join(&record.embedding_path);
    let coo_path = root.join(&record.coord_path);
    let block = EmbeddingBlock::from_bytes(&binio::read_file(&emb_path)?, &emb_path)?;
    let coords = coords_from_bytes(&binio::read_file(&coo_path)?, &coo_path)?;
    if block.n != record.n_patches || block.dim != record.dim {
        return Err(Error::format(
            &emb_path,
            format!(
                "holds {}x{} but manifest says {}x{}",
                block.n, block.dim, record.n_patches, record.dim
            ),
        ));
    }
    if coords.len() != block.n {
        return Err(Error::format(
            &coo_path,
            format!("{} coords for {} embeddings", coords.len(), block.n),
        ));
    }
    Bag::new(
        record.slide_id.clone(),
        record.patient_id.clone(),
        block.to_matrix(),
        coords,
        record.patch_size,
        record.label,
    )
    .map_err(|e| match e {
        Error::Contract(m) => Error::Data(m),
        other => other,
    })
}

pub fn write_patch_labels(record: &SlideRecord, labels: &[Option<u8>], root: &Path) -> Result<()> {
    if labels.len() != record.n_patches {
        return Err(Error::Contract(format!(
            "slide {}: {} patch labels for {} patches",
            record.slide_id,
            labels.len(),
            record.n_patches
        )));
    }
    binio::write_file(
        &root.join(record.patch_label_path()),
        &patch_labels_to_bytes(labels)?,
    )
}

/// Patch labels for `record`, or `None` when the slide has no label file.
pub fn read_patch_labels(record: &SlideRecord, root: &Path) -> Result<Option<Vec<Option<u8>>>> {
    let path = root.join(record.patch_label_path());
    if !path.exists() {
        return Ok(None);
    }
    let labels = patch_labels_from_bytes(&binio::read_file(&path)?, &path)?;
    if labels.len() != record.n_patches {
        return Err(Error::format(
            &path,
            format!("{} labels for {} patches", labels.len(), record.n_patches),
        ));
    }
    Ok(Some(labels))
}

pub fn write_manifest(records: &[SlideRecord], root: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Data(e.to_string()))?;
        buf.write_all(b"\n").expect("writing to a Vec");
    }
    binio::write_file(&root.join(MANIFEST_FILE), &buf)
}

pub fn read_manifest(root: &Path) -> Result<Vec<SlideRecord>> {
    let path = root.join(MANIFEST_FILE);
    let text = String::from_utf8(binio::read_file(&path)?)
        .map_err(|_| Error::format(&path, "manifest is not UTF-8"))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SlideRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1)))?;
        rec.validate()?;
        if !ids.insert(rec.slide_id.clone()) {
            return Err(Error::Data(format!("duplicate slide id {}", rec.slide_id)));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Writes every bag plus the manifest. Patch labels, when given, are written
/// for bags that have an entry.
pub fn write_cohort(
    root: &Path,
    bags: &[Bag],
    patch_labels: Option<&std::collections::BTreeMap<String, Vec<Option<u8>>>>,
) -> Result<Vec<SlideRecord>> {
    let mut records = Vec::with_capacity(bags.len());
    for bag in bags {
        let rec = SlideRecord::for_bag(bag);
        write_bag(
            &rec,
            &EmbeddingBlock::from_matrix(&bag.embeddings)?,
            &bag.coords,
            root,
        )?;
        if let Some(labels) = patch_labels.and_then(|m| m.get(&bag.slide_id)) {
            write_patch_labels(&rec, labels, root)?;
        }
        records.push(rec);
    }
    write_manifest(&records, root)?;
    Ok(records)
}

/// Reads the manifest and every bag it lists.
pub fn read_cohort(root: &Path) -> Result<(Vec<SlideRecord>, Vec<Bag>)> {
    let records = read_manifest(root)?;
    let bags = records
        .iter()
        .map(|r| read_bag(r, root))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, bags))
}
