//! Matrix files and image annotation records.
//!
//! Matrix file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VLEB" (56 4C 45 42)
//! 4       4     u32 version = 1
//! 8       4     u32 dtype   = 0 (f32)
//! 12      8     u64 rows
//! 20      8     u64 cols
//! 28      8     u64 key block length in bytes
//! 36      ..    key block: rows x (u32 length + UTF-8 bytes)
//! ..      ..    rows x cols f32, row-major
//! ```
//!
//! A score matrix is stored as a matrix file keyed by image id plus a
//! `<path>.cols` sidecar listing the text keys, one per line.
//!
//! Records are JSON lines; see `schema/records.md` in the repository.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::LabelId;

pub const MAGIC: [u8; 4] = *b"VLEB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const HEADER_LEN: usize = 36;

/// Dense row-major f32 matrix with one string key per row.
#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
    keys: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbeddingMatrix {
    /// Bitwise on the data, so NaN payloads compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.keys == other.keys
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    pub fn new(keys: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        let expected = keys
            .len()
            .checked_mul(dim)
            .ok_or_else(|| Error::ShapeOverflow(format!("{} x {}", keys.len(), dim)))?;
        if data.len() != expected {
            return Err(Error::InvalidMatrix(format!(
                "data length {} != {} rows x {} cols",
                data.len(),
                keys.len(),
                dim
            )));
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::DuplicateKey(k.clone()));
            }
        }
        Ok(EmbeddingMatrix {
            dim,
            data,
            keys,
            index,
        })
    }

    pub fn from_rows(keys: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch {
                left: dim,
                right: bad.len(),
            });
        }
        EmbeddingMatrix::new(keys, dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn key_index(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn row_by_key(&self, key: &str) -> Option<&[f32]> {
        self.key_index(key).map(|i| self.row(i))
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_matrix(&self.keys, self.dim, &self.data)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (keys, cols, data) = decode_matrix(bytes)?;
        EmbeddingMatrix::new(keys, cols, data)
    }
}

/// Images x texts score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    image_keys: Vec<String>,
    text_keys: Vec<String>,
    data: Vec<f32>,
}

impl ScoreMatrix {
    pub fn new(image_keys: Vec<String>, text_keys: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != image_keys.len() * text_keys.len() {
            return Err(Error::InvalidMatrix(format!(
                "data length {} != {} x {}",
                data.len(),
                image_keys.len(),
                text_keys.len()
            )));
        }
        for keys in [&image_keys, &text_keys] {
            let mut seen = HashSet::new();
            if let Some(dup) = keys.iter().find(|k| !seen.insert(k.as_str())) {
                return Err(Error::DuplicateKey(dup.clone()));
            }
        }
        Ok(ScoreMatrix {
            image_keys,
            text_keys,
            data,
        })
    }

    pub fn n_images(&self) -> usize {
        self.image_keys.len()
    }

    pub fn n_texts(&self) -> usize {
        self.text_keys.len()
    }

    pub fn image_keys(&self) -> &[String] {
        &self.image_keys
    }

    pub fn text_keys(&self) -> &[String] {
        &self.text_keys
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, image: usize, text: usize) -> f32 {
        self.data[image * self.text_keys.len() + text]
    }

    pub fn row(&self, image: usize) -> &[f32] {
        let n = self.text_keys.len();
        &self.data[image * n..(image + 1) * n]
    }

    pub fn column(&self, text: usize) -> Vec<f32> {
        (0..self.n_images()).map(|i| self.get(i, text)).collect()
    }

    pub fn text_index(&self) -> HashMap<&str, usize> {
        self.text_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect()
    }

    /// The matrix-file half of a score matrix (rows keyed by image).
    pub fn to_embedding_form(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::new(self.image_keys.clone(), self.text_keys.len(), self.data.clone())
            .expect("score matrix invariants imply matrix invariants")
    }
}

fn encode_matrix(keys: &[String], cols: usize, data: &[f32]) -> Vec<u8> {
    let key_block: usize = keys.iter().map(|k| 4 + k.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + key_block + 4 * data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(keys.len() as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.extend_from_slice(&(key_block as u64).to_le_bytes());
    for k in keys {
        out.extend_from_slice(&(k.len() as u32).to_le_bytes());
        out.extend_from_slice(k.as_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::TruncatedFile(format!("{what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode_matrix(bytes: &[u8]) -> Result<(Vec<String>, usize, Vec<f32>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = cur.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let rows = cur.u64("rows")?;
    let cols = cur.u64("cols")?;
    let key_len = cur.u64("key block length")?;

    let overflow = || Error::ShapeOverflow(format!("{rows} x {cols}"));
    let rows_us = usize::try_from(rows).map_err(|_| overflow())?;
    let cols_us = usize::try_from(cols).map_err(|_| overflow())?;
    let n_values = rows_us.checked_mul(cols_us).ok_or_else(overflow)?;
    let data_len = n_values.checked_mul(4).ok_or_else(overflow)?;
    let key_len = usize::try_from(key_len)
        .map_err(|_| Error::ShapeOverflow(format!("key block of {key_len} bytes")))?;
    // Each key needs at least its 4-byte length prefix.
    if rows_us.checked_mul(4).is_none_or(|min| min > key_len) {
        return Err(Error::ShapeOverflow(format!(
            "key block of {key_len} bytes cannot hold {rows} keys"
        )));
    }

    let block = cur.take(key_len, "key block")?;
    let mut kc = Cursor { bytes: block, pos: 0 };
    let mut keys = Vec::with_capacity(rows_us);
    for i in 0..rows_us {
        let n = kc.u32("key length")? as usize;
        let raw = kc
            .take(n, "key bytes")
            .map_err(|_| Error::InvalidMatrix(format!("key {i} overruns the key block")))?;
        let key = std::str::from_utf8(raw)
            .map_err(|_| Error::InvalidMatrix(format!("key {i} is not valid UTF-8")))?;
        keys.push(key.to_string());
    }
    if kc.pos != block.len() {
        return Err(Error::InvalidMatrix(format!(
            "key block has {} unused bytes",
            block.len() - kc.pos
        )));
    }

    let remaining = bytes.len() - cur.pos;
    if remaining < data_len {
        return Err(Error::TruncatedFile(format!(
            "expected {data_len} data bytes, found {remaining}"
        )));
    }
    if remaining > data_len {
        return Err(Error::InvalidMatrix(format!(
            "{} trailing bytes after data",
            remaining - data_len
        )));
    }
    let data = bytes[cur.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((keys, cols_us, data))
}

pub fn write_matrix(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, m.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::decode(&bytes)
}

pub fn score_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cols");
    PathBuf::from(s)
}

pub fn write_scores(s: &ScoreMatrix, path: &Path) -> Result<()> {
    write_matrix(&s.to_embedding_form(), path)?;
    let cols: String = s.text_keys.iter().map(|k| format!("{k}\n")).collect();
    let side = score_sidecar(path);
    std::fs::write(&side, cols).map_err(|e| Error::io(side, e))
}

pub fn read_scores(path: &Path) -> Result<ScoreMatrix> {
    let m = read_matrix(path)?;
    let side = score_sidecar(path);
    let cols = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let text_keys: Vec<String> = cols.lines().map(str::to_string).collect();
    if text_keys.len() != m.dim() {
        return Err(Error::InvalidMatrix(format!(
            "{} lists {} text keys for {} columns",
            side.display(),
            text_keys.len(),
            m.dim()
        )));
    }
    ScoreMatrix::new(m.keys, text_keys, m.data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub label: LabelId,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// One annotated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub labels: Vec<LabelId>,
    #[serde(default)]
    pub boxes: Vec<BoundingBox>,
    #[serde(default)]
    pub captions: Vec<String>,
    /// Optional pre-annotated entity spans per caption as byte ranges
    /// `[start, end)`; when present, caption perturbation uses these
    /// instead of lexicon matching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_spans: Option<Vec<Vec<[usize; 2]>>>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidRecord(format!(
                "image `{}` has zero width or height",
                self.image_id
            )));
        }
        let labels: HashSet<&str> = self.labels.iter().map(LabelId::as_str).collect();
        for b in &self.boxes {
            if !labels.contains(b.label.as_str()) {
                return Err(Error::LabelMissingForBox {
                    image: self.image_id.clone(),
                    label: b.label.to_string(),
                });
            }
            let inside = b.x >= 0.0
                && b.y >= 0.0
                && b.w >= 0.0
                && b.h >= 0.0
                && b.x + b.w <= self.width as f64
                && b.y + b.h <= self.height as f64;
            if !inside {
                return Err(Error::BoxOutOfBounds {
                    image: self.image_id.clone(),
                    label: b.label.to_string(),
                });
            }
        }
        if let Some(spans) = &self.entity_spans {
            if spans.len() != self.captions.len() {
                return Err(Error::InvalidRecord(format!(
                    "image `{}`: entity_spans has {} entries for {} captions",
                    self.image_id,
                    spans.len(),
                    self.captions.len()
                )));
            }
            for (cap, cap_spans) in self.captions.iter().zip(spans) {
                for &[s, e] in cap_spans {
                    if s >= e || e > cap.len() || !cap.is_char_boundary(s) || !cap.is_char_boundary(e) {
                        return Err(Error::InvalidRecord(format!(
                            "image `{}`: bad entity span [{s}, {e}) in `{cap}`",
                            self.image_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l.as_str() == label)
    }

    /// Fraction of the image covered by boxes of `label`: summed box area
    /// over image area, clamped to 1.
    pub fn area_fraction(&self, label: &str) -> Option<f64> {
        let boxes: Vec<&BoundingBox> = self.boxes.iter().filter(|b| b.label.as_str() == label).collect();
        if boxes.is_empty() {
            return None;
        }
        let area: f64 = boxes.iter().map(|b| b.area()).sum();
        Some((area / (self.width as f64 * self.height as f64)).min(1.0))
    }
}

/// Parses JSON-lines records. Blank lines are skipped; duplicate labels in a
/// record collapse to their first occurrence.
pub fn parse_records(text: &str, source: &str) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ImageRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(source, lineno + 1, e.to_string()))?;
        let mut seen = HashSet::new();
        rec.labels.retain(|l| seen.insert(l.clone()));
        rec.validate()?;
        if !ids.insert(rec.image_id.clone()) {
            return Err(Error::parse(
                source,
                lineno + 1,
                format!("duplicate image_id `{}`", rec.image_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, &path.display().to_string())
}

pub fn records_to_string(records: &[ImageRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Checks that matrix rows are keyed by the record image ids, in order.
pub fn check_alignment(m: &EmbeddingMatrix, records: &[ImageRecord]) -> Result<()> {
    for (i, (k, r)) in m.keys().iter().zip(records).enumerate() {
        if *k != r.image_id {
            return Err(Error::KeyMismatch {
                index: i,
                matrix: k.clone(),
                record: r.image_id.clone(),
            });
        }
    }
    if m.rows() != records.len() {
        let i = m.rows().min(records.len());
        return Err(Error::KeyMismatch {
            index: i,
            matrix: m.keys().get(i).cloned().unwrap_or_default(),
            record: records.get(i).map(|r| r.image_id.clone()).unwrap_or_default(),
        });
    }
    Ok(())
}
