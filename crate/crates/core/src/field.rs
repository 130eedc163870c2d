//! Dense per-pixel score and label fields and their binary file formats.
//!
//! `.hssf`: magic `HSSF`, little-endian `u32` dims `H`, `W`, `|V|`, then
//! `H*W*|V|` little-endian `f32` scores, row-major with the node id fastest.
//!
//! `.hslf`: magic `HSLF`, little-endian `u32` dims `H`, `W`, then `H*W`
//! little-endian `u32` leaf ids. `0xFFFF_FFFF` marks an ignored pixel.

use std::path::Path;

use crate::error::{Error, Result};
use crate::taxonomy::ClassHierarchy;

pub const SCORE_MAGIC: &[u8; 4] = b"HSSF";
pub const LABEL_MAGIC: &[u8; 4] = b"HSLF";
pub const IGNORE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ScoreField {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(classes))
            .ok_or_else(|| Error::invalid("score field dimensions overflow"))?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                what: "score field",
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::invalid(format!(
                "score {} at flat index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn check_hierarchy(&self, h: &ClassHierarchy) -> Result<()> {
        if self.classes != h.len() {
            return Err(Error::LengthMismatch {
                what: "score field class axis",
                expected: h.len(),
                got: self.classes,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(SCORE_MAGIC);
        for d in [self.height, self.width, self.classes] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, body) = read_header(bytes, SCORE_MAGIC, 3)?;
        let [height, width, classes] = [dims[0], dims[1], dims[2]];
        let count = checked_count(&[height, width, classes])?;
        expect_body(body, count)?;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(height, width, classes, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelField {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .ok_or_else(|| Error::invalid("label field dimensions overflow"))?;
        if labels.len() != expected {
            return Err(Error::LengthMismatch {
                what: "label field",
                expected,
                got: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// Builds a field from node ids, `None` meaning ignored.
    pub fn from_ids(height: usize, width: usize, ids: &[Option<usize>]) -> Result<Self> {
        let labels = ids.iter().map(|v| v.map_or(IGNORE, |v| v as u32)).collect();
        Self::new(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    /// Node id at pixel `i`, or `None` when ignored.
    pub fn get(&self, i: usize) -> Option<usize> {
        match self.labels[i] {
            IGNORE => None,
            v => Some(v as usize),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        (0..self.labels.len()).map(|i| self.get(i))
    }

    pub fn raw(&self) -> &[u32] {
        &self.labels
    }

    pub fn same_dims(&self, other: &LabelField) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Checks that every non-ignored pixel holds a leaf of `h`.
    pub fn validate(&self, h: &ClassHierarchy) -> Result<()> {
        for (i, v) in self.iter().enumerate() {
            if let Some(v) = v {
                if !h.is_leaf(v) {
                    return Err(Error::invalid(format!(
                        "pixel {i} label {v} is not a leaf of the hierarchy"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.labels.len());
        out.extend_from_slice(LABEL_MAGIC);
        for d in [self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.labels {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, body) = read_header(bytes, LABEL_MAGIC, 2)?;
        let count = checked_count(&dims)?;
        expect_body(body, count)?;
        let labels = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims[0], dims[1], labels)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn read_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    ndims: usize,
) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "truncated header: {} bytes, need {header}",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let dims = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Ok((dims, &bytes[header..]))
}

fn checked_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::Format("dimensions overflow".into()))
}

fn expect_body(body: &[u8], count: usize) -> Result<()> {
    if body.len() as u128 != count as u128 * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims require {}",
            body.len(),
            count as u128 * 4
        )));
    }
    Ok(())
}
