//! Labelled example sets and their on-disk container.
//!
//! Container layout: the 8-byte magic `GVDSET01`, a little-endian `u64`
//! header length, a JSON header (dims, seed, labels, provenance), then the
//! features as little-endian `f64`, one example after another.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"GVDSET01";
const FORMAT_VERSION: u32 = 1;

/// Where an example came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    /// Member of a duplicate group whose features equal example `j`'s.
    DuplicateOf(usize),
    Corrupted,
    /// Point placed in the margin region of the two-blob demo.
    Margin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    /// Labels in {-1, +1}.
    Binary,
    /// Labels in {0, .., C-1}.
    Classes(usize),
}

impl LabelSpace {
    pub fn contains(self, label: i32) -> bool {
        match self {
            LabelSpace::Binary => label == 1 || label == -1,
            LabelSpace::Classes(c) => label >= 0 && (label as usize) < c,
        }
    }
}

/// `N` examples of dimension `I`. Features are stored example-major
/// (row `i` is example `i`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<i32>,
    label_space: LabelSpace,
    provenance: Vec<Provenance>,
    seed: u64,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<i32>,
        label_space: LabelSpace,
        provenance: Vec<Provenance>,
        seed: u64,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || provenance.len() != n {
            return Err(Error::contract(format!(
                "dataset with {n} examples has {} labels and {} provenance tags",
                labels.len(),
                provenance.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| !label_space.contains(y)) {
            return Err(Error::contract(format!(
                "label {} of example {i} outside {label_space:?}",
                labels[i]
            )));
        }
        for (i, p) in provenance.iter().enumerate() {
            if let Provenance::DuplicateOf(j) = *p {
                if j >= n || features.row(i) != features.row(j) {
                    return Err(Error::contract(format!(
                        "example {i} tagged duplicate of {j} but features differ"
                    )));
                }
            }
        }
        Ok(Dataset {
            features,
            labels,
            label_space,
            provenance,
            seed,
        })
    }

    /// Dataset with every example tagged original.
    pub fn from_examples(
        features: Matrix,
        labels: Vec<i32>,
        label_space: LabelSpace,
        seed: u64,
    ) -> Result<Self> {
        let n = features.rows();
        Dataset::new(features, labels, label_space, vec![Provenance::Original; n], seed)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn example(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    #[inline]
    pub fn label(&self, i: usize) -> i32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn label_space(&self) -> LabelSpace {
        self.label_space
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Content hash over features and labels (not provenance).
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.features.shape().hash(&mut h);
        for x in self.features.data() {
            x.to_bits().hash(&mut h);
        }
        self.labels.hash(&mut h);
        h.finish()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = FileHeader {
            version: FORMAT_VERSION,
            n: self.len(),
            input_dim: self.input_dim(),
            seed: self.seed,
            label_space: self.label_space,
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.features.data().len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in self.features.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated dataset header".into()))?;
        let header: FileHeader = serde_json::from_slice(&bytes[16..payload_start])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {}",
                header.version
            )));
        }
        let payload = &bytes[payload_start..];
        let expected = header.n * header.input_dim * 8;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "dataset payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let features = Matrix::from_vec(header.n, header.input_dim, data)?;
        Dataset::new(
            features,
            header.labels,
            header.label_space,
            header.provenance,
            header.seed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    version: u32,
    n: usize,
    input_dim: usize,
    seed: u64,
    label_space: LabelSpace,
    labels: Vec<i32>,
    provenance: Vec<Provenance>,
}
