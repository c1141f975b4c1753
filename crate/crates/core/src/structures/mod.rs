//! Atomic structure records, JSON-Lines datasets, splits and devsets.

mod synthetic;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use synthetic::{generate_synthetic, PairPotential};

use crate::Z_MAX;

/// Atoms closer than this are treated as coincident.
pub const MIN_SEPARATION: f64 = 1e-6;

/// Role of an atom in a catalyst + adsorbate system.
pub mod tag {
    pub const SUBSURFACE: u8 = 0;
    pub const SURFACE: u8 = 1;
    pub const ADSORBATE: u8 = 2;
}

#[derive(Debug, thiserror::Error)]
pub enum StructureError {
    #[error("record {id}: {field}: {msg}")]
    Invalid {
        id: String,
        field: &'static str,
        msg: String,
    },
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Selection(String),
}

impl StructureError {
    fn invalid(id: &str, field: &'static str, msg: impl Into<String>) -> Self {
        StructureError::Invalid {
            id: id.to_string(),
            field,
            msg: msg.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        StructureError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One catalyst + adsorbate record. Units: Å, eV, eV/Å.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicStructure {
    pub id: String,
    pub atomic_numbers: Vec<u32>,
    pub positions: Vec<[f64; 3]>,
    pub tags: Vec<u8>,
    pub energy: Option<f64>,
    pub forces: Option<Vec<[f64; 3]>>,
    pub cell: Option<[[f64; 3]; 3]>,
}

impl AtomicStructure {
    pub fn num_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    /// Indices of atoms carrying `tag`.
    pub fn indices_with_tag(&self, tag: u8) -> Vec<usize> {
        (0..self.num_atoms())
            .filter(|&i| self.tags[i] == tag)
            .collect()
    }

    pub fn validate(&self) -> Result<(), StructureError> {
        let id = &self.id;
        let n = self.atomic_numbers.len();
        if self.tags.len() != n {
            return Err(StructureError::invalid(
                id,
                "tags",
                format!("{} tags for {n} atoms", self.tags.len()),
            ));
        }
        if self.positions.len() != n {
            return Err(StructureError::invalid(
                id,
                "positions",
                format!("{} rows for {n} atoms", self.positions.len()),
            ));
        }
        if let Some(forces) = &self.forces {
            if forces.len() != n {
                return Err(StructureError::invalid(
                    id,
                    "forces",
                    format!("{} rows for {n} atoms", forces.len()),
                ));
            }
            if forces.iter().flatten().any(|v| !v.is_finite()) {
                return Err(StructureError::invalid(id, "forces", "non-finite value"));
            }
        }
        if let Some(&z) = self
            .atomic_numbers
            .iter()
            .find(|&&z| z < 1 || z as usize > Z_MAX)
        {
            return Err(StructureError::invalid(
                id,
                "atomic_numbers",
                format!("{z} outside [1, {Z_MAX}]"),
            ));
        }
        if let Some(&t) = self.tags.iter().find(|&&t| t > tag::ADSORBATE) {
            return Err(StructureError::invalid(
                id,
                "tags",
                format!("{t} is not one of 0, 1, 2"),
            ));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(StructureError::invalid(id, "positions", "non-finite value"));
        }
        if let Some(e) = self.energy {
            if !e.is_finite() {
                return Err(StructureError::invalid(id, "energy", "non-finite value"));
            }
        }
        for i in 0..n {
            for j in 0..i {
                if distance(&self.positions[i], &self.positions[j]) < MIN_SEPARATION {
                    return Err(StructureError::invalid(
                        id,
                        "positions",
                        format!("atoms {j} and {i} coincide"),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Reads a JSON-Lines dataset, validating every record. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<AtomicStructure>, StructureError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| StructureError::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StructureError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AtomicStructure =
            serde_json::from_str(&line).map_err(|source| StructureError::Malformed {
                line: k + 1,
                source,
            })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Serializes records one per line, `\n`-terminated.
pub fn dataset_to_string(records: &[AtomicStructure]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("structures always serialize"));
        s.push('\n');
    }
    s
}

pub fn save_dataset(
    path: impl AsRef<Path>,
    records: &[AtomicStructure],
) -> Result<(), StructureError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| StructureError::io(path, e))?;
    f.write_all(dataset_to_string(records).as_bytes())
        .map_err(|e| StructureError::io(path, e))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_checksum(path: impl AsRef<Path>) -> Result<String, StructureError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StructureError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Provenance of a dataset file written by this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub record_count: usize,
    pub split: String,
    pub seed: u64,
    pub checksum: String,
}

impl DatasetManifest {
    /// Builds a manifest for an already-written file.
    pub fn for_file(
        path: impl AsRef<Path>,
        record_count: usize,
        split: &str,
        seed: u64,
    ) -> Result<Self, StructureError> {
        let path = path.as_ref();
        if record_count == 0 {
            return Err(StructureError::Selection(
                "a manifest needs at least one record".into(),
            ));
        }
        Ok(DatasetManifest {
            path: path.to_path_buf(),
            record_count,
            split: split.to_string(),
            seed,
            checksum: file_checksum(path)?,
        })
    }

    /// Whether the file on disk still matches the recorded checksum.
    pub fn verify(&self) -> Result<bool, StructureError> {
        Ok(file_checksum(&self.path)? == self.checksum)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StructureError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| StructureError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StructureError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| StructureError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| StructureError::Malformed { line: 1, source })
    }
}

fn seeded_permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Picks `n` distinct records by a seeded shuffle.
///
/// The returned manifest has an empty `path` and `checksum` until the devset
/// is written; see [`DatasetManifest::for_file`].
pub fn make_devset(
    dataset: &[AtomicStructure],
    n: usize,
    seed: u64,
) -> Result<(Vec<AtomicStructure>, DatasetManifest), StructureError> {
    if n == 0 || n > dataset.len() {
        return Err(StructureError::Selection(format!(
            "devset size {n} must be in 1..={}",
            dataset.len()
        )));
    }
    let picked: Vec<AtomicStructure> = seeded_permutation(dataset.len(), seed)
        .into_iter()
        .take(n)
        .map(|i| dataset[i].clone())
        .collect();
    let manifest = DatasetManifest {
        path: PathBuf::new(),
        record_count: n,
        split: "devset".into(),
        seed,
        checksum: String::new(),
    };
    Ok((picked, manifest))
}

/// Seeded partition of `dataset` by `fractions`.
///
/// Split sizes are `floor(fraction * len)`; records left over by rounding go
/// to the first split.
pub fn split_dataset(
    dataset: &[AtomicStructure],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<AtomicStructure>>, StructureError> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(StructureError::Selection(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(StructureError::Selection(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let len = dataset.len();
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| (f * len as f64).floor() as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    sizes[0] += len - assigned;

    let order = seeded_permutation(len, seed);
    let mut splits = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        splits.push(
            order[start..start + size]
                .iter()
                .map(|&i| dataset[i].clone())
                .collect(),
        );
        start += size;
    }
    Ok(splits)
}
