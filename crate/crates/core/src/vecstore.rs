//! Word vectors and the sense inventory built on top of them.
//!
//! The embedding file uses the plain text interchange layout: a `<count> <dim>`
//! header followed by one `<label> <f1> ... <fdim>` row per word. A label of
//! the form `base#sense` stores one sense of an ambiguous word.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

/// Separator between a base label and its sense id.
pub const SENSE_SEPARATOR: char = '#';

#[derive(Debug, Error)]
pub enum VecStoreError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed header, expected \"<count> <dim>\"")]
    MalformedHeader { line: usize },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate label {label:?}")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: value {value:?} is not a finite number")]
    NonFinite { line: usize, value: String },
    #[error("line {line}: zero vector for label {label:?}")]
    ZeroVector { line: usize, label: String },
    #[error("line {line}: empty label")]
    EmptyLabel { line: usize },
    #[error("header declares {expected} rows, file has {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("line {line}: sense {label:?} has no vector in the store")]
    MissingSenseVector { line: usize, label: String },
    #[error("line {line}: label {label:?} has no senses")]
    NoSenses { line: usize, label: String },
    #[error("label {label:?} has duplicate sense id {sense:?}")]
    DuplicateSense { label: String, sense: String },
    #[error("utterance has no token with a known vector")]
    EmptyUtterance,
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("vectors of dimension {found} do not match store dimension {expected}")]
    WrongDimension { expected: usize, found: usize },
}

/// One row of the embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVector {
    pub label: String,
    pub vector: Vec<f64>,
}

/// Immutable label → vector table with exact-match lookup.
#[derive(Debug, Clone, Default)]
pub struct VectorStore {
    dim: usize,
    rows: Vec<WordVector>,
    index: HashMap<String, usize>,
}

impl VectorStore {
    /// Builds a store from rows, applying the same checks as [`load_vectors`].
    pub fn from_rows(dim: usize, rows: Vec<WordVector>) -> Result<Self, VecStoreError> {
        let mut index = HashMap::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let line = i + 2;
            if row.label.is_empty() {
                return Err(VecStoreError::EmptyLabel { line });
            }
            if row.vector.len() != dim {
                return Err(VecStoreError::DimensionMismatch {
                    line,
                    expected: dim,
                    found: row.vector.len(),
                });
            }
            if let Some(v) = row.vector.iter().find(|v| !v.is_finite()) {
                return Err(VecStoreError::NonFinite {
                    line,
                    value: v.to_string(),
                });
            }
            if row.vector.iter().all(|&v| v == 0.0) {
                return Err(VecStoreError::ZeroVector {
                    line,
                    label: row.label.clone(),
                });
            }
            if index.insert(row.label.clone(), i).is_some() {
                return Err(VecStoreError::DuplicateLabel {
                    line,
                    label: row.label.clone(),
                });
            }
        }
        Ok(Self { dim, rows, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&[f64]> {
        self.index
            .get(label)
            .map(|&i| self.rows[i].vector.as_slice())
    }

    pub fn rows(&self) -> &[WordVector] {
        &self.rows
    }

    /// Returns a copy with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| WordVector {
                label: r.label.clone(),
                vector: r.vector.iter().map(|v| v * factor).collect(),
            })
            .collect();
        Self {
            dim: self.dim,
            rows,
            index: self.index.clone(),
        }
    }

    /// Serializes in the text embedding format. Floats use the shortest
    /// representation that parses back to the same bits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.rows.len(), self.dim);
        for row in &self.rows {
            out.push_str(&row.label);
            for v in &row.vector {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VecStoreError> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|source| io_err(path, source))?;
        file.write_all(self.to_text().as_bytes())
            .map_err(|source| io_err(path, source))
    }

    pub fn parse(text: &str) -> Result<Self, VecStoreError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (count, dim) = match lines.next() {
            Some((_, header)) => parse_header(header)?,
            None => return Err(VecStoreError::MalformedHeader { line: 1 }),
        };
        let mut rows = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        for (line, raw) in lines {
            if raw.trim().is_empty() {
                continue;
            }
            let mut fields = raw.split_whitespace();
            let label = fields.next().ok_or(VecStoreError::EmptyLabel { line })?;
            let mut vector = Vec::with_capacity(dim);
            for field in fields {
                let value: f64 = field.parse().map_err(|_| VecStoreError::NonFinite {
                    line,
                    value: field.to_string(),
                })?;
                if !value.is_finite() {
                    return Err(VecStoreError::NonFinite {
                        line,
                        value: field.to_string(),
                    });
                }
                vector.push(value);
            }
            if vector.len() != dim {
                return Err(VecStoreError::DimensionMismatch {
                    line,
                    expected: dim,
                    found: vector.len(),
                });
            }
            if vector.iter().all(|&v| v == 0.0) {
                return Err(VecStoreError::ZeroVector {
                    line,
                    label: label.to_string(),
                });
            }
            if index.insert(label.to_string(), rows.len()).is_some() {
                return Err(VecStoreError::DuplicateLabel {
                    line,
                    label: label.to_string(),
                });
            }
            rows.push(WordVector {
                label: label.to_string(),
                vector,
            });
        }
        if rows.len() != count {
            return Err(VecStoreError::CountMismatch {
                expected: count,
                found: rows.len(),
            });
        }
        Ok(Self { dim, rows, index })
    }
}

fn parse_header(header: &str) -> Result<(usize, usize), VecStoreError> {
    let bad = VecStoreError::MalformedHeader { line: 1 };
    let mut parts = header.split_whitespace();
    let count = parts.next().and_then(|s| s.parse().ok());
    let dim = parts.next().and_then(|s| s.parse().ok());
    match (count, dim, parts.next()) {
        (Some(count), Some(dim), None) if dim > 0 => Ok((count, dim)),
        _ => Err(bad),
    }
}

fn io_err(path: &Path, source: io::Error) -> VecStoreError {
    VecStoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads an embedding file.
pub fn load_vectors(path: impl AsRef<Path>) -> Result<VectorStore, VecStoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    VectorStore::parse(&text)
}

/// One candidate interpretation of a label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sense {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Label → ordered candidate senses. Unambiguous labels carry a single sense
/// with an empty id.
#[derive(Debug, Clone, Default)]
pub struct SenseInventory {
    dim: usize,
    entries: BTreeMap<String, Vec<Sense>>,
    scale: f64,
}

impl SenseInventory {
    /// Groups every `base#sense` row of the store under its base label; plain
    /// rows become single-sense labels.
    pub fn from_store(store: &VectorStore) -> Self {
        let mut entries: BTreeMap<String, Vec<Sense>> = BTreeMap::new();
        for row in store.rows() {
            let (base, sense) = split_label(&row.label);
            let slot = entries.entry(base.to_string()).or_default();
            if sense.is_some() {
                // an ambiguous base replaces any plain row with the same name
                slot.retain(|s| !s.id.is_empty());
            } else if !slot.is_empty() {
                continue;
            }
            slot.push(Sense {
                id: sense.unwrap_or("").to_string(),
                vector: row.vector.clone(),
            });
        }
        Self {
            dim: store.dim(),
            entries,
            scale: mean_norm(store),
        }
    }

    /// Parses an inventory listing. Each non-empty line is either `base#sense`,
    /// naming one sense row, or a bare `base`, selecting every `base#*` row.
    /// Plain store rows not mentioned stay single-sense labels.
    pub fn parse(text: &str, store: &VectorStore) -> Result<Self, VecStoreError> {
        let mut entries: BTreeMap<String, Vec<Sense>> = BTreeMap::new();
        for row in store.rows() {
            if split_label(&row.label).1.is_none() {
                entries.insert(
                    row.label.clone(),
                    vec![Sense {
                        id: String::new(),
                        vector: row.vector.clone(),
                    }],
                );
            }
        }
        let mut ambiguous: BTreeMap<String, Vec<Sense>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let item = raw.trim();
            if item.is_empty() {
                continue;
            }
            let (base, sense) = split_label(item);
            let found: Vec<Sense> = match sense {
                Some(id) => {
                    let vector =
                        store
                            .get(item)
                            .ok_or_else(|| VecStoreError::MissingSenseVector {
                                line,
                                label: item.to_string(),
                            })?;
                    if id.is_empty() {
                        return Err(VecStoreError::NoSenses {
                            line,
                            label: base.to_string(),
                        });
                    }
                    vec![Sense {
                        id: id.to_string(),
                        vector: vector.to_vec(),
                    }]
                }
                None => {
                    let prefix = format!("{base}{SENSE_SEPARATOR}");
                    store
                        .rows()
                        .iter()
                        .filter_map(|r| {
                            r.label.strip_prefix(&prefix).map(|id| Sense {
                                id: id.to_string(),
                                vector: r.vector.clone(),
                            })
                        })
                        .collect()
                }
            };
            if found.is_empty() {
                return Err(VecStoreError::NoSenses {
                    line,
                    label: base.to_string(),
                });
            }
            let slot = ambiguous.entry(base.to_string()).or_default();
            for sense in found {
                if slot.iter().any(|s| s.id == sense.id) {
                    return Err(VecStoreError::DuplicateSense {
                        label: base.to_string(),
                        sense: sense.id,
                    });
                }
                slot.push(sense);
            }
        }
        entries.extend(ambiguous);
        Ok(Self {
            dim: store.dim(),
            entries,
            scale: mean_norm(store),
        })
    }

    /// Builds an inventory from explicit entries.
    pub fn from_entries(
        dim: usize,
        entries: BTreeMap<String, Vec<Sense>>,
    ) -> Result<Self, VecStoreError> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (label, senses) in &entries {
            if senses.is_empty() {
                return Err(VecStoreError::NoSenses {
                    line: 0,
                    label: label.clone(),
                });
            }
            for (i, s) in senses.iter().enumerate() {
                if s.vector.len() != dim {
                    return Err(VecStoreError::WrongDimension {
                        expected: dim,
                        found: s.vector.len(),
                    });
                }
                if senses[..i].iter().any(|o| o.id == s.id) {
                    return Err(VecStoreError::DuplicateSense {
                        label: label.clone(),
                        sense: s.id.clone(),
                    });
                }
                total += norm(&s.vector);
                n += 1;
            }
        }
        let scale = if n == 0 { 1.0 } else { total / n as f64 };
        Ok(Self {
            dim,
            entries,
            scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean vector norm of the underlying store; the unit in which noise
    /// standard deviations are expressed.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn senses(&self, label: &str) -> Option<&[Sense]> {
        self.entries.get(label).map(Vec::as_slice)
    }

    pub fn is_ambiguous(&self, label: &str) -> bool {
        self.entries.get(label).is_some_and(|s| s.len() > 1)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The vector a token contributes to an utterance average: the word
    /// vector for a single-sense label, the mean of the sense vectors for an
    /// ambiguous one.
    pub fn token_vector(&self, label: &str) -> Option<Vec<f64>> {
        let senses = self.entries.get(label)?;
        if senses.len() == 1 {
            return Some(senses[0].vector.clone());
        }
        let mut acc = RunningMean::new(self.dim);
        for s in senses {
            acc.push(&s.vector);
        }
        acc.finish()
    }

    /// Arithmetic mean of the resolvable tokens' vectors. Unknown tokens are
    /// skipped.
    pub fn utterance_mean<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>, VecStoreError> {
        let mut acc = RunningMean::new(self.dim);
        for tok in tokens {
            if let Some(v) = self.token_vector(tok.as_ref()) {
                acc.push(&v);
            }
        }
        acc.finish().ok_or(VecStoreError::EmptyUtterance)
    }

    /// Copy of the inventory with one sense of `label` removed. The noise
    /// scale is kept from the original store.
    pub fn without_sense(&self, label: &str, sense_id: &str) -> Result<Self, VecStoreError> {
        let mut out = self.clone();
        let senses = out
            .entries
            .get_mut(label)
            .ok_or_else(|| VecStoreError::UnknownLabel(label.to_string()))?;
        let before = senses.len();
        senses.retain(|s| s.id != sense_id);
        if senses.len() == before {
            return Err(VecStoreError::UnknownLabel(format!(
                "{label}{SENSE_SEPARATOR}{sense_id}"
            )));
        }
        if senses.is_empty() {
            return Err(VecStoreError::NoSenses {
                line: 0,
                label: label.to_string(),
            });
        }
        Ok(out)
    }

    /// Copy with every vector multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, senses)| {
                let senses = senses
                    .iter()
                    .map(|s| Sense {
                        id: s.id.clone(),
                        vector: s.vector.iter().map(|v| v * factor).collect(),
                    })
                    .collect();
                (k.clone(), senses)
            })
            .collect();
        Self {
            dim: self.dim,
            entries,
            scale: self.scale * factor,
        }
    }
}

/// Loads an inventory listing against a store.
pub fn load_sense_inventory(
    path: impl AsRef<Path>,
    store: &VectorStore,
) -> Result<SenseInventory, VecStoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    SenseInventory::parse(&text, store)
}

/// Incremental mean; `k` copies of one vector average to that vector exactly.
struct RunningMean {
    mean: Vec<f64>,
    n: usize,
}

impl RunningMean {
    fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            n: 0,
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        if self.n == 1 {
            self.mean.copy_from_slice(v);
            return;
        }
        let n = self.n as f64;
        for (m, x) in self.mean.iter_mut().zip(v) {
            *m += (x - *m) / n;
        }
    }

    fn finish(self) -> Option<Vec<f64>> {
        (self.n > 0).then_some(self.mean)
    }
}

/// Splits `base#sense` into its parts; plain labels return `None` for the sense.
pub fn split_label(label: &str) -> (&str, Option<&str>) {
    match label.split_once(SENSE_SEPARATOR) {
        Some((base, sense)) => (base, Some(sense)),
        None => (label, None),
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mean_norm(store: &VectorStore) -> f64 {
    if store.is_empty() {
        return 1.0;
    }
    store.rows().iter().map(|r| norm(&r.vector)).sum::<f64>() / store.len() as f64
}
