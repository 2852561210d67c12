//! Embeddings, distance metrics and the labelled reference library.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::str::FromStr;

use super::ReidError;

pub const EMBEDDING_DIM: usize = 32;

/// 32-dimensional identity vector; every component finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding([f64; EMBEDDING_DIM]);

impl Embedding {
    pub fn new(values: [f64; EMBEDDING_DIM]) -> Result<Self, ReidError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Embedding(values))
        } else {
            Err(ReidError::NonFinite)
        }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, ReidError> {
        let arr: [f64; EMBEDDING_DIM] = values
            .try_into()
            .map_err(|_| ReidError::Dimension(values.len()))?;
        Embedding::new(arr)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Distance between embeddings. The triplet-trained space is Euclidean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; zero vectors are at distance 1 from everything.
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &Embedding, b: &Embedding) -> f64 {
        match self {
            Metric::Euclidean => a
                .0
                .iter()
                .zip(&b.0)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
                let na = a.0.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.0.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryEntry {
    pub embedding: Embedding,
    /// Which image the embedding came from.
    pub image_ref: String,
}

/// Head-up reference embeddings grouped by individual.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReferenceLibrary {
    entries: BTreeMap<String, Vec<LibraryEntry>>,
}

impl ReferenceLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, individual_id: impl Into<String>, entry: LibraryEntry) {
        self.entries.entry(individual_id.into()).or_default().push(entry);
    }

    pub fn individuals(&self) -> impl Iterator<Item = (&str, &[LibraryEntry])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn entries_of(&self, individual_id: &str) -> Option<&[LibraryEntry]> {
        self.entries.get(individual_id).map(Vec::as_slice)
    }

    pub fn contains(&self, individual_id: &str) -> bool {
        self.entries.contains_key(individual_id)
    }

    pub fn individual_count(&self) -> usize {
        self.entries.len()
    }

    /// Total number of embeddings.
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn csv_header() -> Vec<String> {
        let mut h = vec!["individual_id".to_string(), "image_ref".to_string()];
        h.extend((0..EMBEDDING_DIM).map(|i| format!("e{i:02}")));
        h
    }

    /// `individual_id,image_ref,e00,...,e31`; floats use shortest round-trip form.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), ReidError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::csv_header())?;
        for (id, entries) in &self.entries {
            for e in entries {
                let mut row = vec![id.clone(), e.image_ref.clone()];
                row.extend(e.embedding.as_slice().iter().map(|v| v.to_string()));
                w.write_record(row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, ReidError> {
        let mut lib = ReferenceLibrary::new();
        for row in read_embedding_rows(reader)? {
            if row.individual_id.is_empty() {
                return Err(ReidError::Csv(format!("line {}: empty individual_id", row.line)));
            }
            lib.insert(
                row.individual_id,
                LibraryEntry {
                    embedding: row.embedding,
                    image_ref: row.image_ref,
                },
            );
        }
        Ok(lib)
    }
}

pub(crate) struct EmbeddingRow {
    pub line: u64,
    pub individual_id: String,
    pub image_ref: String,
    pub embedding: Embedding,
}

pub(crate) fn read_embedding_rows<R: io::Read>(reader: R) -> Result<Vec<EmbeddingRow>, ReidError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ReferenceLibrary::csv_header();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ReidError::Csv(format!("missing column {name:?}")))
    };
    let cols: Vec<usize> = expected.iter().map(|n| col(n)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut values = [0.0; EMBEDDING_DIM];
        for (d, v) in values.iter_mut().enumerate() {
            let raw = record.get(cols[d + 2]).unwrap_or("");
            *v = raw
                .parse()
                .map_err(|_| ReidError::Csv(format!("line {line}: bad component e{d:02} {raw:?}")))?;
        }
        rows.push(EmbeddingRow {
            line,
            individual_id: record.get(cols[0]).unwrap_or("").to_string(),
            image_ref: record.get(cols[1]).unwrap_or("").to_string(),
            embedding: Embedding::new(values)
                .map_err(|e| ReidError::Csv(format!("line {line}: {e}")))?,
        });
    }
    Ok(rows)
}
