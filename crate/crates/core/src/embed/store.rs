//! File-backed embedding store.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! "EMBD" | version u16 | D u32 | count u64
//! per record: modality u8 | id (u32 length + UTF-8) | class label (u32 length + UTF-8) | D x f32
//! ```
//!
//! Vectors are rounded to f32 on insertion, so what is held in memory is
//! exactly what the file stores and save/load round-trips bit for bit.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::Modality;
use crate::error::{Error, Result};
use crate::reward::EmbeddingVector;

const MAGIC: &[u8; 4] = b"EMBD";
pub const STORE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub class_label: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: BTreeMap<(Modality, String), StoreRecord>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(
        &mut self,
        modality: Modality,
        id: impl Into<String>,
        class_label: impl Into<String>,
        vector: &EmbeddingVector,
    ) -> Result<()> {
        if vector.dim() != self.dim {
            return Err(Error::shape(self.dim, vector.dim()));
        }
        let id = id.into();
        let key = (modality, id);
        if self.records.contains_key(&key) {
            return Err(Error::invalid(format!("duplicate {} id {:?}", key.0, key.1)));
        }
        let quantized = vector.values().iter().map(|&v| v as f32 as f64).collect();
        self.records.insert(
            key,
            StoreRecord {
                class_label: class_label.into(),
                vector: EmbeddingVector::new(quantized)?,
            },
        );
        Ok(())
    }

    pub fn get(&self, modality: Modality, id: &str) -> Option<&StoreRecord> {
        self.records.get(&(modality, id.to_string()))
    }

    pub fn require(&self, modality: Modality, id: &str) -> Result<&StoreRecord> {
        self.get(modality, id)
            .ok_or_else(|| Error::invalid(format!("store has no {modality} entry {id:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Modality, &str, &StoreRecord)> {
        self.records.iter().map(|((m, id), r)| (*m, id.as_str(), r))
    }

    pub fn of_modality(&self, modality: Modality) -> impl Iterator<Item = (&str, &StoreRecord)> {
        self.iter().filter(move |(m, _, _)| *m == modality).map(|(_, id, r)| (id, r))
    }

    /// Records for which `keep(modality, id)` holds.
    pub fn subset(&self, keep: impl Fn(Modality, &str) -> bool) -> EmbeddingStore {
        EmbeddingStore {
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|((m, id), _)| keep(*m, id))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Distinct class labels, sorted.
    pub fn class_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.records.values().map(|r| r.class_label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for ((m, id), r) in &self.records {
            out.push(m.code());
            put_str(&mut out, id);
            put_str(&mut out, &r.class_label);
            for &v in r.vector.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        if take(&mut r, 4)? != MAGIC {
            return Err(Error::Format("not an embedding store (bad magic)".into()));
        }
        let version = u16::from_le_bytes(take(&mut r, 2)?.try_into().expect("2 bytes"));
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported store version {version}")));
        }
        let dim = u32::from_le_bytes(take(&mut r, 4)?.try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(take(&mut r, 8)?.try_into().expect("8 bytes"));
        let mut store = Self::new(dim);
        for _ in 0..count {
            let m = Modality::from_code(take(&mut r, 1)?[0])?;
            let id = get_str(&mut r)?;
            let label = get_str(&mut r)?;
            let raw = take(&mut r, 4 * dim)
                .map_err(|_| Error::Format(format!("record {m}/{id:?} is shorter than dimension {dim}")))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            store.insert(m, id, label, &EmbeddingVector::new(values)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} bytes after the last record; dimension conflict or corrupt file",
                r.len()
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("unexpected end of embedding store".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let len = u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")) as usize;
    String::from_utf8(take(r, len)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
}

/// One line of the plain-text manifest: `modality<TAB>id<TAB>class<TAB>source`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub modality: Modality,
    pub id: String,
    pub class_label: String,
    pub source: String,
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        for field in [&r.id, &r.class_label, &r.source] {
            if field.contains(['\t', '\n']) {
                return Err(Error::invalid(format!("manifest field {field:?} contains a tab or newline")));
            }
        }
        writeln!(f, "{}\t{}\t{}\t{}", r.modality, r.id, r.class_label, r.source)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [m, id, class, source] = fields[..] else {
            return Err(Error::Format(format!("manifest line {}: expected 4 tab-separated fields", n + 1)));
        };
        out.push(ManifestRecord {
            modality: m.parse()?,
            id: id.to_string(),
            class_label: class.to_string(),
            source: source.to_string(),
        });
    }
    Ok(out)
}
