//! Named parameter tensors, initialization and the checkpoint container.
//!
//! Checkpoint layout (version 1, little-endian):
//!
//! ```text
//! magic   4 bytes  b"ARNN"
//! version u32
//! hlen    u64      length of the JSON header in bytes
//! header  JSON     {"dtype","meta",[{"name","rows","cols"}, ...]}
//! data    f32 x N  parameter payloads in header order
//! ```
//!
//! Round-trips are bit-exact for f32 stores.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ARNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// Ordered collection of named trainable tensors. Iteration order is
/// insertion order, which keeps training and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    /// Free-form metadata carried inside checkpoints (e.g. the network
    /// configuration the parameters were trained with).
    pub meta: BTreeMap<String, String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ParamEntry<T> {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry<T> {
        &mut self.entries[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, data: Vec<T>) -> usize {
        assert_eq!(data.len(), rows * cols, "param {name}: bad data length");
        assert!(
            !self.index.contains_key(name),
            "param {name} registered twice"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
        let idx = self.entries.len() - 1;
        self.index.insert(name.to_string(), idx);
        idx
    }

    /// Kaiming-style uniform init: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn add_kaiming<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, rows, cols, data)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.add(name, rows, cols, vec![T::ZERO; rows * cols])
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> usize {
        self.add(name, rows, cols, vec![T::from_f64(value); rows * cols])
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Zeroed gradient buffers matching every entry.
    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.entries.iter().map(|e| vec![T::ZERO; e.data.len()]).collect()
    }

    pub fn convert<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        out.meta = self.meta.clone();
        for e in &self.entries {
            out.add(
                &e.name,
                e.rows,
                e.cols,
                e.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            );
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: BTreeMap<String, String>,
    params: Vec<HeaderEntry>,
}

impl ParamStore<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            dtype: "f32".to_string(),
            meta: self.meta.clone(),
            params: self
                .entries
                .iter()
                .map(|e| HeaderEntry {
                    name: e.name.clone(),
                    rows: e.rows,
                    cols: e.cols,
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for e in &self.entries {
            for &x in &e.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore<f32>> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {:?}",
                path.display(),
                magic
            )));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let hlen = u64::from_le_bytes(buf8) as usize;
        let mut header_bytes = vec![0u8; hlen];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported dtype {}",
                path.display(),
                header.dtype
            )));
        }
        let mut store = ParamStore::new();
        store.meta = header.meta;
        for he in header.params {
            let mut data = vec![0f32; he.rows * he.cols];
            for x in data.iter_mut() {
                r.read_exact(&mut buf4)?;
                *x = f32::from_le_bytes(buf4);
            }
            store.add(&he.name, he.rows, he.cols, data);
        }
        Ok(store)
    }
}
