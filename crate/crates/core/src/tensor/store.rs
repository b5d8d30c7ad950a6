//! Named parameter storage and the checkpoint container.
//!
//! Parameters live in one flat store so a training step can address any
//! front block of any tensor (see [`Graph::param_slice`][super::Graph]).
//! Each parameter carries its gradient and Adam moment buffers; only values
//! are persisted to checkpoints.
//!
//! Checkpoint layout: 8-byte magic `MOET0001`, a little-endian `u64` with
//! the manifest length, a JSON manifest (precision tag, string metadata,
//! tensor directory), then the raw tensor values as little-endian floats in
//! directory order. Round trips are bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Elem, Result, Tensor, TensorError, PRECISION};

const MAGIC: &[u8; 8] = b"MOET0001";
const ELEM_BYTES: usize = std::mem::size_of::<Elem>();

/// One named tensor with its training state.
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<Elem>,
    pub grad: Vec<Elem>,
    pub adam_m: Vec<Elem>,
    pub adam_v: Vec<Elem>,
}

/// Flat collection of named parameters with stable insertion order.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Registers a zero-initialized parameter. Names must be unique.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let n = rows * cols;
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            value: vec![0.0; n],
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        });
        let idx = self.params.len() - 1;
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    /// Registers a parameter initialized from a tensor.
    pub fn add_tensor(&mut self, name: &str, t: Tensor) -> usize {
        let idx = self.add(name, t.rows(), t.cols());
        self.params[idx].value.copy_from_slice(t.data());
        idx
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    /// Total number of stored values across all parameters.
    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds a front-block gradient (used by the tape's backward sweep).
    pub(crate) fn scatter_grad(&mut self, idx: usize, rows: usize, cols: usize, g: &[Elem]) {
        let p = &mut self.params[idx];
        debug_assert!(rows <= p.rows && cols <= p.cols);
        for i in 0..rows {
            let dst = i * p.cols;
            let src = i * cols;
            for j in 0..cols {
                p.grad[dst + j] += g[src + j];
            }
        }
    }

    /// Copy of the front `rows x cols` block of a parameter's values.
    pub fn read_slice(&self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        let p = self
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if rows > p.rows || cols > p.cols {
            return Err(TensorError::DimMismatch {
                op: "read_slice",
                a_rows: rows,
                a_cols: cols,
                b_rows: p.rows,
                b_cols: p.cols,
            });
        }
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(i, j, p.value[i * p.cols + j]);
            }
        }
        Ok(out)
    }

    /// Writes a tensor into the front block of a parameter's values.
    pub fn write_slice(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let p = &mut self.params[idx];
        if t.rows() > p.rows || t.cols() > p.cols {
            return Err(TensorError::DimMismatch {
                op: "write_slice",
                a_rows: t.rows(),
                a_cols: t.cols(),
                b_rows: p.rows,
                b_cols: p.cols,
            });
        }
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                p.value[i * p.cols + j] = t.at(i, j);
            }
        }
        Ok(())
    }

    /// Clears every gradient buffer.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = 0.0;
            }
        }
    }

    /// Copies checkpoint values into same-named parameters. Every tensor in
    /// the checkpoint must exist here with the same shape.
    pub fn load_values(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, t) in &ckpt.tensors {
            let idx = self
                .index_of(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            let p = &mut self.params[idx];
            if t.shape() != (p.rows, p.cols) {
                return Err(TensorError::DimMismatch {
                    op: "load_values",
                    a_rows: t.rows(),
                    a_cols: t.cols(),
                    b_rows: p.rows,
                    b_cols: p.cols,
                });
            }
            p.value.copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the data section, in elements.
    offset: usize,
    /// Element count (`rows * cols`).
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    precision: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<ManifestTensor>,
}

/// A loaded checkpoint: metadata plus named tensors in file order.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Writes parameter values (not gradients or optimizer state) plus string
/// metadata to `path`.
pub fn save_checkpoint(
    store: &ParamStore,
    meta: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.iter() {
        let len = p.value.len();
        tensors.push(ManifestTensor {
            name: p.name.clone(),
            rows: p.rows,
            cols: p.cols,
            offset,
            len,
        });
        offset += len;
    }
    let manifest = Manifest {
        precision: PRECISION.to_string(),
        meta: meta.clone(),
        tensors,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| TensorError::Format(e.to_string()))?;

    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    let mut buf = Vec::with_capacity(64 * ELEM_BYTES);
    for p in store.iter() {
        buf.clear();
        for &v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn elem_from_le(bytes: &[u8]) -> Elem {
    #[cfg(not(feature = "f32"))]
    {
        f64::from_le_bytes(bytes.try_into().expect("8-byte element"))
    }
    #[cfg(feature = "f32")]
    {
        f32::from_le_bytes(bytes.try_into().expect("4-byte element"))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`]. The file's precision
/// tag must match this build.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| TensorError::Format(format!("bad checkpoint manifest: {e}")))?;
    if manifest.precision != PRECISION {
        return Err(TensorError::Format(format!(
            "checkpoint precision {} does not match build precision {}",
            manifest.precision, PRECISION
        )));
    }

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() % ELEM_BYTES != 0 {
        return Err(TensorError::Format(format!(
            "checkpoint data section is {} bytes, not a multiple of {}",
            data.len(),
            ELEM_BYTES
        )));
    }
    let total_elems = data.len() / ELEM_BYTES;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for mt in &manifest.tensors {
        if mt.len != mt.rows * mt.cols {
            return Err(TensorError::Format(format!(
                "tensor {} declares len {} but shape {}x{}",
                mt.name, mt.len, mt.rows, mt.cols
            )));
        }
        let end = mt.offset.checked_add(mt.len).filter(|&e| e <= total_elems);
        let Some(_) = end else {
            return Err(TensorError::Format(format!(
                "tensor {} spans past end of data section",
                mt.name
            )));
        };
        let mut values = Vec::with_capacity(mt.len);
        for i in 0..mt.len {
            let at = (mt.offset + i) * ELEM_BYTES;
            values.push(elem_from_le(&data[at..at + ELEM_BYTES]));
        }
        tensors.push((mt.name.clone(), Tensor::from_flat(mt.rows, mt.cols, values)));
    }
    Ok(Checkpoint { meta: manifest.meta, tensors })
}
