//! Minimal dense-tensor kernel with reverse-mode automatic differentiation.
//!
//! Everything is a row-major 2-D matrix of [`Elem`] (a scalar is `1x1`, a
//! row vector `1xn`). A [`Graph`] records operations eagerly and replays
//! them in reverse for gradients; persistent weights live in a [`ParamStore`]
//! and enter a graph as front slices of their storage, so gradient write-back
//! is structural. Precision is a build-time configuration: `f64` by default
//! (oracle grade), `f32` behind the `f32` feature — never mixed in one build.
//!
//! All computation is sequential; results are bit-identical across runs for
//! identical inputs.

mod graph;
mod store;

pub use graph::{Graph, NodeId};
pub use store::{load_checkpoint, save_checkpoint, Checkpoint, Param, ParamStore};

/// Scalar element type for all tensor math in this build.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;
#[cfg(feature = "f32")]
pub type Elem = f32;

/// Name of the active precision, recorded in checkpoint manifests.
#[cfg(not(feature = "f32"))]
pub const PRECISION: &str = "f64";
#[cfg(feature = "f32")]
pub const PRECISION: &str = "f32";

/// Epsilon inside layer normalization's variance square root.
pub const LAYERNORM_EPS: Elem = 1e-5;

/// Additive pre-softmax mask value for disallowed attention positions.
pub const MASK_NEG: Elem = -1e9;

#[derive(thiserror::Error, Debug)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between [{a_rows}x{a_cols}] and [{b_rows}x{b_cols}]")]
    DimMismatch {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: expected a scalar, got [{rows}x{cols}]")]
    NotScalar {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major 2-D matrix of [`Elem`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<Elem>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: Elem) -> Tensor {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    /// Builds from a flat row-major buffer; `data.len()` must be
    /// `rows * cols`.
    pub fn from_flat(rows: usize, cols: usize, data: Vec<Elem>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "flat buffer length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<Elem>]) -> Tensor {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Elem) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Tensor {
        Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, i: usize, j: usize) -> Elem {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Elem) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Elem] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[Elem] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Elem {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Elem::max)
    }

    /// True when every element is bitwise equal.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
