//! Dense rank-4 tensors and the weight-matrix flattening schemes used by
//! the factorization passes.
//!
//! All tensors are stored row-major as `(d0, d1, d2, d3)`; for a
//! convolution weight that is `(c_o, c_i/g, k_h, k_w)`. Tensors of lower
//! logical rank (e.g. a bias vector) keep trailing dims of 1 and remember
//! their original rank in `ndim` so serialization round-trips exactly.

use crate::error::{Error, Result};

/// Dense rank-4 tensor of `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: (usize, usize, usize, usize),
    /// Logical rank as stored on disk (1..=4). Dims beyond `ndim` are 1.
    ndim: u8,
    data: Vec<f32>,
}

impl Tensor4 {
    /// Builds a rank-4 tensor. `data.len()` must equal the product of dims
    /// and every dim must be nonzero.
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        Self::with_ndim(dims, 4, data)
    }

    /// Builds a tensor with an explicit logical rank; dims past `ndim`
    /// must be 1.
    pub fn with_ndim(
        dims: (usize, usize, usize, usize),
        ndim: u8,
        data: Vec<f32>,
    ) -> Result<Self> {
        let (d0, d1, d2, d3) = dims;
        if d0 == 0 || d1 == 0 || d2 == 0 || d3 == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be nonzero, got {dims:?}"
            )));
        }
        if !(1..=4).contains(&ndim) {
            return Err(Error::InvalidArgument(format!("ndim must be 1..=4, got {ndim}")));
        }
        let trailing = [d0, d1, d2, d3];
        if trailing.iter().skip(ndim as usize).any(|&d| d != 1) {
            return Err(Error::InvalidArgument(format!(
                "dims past ndim={ndim} must be 1, got {dims:?}"
            )));
        }
        let len = d0 * d1 * d2 * d3;
        if data.len() != len {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dims {dims:?} (expected {len})",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, ndim, data })
    }

    /// Rank-1 tensor (bias / per-channel vector), dims `(n, 1, 1, 1)`.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::with_ndim((n, 1, 1, 1), 1, data)
    }

    /// All-zero tensor of the given dims.
    pub fn zeros(dims: (usize, usize, usize, usize)) -> Result<Self> {
        let len = dims.0 * dims.1 * dims.2 * dims.3;
        Self::new(dims, vec![0.0; len])
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn ndim(&self) -> u8 {
        self.ndim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> usize {
        debug_assert!(i0 < self.dims.0 && i1 < self.dims.1 && i2 < self.dims.2 && i3 < self.dims.3);
        ((i0 * self.dims.1 + i1) * self.dims.2 + i2) * self.dims.3 + i3
    }

    #[inline]
    pub fn get(&self, i0: usize, i1: usize, i2: usize, i3: usize) -> f32 {
        self.data[self.index(i0, i1, i2, i3)]
    }

    #[inline]
    pub fn set(&mut self, i0: usize, i1: usize, i2: usize, i3: usize, v: f32) {
        let idx = self.index(i0, i1, i2, i3);
        self.data[idx] = v;
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies out slice `i` along dim 1 as a `(d0, 1, d2, d3)` tensor.
    pub fn channel_slice(&self, i: usize) -> Result<Tensor4> {
        let (d0, d1, d2, d3) = self.dims;
        if i >= d1 {
            return Err(Error::InvalidArgument(format!(
                "channel slice {i} out of range for dim1={d1}"
            )));
        }
        let mut data = Vec::with_capacity(d0 * d2 * d3);
        for a in 0..d0 {
            for y in 0..d2 {
                for x in 0..d3 {
                    data.push(self.get(a, i, y, x));
                }
            }
        }
        Tensor4::new((d0, 1, d2, d3), data)
    }
}

/// How a rank-4 weight tensor is reshaped into a 2-D matrix before SVD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlattenScheme {
    /// `(c_o) x (c_i * k_h * k_w)`: one row per output filter.
    FilterWise,
    /// `(c_o * k_h * k_w) x (c_i)`: one column per input channel.
    ProjectionFirst,
    /// `(c_o * k_h) x (c_i * k_w)`: vertical paired with rows, horizontal
    /// with columns, so rank-b truncation splits the kernel into a
    /// `1 x k_w` stage followed by a `k_h x 1` stage.
    Separable,
    /// `(c_o) x (k_h * k_w)` for a single input-channel slice `i`.
    PerChannelSlice(usize),
}

impl FlattenScheme {
    pub fn label(&self) -> &'static str {
        match self {
            FlattenScheme::FilterWise => "filter_wise",
            FlattenScheme::ProjectionFirst => "projection_first",
            FlattenScheme::Separable => "separable",
            FlattenScheme::PerChannelSlice(_) => "per_channel",
        }
    }
}

/// A 2-D, row-major view produced by [`flatten`], tagged with enough
/// provenance to invert the reshape.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixView {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub scheme: FlattenScheme,
    /// Dims of the tensor the view was taken from.
    pub source_dims: (usize, usize, usize, usize),
}

impl MatrixView {
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }
}

/// Reshapes a weight tensor `(d0, d1, d2, d3)` into the 2-D matrix for the
/// given scheme. `rows * cols` always equals the number of elements the
/// scheme covers (the whole tensor, or one dim-1 slice for
/// `PerChannelSlice`).
pub fn flatten(w: &Tensor4, scheme: FlattenScheme) -> Result<MatrixView> {
    let (d0, d1, d2, d3) = w.dims();
    let (rows, cols, data) = match scheme {
        FlattenScheme::FilterWise => {
            // M[o, i*k_h*k_w + y*k_w + x] = W[o, i, y, x]: same layout as
            // the row-major tensor, so the data is copied as-is.
            (d0, d1 * d2 * d3, w.as_slice().to_vec())
        }
        FlattenScheme::ProjectionFirst => {
            let rows = d0 * d2 * d3;
            let mut data = vec![0.0; rows * d1];
            for o in 0..d0 {
                for i in 0..d1 {
                    for y in 0..d2 {
                        for x in 0..d3 {
                            let r = (o * d2 + y) * d3 + x;
                            data[r * d1 + i] = w.get(o, i, y, x);
                        }
                    }
                }
            }
            (rows, d1, data)
        }
        FlattenScheme::Separable => {
            let rows = d0 * d2;
            let cols = d1 * d3;
            let mut data = vec![0.0; rows * cols];
            for o in 0..d0 {
                for i in 0..d1 {
                    for y in 0..d2 {
                        for x in 0..d3 {
                            data[(o * d2 + y) * cols + i * d3 + x] = w.get(o, i, y, x);
                        }
                    }
                }
            }
            (rows, cols, data)
        }
        FlattenScheme::PerChannelSlice(i) => {
            if i >= d1 {
                return Err(Error::InvalidArgument(format!(
                    "per-channel slice {i} out of range for c_i={d1}"
                )));
            }
            let cols = d2 * d3;
            let mut data = vec![0.0; d0 * cols];
            for o in 0..d0 {
                for y in 0..d2 {
                    for x in 0..d3 {
                        data[o * cols + y * d3 + x] = w.get(o, i, y, x);
                    }
                }
            }
            (d0, cols, data)
        }
    };
    Ok(MatrixView { rows, cols, data, scheme, source_dims: w.dims() })
}

/// Inverts [`flatten`]. For `PerChannelSlice(i)` the result is the covered
/// `(d0, 1, d2, d3)` slice, since the rest of the source tensor is not
/// present in the view.
pub fn unflatten(m: &MatrixView) -> Result<Tensor4> {
    let (d0, d1, d2, d3) = m.source_dims;
    let check = |rows, cols| -> Result<()> {
        if m.rows != rows || m.cols != cols {
            return Err(Error::InvalidArgument(format!(
                "matrix {}x{} does not match scheme {:?} of source dims {:?}",
                m.rows, m.cols, m.scheme, m.source_dims
            )));
        }
        if m.data.len() != m.rows * m.cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} != rows*cols {}",
                m.data.len(),
                m.rows * m.cols
            )));
        }
        Ok(())
    };
    match m.scheme {
        FlattenScheme::FilterWise => {
            check(d0, d1 * d2 * d3)?;
            Tensor4::new((d0, d1, d2, d3), m.data.clone())
        }
        FlattenScheme::ProjectionFirst => {
            check(d0 * d2 * d3, d1)?;
            let mut t = Tensor4::zeros((d0, d1, d2, d3))?;
            for o in 0..d0 {
                for i in 0..d1 {
                    for y in 0..d2 {
                        for x in 0..d3 {
                            let r = (o * d2 + y) * d3 + x;
                            t.set(o, i, y, x, m.data[r * d1 + i]);
                        }
                    }
                }
            }
            Ok(t)
        }
        FlattenScheme::Separable => {
            check(d0 * d2, d1 * d3)?;
            let mut t = Tensor4::zeros((d0, d1, d2, d3))?;
            for o in 0..d0 {
                for i in 0..d1 {
                    for y in 0..d2 {
                        for x in 0..d3 {
                            t.set(o, i, y, x, m.data[(o * d2 + y) * (d1 * d3) + i * d3 + x]);
                        }
                    }
                }
            }
            Ok(t)
        }
        FlattenScheme::PerChannelSlice(i) => {
            if i >= d1 {
                return Err(Error::InvalidArgument(format!(
                    "per-channel slice {i} out of range for c_i={d1}"
                )));
            }
            check(d0, d2 * d3)?;
            Tensor4::new((d0, 1, d2, d3), m.data.clone())
        }
    }
}
