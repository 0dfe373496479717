//! Minimal dense numeric kernels shared by every other module.
//!
//! Everything here is plain `f64` arithmetic over row-major storage. The
//! operations are pure functions with no global state, so they are safe to
//! call concurrently from any number of threads. Reductions run sequentially
//! in a fixed order, which keeps results bit-identical across runs.

use thiserror::Error;

/// Row norms below this threshold are treated as zero and rejected.
pub const ZERO_ROW_THRESHOLD: f64 = 1e-12;

/// Errors produced by the numeric kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    /// A row that must be normalized has (near-)zero Euclidean norm.
    #[error("row {row} has near-zero norm and cannot be normalized")]
    ZeroRow { row: usize },
    /// Two operands disagree on a dimension that must match.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A feature map with no elements was passed to a statistics routine.
    #[error("feature map has no elements")]
    EmptyMap,
    /// A non-finite value was found where finite data is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
}

/// Dense row-major matrix of 64-bit floats.
///
/// Invariants: `data.len() == rows * cols`, and all entries are finite for
/// matrices built through the checked constructors.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Matrix of the given shape filled with zeros.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::DimMismatch {
                context: "matrix data length",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite {
                context: "matrix data",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(NumError::DimMismatch {
                    context: "row length",
                    expected: n_cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(n_rows, n_cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major view of the underlying storage.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    /// Borrow one row as a slice.
    pub fn row(&self, row: usize) -> &[f64] {
        debug_assert!(row < self.rows);
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        debug_assert!(row < self.rows);
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Dense matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.cols != other.rows {
            return Err(NumError::DimMismatch {
                context: "matmul inner dimension",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b_kj;
                }
            }
        }
        Ok(out)
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (row, col): (usize, usize)) -> &f64 {
        &self.data[row * self.cols + col]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut f64 {
        let idx = row * self.cols + col;
        &mut self.data[idx]
    }
}

/// Channel-major feature map over a `C x H x W` grid.
///
/// Storage is `data[c * h * w + y * w + x]`; per-channel planes are
/// contiguous. The map must contain at least one element per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Builds a feature map from channel-major data.
    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, NumError> {
        let expected = channels * height * width;
        if expected == 0 {
            return Err(NumError::EmptyMap);
        }
        if data.len() != expected {
            return Err(NumError::DimMismatch {
                context: "feature map data length",
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumError::NonFinite {
                context: "feature map data",
            });
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of spatial positions per channel.
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Borrow the spatial plane of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        debug_assert!(c < self.channels);
        let plane = self.plane_len();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        debug_assert!(c < self.channels);
        let plane = self.plane_len();
        &mut self.data[c * plane..(c + 1) * plane]
    }
}

/// Euclidean norm of a slice.
pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product of two equal-length slices.
pub fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales every row of `m` to unit Euclidean norm.
///
/// Direction is preserved; only the length changes. Fails with
/// [`NumError::ZeroRow`] if any row norm falls below [`ZERO_ROW_THRESHOLD`].
pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix, NumError> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = vec_norm(m.row(i));
        if norm < ZERO_ROW_THRESHOLD {
            return Err(NumError::ZeroRow { row: i });
        }
        for v in out.row_mut(i) {
            *v /= norm;
        }
    }
    Ok(out)
}

/// All pairwise cosine similarities between the rows of `a` and the rows of
/// `b`.
///
/// Entry `(i, j)` is `dot(a_i, b_j) / (|a_i| * |b_j|)`. Both inputs must
/// share the feature dimension and contain no zero rows.
pub fn cosine_similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix, NumError> {
    if a.cols() != b.cols() {
        return Err(NumError::DimMismatch {
            context: "cosine similarity feature dimension",
            expected: a.cols(),
            got: b.cols(),
        });
    }
    let an = l2_normalize_rows(a)?;
    let bn = l2_normalize_rows(b)?;
    an.matmul(&bn.transpose())
}

/// Numerically stable `log(1 + exp(x))`.
///
/// For large positive `x` the naive form overflows, so the identity
/// `log(1 + exp(x)) = x + log(1 + exp(-x))` is used beyond `x > 30`.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-channel mean and standard deviation of a feature map.
///
/// The mean is the population mean over the `H x W` plane, and the returned
/// deviation is `sqrt(population_variance + eps)` so that constant channels
/// stay invertible for `eps > 0`.
pub fn channel_stats(f: &FeatureMap, eps: f64) -> Result<(Vec<f64>, Vec<f64>), NumError> {
    let plane = f.plane_len();
    if plane == 0 || f.channels() == 0 {
        return Err(NumError::EmptyMap);
    }
    let mut means = Vec::with_capacity(f.channels());
    let mut stds = Vec::with_capacity(f.channels());
    for c in 0..f.channels() {
        let plane_data = f.channel(c);
        let mean = plane_data.iter().sum::<f64>() / plane as f64;
        let var = plane_data
            .iter()
            .map(|v| {
                let d = v - mean;
                d * d
            })
            .sum::<f64>()
            / plane as f64;
        means.push(mean);
        stds.push((var + eps).sqrt());
    }
    Ok((means, stds))
}
