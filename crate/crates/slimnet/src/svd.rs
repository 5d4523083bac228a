//! Singular value decomposition and rank-b truncation.
//!
//! The decomposition is a one-sided Jacobi SVD computed entirely in `f64`
//! with a fixed sweep order, so results are bit-identical across runs and
//! thread counts. For the small weight matrices this crate works on
//! (hundreds of rows/columns at most) Jacobi is plenty fast and has
//! excellent relative accuracy.

use crate::error::{Error, Result};
use crate::tensor::MatrixView;

/// Rotation threshold: a column pair (p, q) is considered orthogonal when
/// |b_p . b_q| <= EPS * ||b_p|| * ||b_q||.
const JACOBI_EPS: f64 = 1e-15;
const MAX_SWEEPS: usize = 100;

/// Row-major `f64` matrix used for SVD factors and test arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Plain O(n^3) matrix product; sizes here are small.
    pub fn mul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "dim mismatch in matrix product");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.get(k, j);
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Full thin SVD `M = U * diag(sigma) * Vt` with `s = min(rows, cols)`
/// columns in `u` and rows in `vt`.
///
/// Guarantees:
/// - `sigma` is non-negative and sorted descending;
/// - columns of `u` and rows of `vt` are orthonormal, including for
///   rank-deficient input (null directions are filled with a deterministic
///   orthonormal basis);
/// - the first nonzero entry of every `u` column is non-negative, which
///   pins the sign so repeated runs are bit-identical.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub rows: usize,
    pub cols: usize,
    /// `rows x s`.
    pub u: Mat,
    /// Length `s`.
    pub sigma: Vec<f64>,
    /// `s x cols`.
    pub vt: Mat,
}

impl SvdResult {
    pub fn rank_count(&self) -> usize {
        self.sigma.len()
    }

    /// True when the input was (exactly) the zero matrix.
    pub fn is_rank_zero(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    /// Reconstructs `U * diag(sigma) * Vt` (test/diagnostic helper).
    pub fn reconstruct(&self) -> Mat {
        let s = self.sigma.len();
        let mut scaled = self.u.clone();
        for j in 0..s {
            for i in 0..self.rows {
                scaled.data[i * s + j] *= self.sigma[j];
            }
        }
        scaled.mul(&self.vt)
    }
}

/// Decomposes a flattened weight matrix. Fails with a numeric error if any
/// entry is not finite.
pub fn svd(m: &MatrixView) -> Result<SvdResult> {
    let data: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
    svd_f64(m.rows, m.cols, &data)
}

/// Core `f64` SVD. `a` is row-major `rows x cols`.
pub fn svd_f64(rows: usize, cols: usize, a: &[f64]) -> Result<SvdResult> {
    if rows == 0 || cols == 0 || a.len() != rows * cols {
        return Err(Error::InvalidArgument(format!(
            "matrix dims {rows}x{cols} do not match data length {}",
            a.len()
        )));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric {
            rows,
            cols,
            msg: "matrix contains non-finite values".into(),
        });
    }

    // One-sided Jacobi needs rows >= cols; for wide input decompose the
    // transpose and swap the roles of U and V.
    let tall = rows >= cols;
    let (m, n) = if tall { (rows, cols) } else { (cols, rows) };
    let mut b: Vec<Vec<f64>> = vec![vec![0.0; m]; n];
    for r in 0..rows {
        for c in 0..cols {
            let v = a[r * cols + c];
            if tall {
                b[c][r] = v;
            } else {
                b[r][c] = v;
            }
        }
    }
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col = vec![0.0; n];
            col[j] = 1.0;
            col
        })
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += b[p][i] * b[p][i];
                    beta += b[q][i] * b[q][i];
                    gamma += b[p][i] * b[q][i];
                }
                if gamma == 0.0 || gamma.abs() <= JACOBI_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[p][i];
                    let bq = b[q][i];
                    b[p][i] = c * bp - s * bq;
                    b[q][i] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values are the column norms of the rotated matrix.
    let mut sigma: Vec<f64> = b.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap().then(i.cmp(&j)));
    let b: Vec<Vec<f64>> = order.iter().map(|&i| std::mem::take(&mut b[i])).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&i| std::mem::take(&mut v[i])).collect();
    sigma = order.iter().map(|&i| sigma[i]).collect();

    // Left vectors: normalized rotated columns; exact-zero columns are
    // completed to an orthonormal set afterwards.
    let left: Vec<Vec<f64>> = b
        .iter()
        .zip(&sigma)
        .map(|(col, &s)| {
            if s > 0.0 {
                col.iter().map(|&x| x / s).collect()
            } else {
                vec![0.0; m]
            }
        })
        .collect();

    // Reassemble in the original orientation. s = n = min(rows, cols).
    // Tall: U columns come from `left`, Vt rows from `v`.
    // Wide: A = (At)t = (U' S V't)t = V' S U't, so U columns come from `v`
    // and Vt rows from `left`.
    let (mut u_cols, mut vt_rows) = if tall { (left, v) } else { (v, left) };
    complete_zero_vectors(&mut u_cols);
    complete_zero_vectors(&mut vt_rows);

    // Sign convention: first nonzero entry of each U column non-negative.
    for j in 0..n {
        let lead = u_cols[j].iter().find(|&&x| x != 0.0).copied().unwrap_or(0.0);
        if lead < 0.0 {
            u_cols[j].iter_mut().for_each(|x| *x = -*x);
            vt_rows[j].iter_mut().for_each(|x| *x = -*x);
        }
    }

    let mut u = Mat::zeros(rows, n);
    for j in 0..n {
        for i in 0..rows {
            u.data[i * n + j] = u_cols[j][i];
        }
    }
    let vt = Mat::from_rows(vt_rows);
    debug_assert_eq!(vt.cols, cols);
    Ok(SvdResult { rows, cols, u, sigma, vt })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Replaces all-zero vectors in `vecs` with unit vectors orthonormal to the
/// rest. Deterministic: each replacement starts from the standard basis
/// vector with the largest residual after projecting out the existing set
/// (smallest index wins ties), re-orthogonalized twice for stability.
fn complete_zero_vectors(vecs: &mut [Vec<f64>]) {
    let dim = match vecs.first() {
        Some(v) => v.len(),
        None => return,
    };
    let zero_idx: Vec<usize> =
        (0..vecs.len()).filter(|&j| vecs[j].iter().all(|&x| x == 0.0)).collect();
    for &j in &zero_idx {
        let mut best_k = 0;
        let mut best_norm = -1.0;
        for k in 0..dim {
            // Residual norm^2 of e_k against current non-zero vectors.
            let mut norm2 = 1.0;
            for (jj, other) in vecs.iter().enumerate() {
                if jj == j || other.iter().all(|&x| x == 0.0) {
                    continue;
                }
                norm2 -= other[k] * other[k];
            }
            if norm2 > best_norm + 1e-12 {
                best_norm = norm2;
                best_k = k;
            }
        }
        let mut cand = vec![0.0; dim];
        cand[best_k] = 1.0;
        for _ in 0..2 {
            for (jj, other) in vecs.iter().enumerate() {
                if jj == j || other.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let proj = dot(&cand, other);
                for i in 0..dim {
                    cand[i] -= proj * other[i];
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            assert!(norm > 0.0, "orthonormal completion failed");
            cand.iter_mut().for_each(|x| *x /= norm);
        }
        vecs[j] = cand;
    }
}

/// Rank-`b` truncation: returns `(left, right)` with `left = U_b * S_b`
/// (`rows x b`) and `right = Vt_b` (`b x cols`), so `left * right` is the
/// best rank-`b` approximation in Frobenius norm. `b` must be in
/// `1..=min(rows, cols)`.
pub fn truncate(r: &SvdResult, b: usize) -> Result<(Mat, Mat)> {
    let s = r.rank_count();
    if b == 0 || b > s {
        return Err(Error::InvalidArgument(format!(
            "truncation rank {b} out of range 1..={s}"
        )));
    }
    let mut left = Mat::zeros(r.rows, b);
    for i in 0..r.rows {
        for j in 0..b {
            left.data[i * b + j] = r.u.get(i, j) * r.sigma[j];
        }
    }
    let mut right = Mat::zeros(b, r.cols);
    for j in 0..b {
        for c in 0..r.cols {
            right.data[j * r.cols + c] = r.vt.get(j, c);
        }
    }
    Ok((left, right))
}

/// Fraction of total squared-singular-value mass captured by the top `b`
/// values: `sum(sigma[..b]^2) / sum(sigma^2)`, clamped to 1.0. The zero
/// matrix has no mass to lose, so the fraction is 1 by convention.
pub fn explained_variation(r: &SvdResult, b: usize) -> Result<f64> {
    let s = r.rank_count();
    if b == 0 || b > s {
        return Err(Error::InvalidArgument(format!(
            "explained-variation rank {b} out of range 1..={s}"
        )));
    }
    let total: f64 = r.sigma.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let head: f64 = r.sigma[..b].iter().map(|x| x * x).sum();
    Ok((head / total).min(1.0))
}
