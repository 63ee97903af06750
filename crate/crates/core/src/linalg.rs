//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{AsrError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn spectral_radius(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn mat_pow(m: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Solves `X = Aᵀ X A + Q` by the vectorized linear system
/// `(I − Aᵀ ⊗ Aᵀ) vec X = vec Q`.
pub fn solve_discrete_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(AsrError::NonStationary {
            spectral_radius: rho,
        });
    }
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let lhs = Mat::identity(n * n, n * n) - kron;
    let rhs = Vector::from_column_slice(q.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| AsrError::Singular("Lyapunov system".into()))?;
    Ok(symmetrize(&Mat::from_column_slice(n, n, sol.as_slice())))
}

/// Moore–Penrose pseudoinverse keeping at most `rank` singular values
/// (all above `rtol · σ_max` when `rank` is `None`).
///
/// Singular triplets come from the symmetric eigenproblem of
/// `[[0, M], [Mᵀ, 0]]`, whose eigenpairs are `±σ_i` with vectors
/// `(u_i, v_i)/√2`.
pub fn pinv(m: &Mat, rank: Option<usize>, rtol: f64) -> Mat {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Mat::zeros(c, r);
    }
    let n = r + c;
    let mut aug = Mat::zeros(n, n);
    aug.view_mut((0, r), (r, c)).copy_from(m);
    aug.view_mut((r, 0), (c, r)).copy_from(&m.transpose());
    let (vals, vecs) = sym_eigen_desc(&aug);
    let smax = vals[0].max(0.0);
    let keep = rank.unwrap_or(usize::MAX).min(r.min(c));
    let mut out = Mat::zeros(c, r);
    for (i, &s) in vals.iter().enumerate().take(keep) {
        if s <= rtol * smax || s <= 0.0 {
            break;
        }
        let w = vecs.column(i);
        out += w.rows(r, c) * w.rows(0, r).transpose() * (2.0 / s);
    }
    out
}

/// Singular values in descending order.
pub fn singular_values_desc(m: &Mat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Log-determinant of a symmetric positive definite matrix.
pub fn log_det_spd(m: &Mat) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| AsrError::Singular("log-determinant (matrix not positive definite)".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn inv_spd(m: &Mat) -> Result<Mat> {
    if m.nrows() == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| AsrError::Singular("inverse (matrix not positive definite)".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted
/// descending; columns of the returned matrix are the eigenvectors.
pub fn sym_eigen_desc(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Mat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vecs)
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    sym_eigen_desc(m).0.last().copied().unwrap_or(0.0)
}

/// Block-diagonal matrix from a list of square blocks.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}

/// Principal submatrix on the given index set.
pub fn select(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn select_vec(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn frobenius(m: &Mat) -> f64 {
    m.norm()
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// KL(N(mu_q, cov_q) || N(mu_p, cov_p)).
pub fn gaussian_kl(mu_q: &Vector, cov_q: &Mat, mu_p: &Vector, cov_p: &Mat) -> Result<f64> {
    let d = mu_q.len();
    if d == 0 {
        return Ok(0.0);
    }
    let p_inv = inv_spd(cov_p)?;
    let diff = mu_p - mu_q;
    let trace = (&p_inv * cov_q).trace();
    let maha = (diff.transpose() * &p_inv * &diff)[(0, 0)];
    Ok(0.5 * (trace + maha - d as f64 + log_det_spd(cov_p)? - log_det_spd(cov_q)?))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], ncols: usize, what: &'static str) -> Result<Mat> {
    for row in rows {
        if row.len() != ncols {
            return Err(AsrError::DimensionMismatch {
                what,
                expected: ncols,
                got: row.len(),
            });
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(AsrError::invalid(format!("{what} contains a non-finite entry")));
        }
    }
    Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Serde adapter storing a matrix as a list of rows.
pub mod serde_rows {
    use super::{from_rows, to_rows, Mat};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        from_rows(&rows, ncols, "matrix").map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for a list of matrices, each stored as rows.
pub mod serde_rows_list {
    use super::{from_rows, to_rows, Mat};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> std::result::Result<S::Ok, S::Error> {
        ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Mat>, D::Error> {
        Vec::<Vec<Vec<f64>>>::deserialize(d)?
            .iter()
            .map(|rows| {
                let ncols = rows.first().map_or(0, Vec::len);
                from_rows(rows, ncols, "matrix").map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

/// Serde adapter storing a vector as a plain list.
pub mod serde_vec {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vector, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(serde::de::Error::custom("non-finite entry"));
        }
        Ok(Vector::from_vec(v))
    }
}
