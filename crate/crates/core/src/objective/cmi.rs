//! Conditional mutual information between jointly Gaussian variables, with
//! a differentiable soft gate.
//!
//! A gated coordinate with weight `w ∈ [0,1]` is `w·b + √(1−w²)·sd(b)·ξ`
//! for independent standard noise `ξ`: its variance equals that of `b`,
//! `w = 1` keeps `b` and `w = 0` leaves pure noise. Only off-diagonal
//! covariance entries depend on the weights.

use nalgebra::Cholesky;

use crate::error::{AsrError, Result};
use crate::linalg::{select, symmetrize, Mat, Vector};

const RIDGE: f64 = 1e-8;

/// Sample covariance (mean removed, divided by `n`) of the given rows.
pub fn sample_covariance(rows: &[Vector]) -> Result<Mat> {
    let n = rows.len();
    if n < 2 {
        return Err(AsrError::invalid("at least two rows are needed for a covariance"));
    }
    let d = rows[0].len();
    let mut mean = Vector::zeros(d);
    for r in rows {
        mean += r;
    }
    mean /= n as f64;
    let mut cov = Mat::zeros(d, d);
    for r in rows {
        let c = r - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    Ok(symmetrize(&(cov / n as f64)))
}

/// `log det` and inverse of a covariance block; adds a `1e-8` ridge when the
/// block is numerically singular.
fn logdet_inv(m: &Mat) -> Result<(f64, Mat, bool)> {
    if m.nrows() == 0 {
        return Ok((0.0, Mat::zeros(0, 0), false));
    }
    let try_chol = |x: Mat| {
        Cholesky::new(x).filter(|c| c.l().diagonal().iter().all(|v| *v > 0.0 && v.is_finite()))
    };
    let (chol, ridged) = match try_chol(symmetrize(m)) {
        Some(c) => (c, false),
        None => {
            let scale = m.diagonal().amax().max(1.0);
            let ridged = symmetrize(m) + Mat::identity(m.nrows(), m.nrows()) * (RIDGE * scale);
            (
                try_chol(ridged).ok_or_else(|| AsrError::Singular("CMI covariance block".into()))?,
                true,
            )
        }
    };
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((logdet, chol.inverse(), ridged))
}

/// `I(X; Y | Z)` in nats from a joint covariance and index lists.
pub fn gaussian_cmi(cov: &Mat, x: &[usize], y: &[usize], z: &[usize]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Ok(0.0);
    }
    let cat = |parts: &[&[usize]]| parts.concat();
    let ld = |idx: Vec<usize>| logdet_inv(&select(cov, &idx)).map(|r| r.0);
    Ok(0.5
        * (ld(cat(&[x, z]))? + ld(cat(&[y, z]))? - ld(z.to_vec())? - ld(cat(&[x, y, z]))?))
}

/// A CMI query over a base covariance where some coordinates of `X` and `Z`
/// pass through the soft gate.
#[derive(Debug, Clone)]
pub struct GatedQuery<'a> {
    pub base: &'a Mat,
    /// Base indices of `X`, each with its gate weight.
    pub x: &'a [(usize, f64)],
    pub y: &'a [usize],
    /// Base indices of `Z`; ungated ones carry weight 1.
    pub z: &'a [(usize, f64)],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedCmi {
    pub value: f64,
    /// `∂/∂w` for each entry of `x`.
    pub grad_x: Vec<f64>,
    /// `∂/∂w` for each entry of `z`.
    pub grad_z: Vec<f64>,
    pub ridged: bool,
}

/// Coordinates of a block: base index and gate weight.
type Coords = Vec<(usize, f64)>;

fn gated_cov(base: &Mat, coords: &[(usize, f64)]) -> Mat {
    let n = coords.len();
    Mat::from_fn(n, n, |p, q| {
        let (bp, wp) = coords[p];
        let (bq, wq) = coords[q];
        if p == q {
            base[(bp, bp)]
        } else {
            wp * wq * base[(bp, bq)]
        }
    })
}

/// `log det Σ(w)` and its derivative with respect to each coordinate weight.
fn logdet_block(base: &Mat, coords: &[(usize, f64)]) -> Result<(f64, Vec<f64>, bool)> {
    let sigma = gated_cov(base, coords);
    let (ld, inv, ridged) = logdet_inv(&sigma)?;
    let n = coords.len();
    let grad = (0..n)
        .map(|p| {
            let (bp, _) = coords[p];
            2.0 * (0..n)
                .filter(|&q| q != p)
                .map(|q| {
                    let (bq, wq) = coords[q];
                    inv[(p, q)] * wq * base[(bp, bq)]
                })
                .sum::<f64>()
        })
        .collect();
    Ok((ld, grad, ridged))
}

pub fn gated_cmi(q: &GatedQuery<'_>) -> Result<GatedCmi> {
    let nx = q.x.len();
    let nz = q.z.len();
    let active = q.x.iter().any(|&(_, w)| w != 0.0);
    if nx == 0 || q.y.is_empty() || !active {
        return Ok(GatedCmi {
            value: 0.0,
            grad_x: vec![0.0; nx],
            grad_z: vec![0.0; nz],
            ridged: false,
        });
    }
    let y: Coords = q.y.iter().map(|&i| (i, 1.0)).collect();
    let xz: Coords = q.x.iter().chain(q.z).copied().collect();
    let yz: Coords = y.iter().chain(q.z).copied().collect();
    let xyz: Coords = q.x.iter().chain(&y).chain(q.z).copied().collect();
    let (l_xz, g_xz, r1) = logdet_block(q.base, &xz)?;
    let (l_yz, g_yz, r2) = logdet_block(q.base, &yz)?;
    let (l_z, g_z, r3) = logdet_block(q.base, q.z)?;
    let (l_xyz, g_xyz, r4) = logdet_block(q.base, &xyz)?;
    let ny = y.len();
    let grad_x = (0..nx).map(|i| 0.5 * (g_xz[i] - g_xyz[i])).collect();
    let grad_z = (0..nz)
        .map(|i| 0.5 * (g_xz[nx + i] + g_yz[ny + i] - g_z[i] - g_xyz[nx + ny + i]))
        .collect();
    Ok(GatedCmi {
        value: 0.5 * (l_xz + l_yz - l_z - l_xyz),
        grad_x,
        grad_z,
        ridged: r1 || r2 || r3 || r4,
    })
}
