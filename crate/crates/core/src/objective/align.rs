//! Comparing a learned model with ground truth up to the latent rotation.

use serde::{Deserialize, Serialize};

use crate::env::LinearModelParams;
use crate::error::{AsrError, Result};
use crate::graph::IndexSet;
use crate::identify::align_orthogonal;
use crate::linalg::Mat;

/// Largest latent dimension for the brute-force permutation search.
pub const MAX_PERMUTATION_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `U` with learned loading ≈ `U · true loading`.
    #[serde(with = "crate::linalg::serde_rows")]
    pub rotation: Mat,
    /// `permutation[j]` is the true dimension matched to learned dimension `j`.
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
    pub residual: f64,
}

impl Alignment {
    pub fn map_indices(&self, learned: &IndexSet) -> IndexSet {
        learned.iter().map(|&j| self.permutation[j]).collect()
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// Procrustes rotation on the stacked loadings, then the signed permutation
/// closest to it.
pub fn canonical_alignment(learned: &LinearModelParams, truth: &LinearModelParams) -> Result<Alignment> {
    let d = truth.d_s();
    if learned.d_s() != d {
        return Err(AsrError::DimensionMismatch {
            what: "latent dimension",
            expected: d,
            got: learned.d_s(),
        });
    }
    if d > MAX_PERMUTATION_DIM {
        return Err(AsrError::invalid(format!(
            "canonical alignment supports at most {MAX_PERMUTATION_DIM} latent dimensions"
        )));
    }
    let (u, residual) = align_orthogonal(&learned.loading(), &truth.loading())?;
    let best = permutations(d)
        .into_iter()
        .map(|p| {
            let score: f64 = (0..d).map(|j| u[(j, p[j])].abs()).sum();
            (score, p)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one permutation")
        .1;
    let signs = (0..d).map(|j| if u[(j, best[j])] >= 0.0 { 1.0 } else { -1.0 }).collect();
    Ok(Alignment {
        rotation: u,
        permutation: best,
        signs,
        residual,
    })
}

/// Entries of every coefficient block, in a fixed order.
fn coefficient_entries(p: &LinearModelParams) -> Vec<f64> {
    [&p.c_s_to_o, &p.c_s, &p.c_a_to_s]
        .iter()
        .flat_map(|m| m.iter().copied())
        .chain(p.c_s_to_r.iter().copied())
        .chain(p.c_a_to_r.iter().copied())
        .collect()
}

/// F1 of thresholded learned supports against the truth's nonzero pattern,
/// with the learned model first rotated into the truth's basis.
pub fn support_f1(learned: &LinearModelParams, truth: &LinearModelParams, threshold: f64) -> Result<f64> {
    let a = canonical_alignment(learned, truth)?;
    let aligned = learned.rotate(&a.rotation.transpose())?;
    let est = coefficient_entries(&aligned);
    let tru = coefficient_entries(truth);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (e, t) in est.iter().zip(&tru) {
        match (e.abs() > threshold, t.abs() > 1e-12) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 });
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}
