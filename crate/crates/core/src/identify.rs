//! Moment-based identification of the linear model up to an orthogonal
//! change of latent basis.
//!
//! Notation: `y_t = (o_t, r_{t+1})`, `L = [C_o | c_sr]`, `L_a = [0 | c_ar]`,
//! `R_y(k) = E[y_t y_{t+k}ᵀ]`, `S_k = Cov(y_{t+k}, a_t) = Lᵀ (C_sᵀ)^{k-1} C_asᵀ Var(a)`
//! and `Ω = Lᵀ C_sᵀ (Lᵀ)⁺`. For `k ≥ 2`
//!
//! ```text
//! R_y(k) − L_aᵀ S_kᵀ = (R_y(k−1) − L_aᵀ S_{k−1}ᵀ) Ωᵀ
//! ```
//!
//! and `P = Lᵀ Σ_s L` follows from the `k = 1` block, which yields the noise
//! and Gram matrix.

use serde::{Deserialize, Serialize};

use crate::env::{autocov_y, cross_cov_ya, LinearModelParams, TrajectoryBatch};
use crate::error::{AsrError, Result};
use crate::linalg::{
    inv_spd, min_eigenvalue, pinv, serde_rows, serde_rows_list, serde_vec, singular_values_desc,
    sym_eigen_desc, symmetrize, Mat, Vector,
};

const RANK_RTOL: f64 = 1e-13;
const MAX_CONDITION: f64 = 1e10;

/// Second-order statistics of `y_t = (o_t, r_{t+1})` and `a_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    /// `R_y(k) = E[y_t y_{t+k}ᵀ]`, `k = 0..=K`.
    #[serde(with = "serde_rows_list")]
    pub r_y: Vec<Mat>,
    /// `Cov(y_{t+k}, a_t)`, `k = 0..=K`.
    #[serde(with = "serde_rows_list")]
    pub c_ya: Vec<Mat>,
    #[serde(with = "serde_rows")]
    pub var_a: Mat,
    pub n_samples: usize,
}

impl MomentSummary {
    pub fn lags(&self) -> usize {
        self.r_y.len().saturating_sub(1)
    }

    pub fn d_o(&self) -> usize {
        self.r_y[0].nrows() - 1
    }

    pub fn d_a(&self) -> usize {
        self.var_a.nrows()
    }

    /// Exact population moments of a stationary model.
    pub fn population(params: &LinearModelParams, lags: usize) -> Result<Self> {
        params.validate()?;
        params.ensure_stationary()?;
        Ok(MomentSummary {
            r_y: (0..=lags).map(|k| autocov_y(params, k)).collect::<Result<_>>()?,
            c_ya: (0..=lags).map(|k| cross_cov_ya(params, k)).collect::<Result<_>>()?,
            var_a: params.cov_a.clone(),
            n_samples: usize::MAX,
        })
    }
}

/// Sample moments pooled over episodes; lag pairs never cross an episode
/// boundary. Episode sums are reduced in episode order.
pub fn estimate_moments(batch: &TrajectoryBatch, lags: usize) -> Result<MomentSummary> {
    if lags == 0 {
        return Err(AsrError::invalid("the number of lags must be positive"));
    }
    let first = batch
        .first()
        .ok_or_else(|| AsrError::invalid("no trajectories supplied"))?;
    let (d_o, d_a) = (first.d_o(), first.d_a());
    if d_a == 0 {
        return Err(AsrError::invalid("trajectories carry no actions"));
    }
    let d_y = d_o + 1;
    let mut shortest = usize::MAX;
    let mut ys: Vec<Vec<Vector>> = Vec::with_capacity(batch.len());
    for traj in batch {
        traj.validate()?;
        if traj.d_o() != d_o || traj.d_a() != d_a {
            return Err(AsrError::invalid("episodes have differing dimensions"));
        }
        let y: Vec<Vector> = (0..traj.actions.len())
            .map(|t| {
                let mut v = Vector::zeros(d_y);
                v.rows_mut(0, d_o).copy_from(&traj.observations[t]);
                v[d_o] = traj.rewards[t];
                v
            })
            .collect();
        shortest = shortest.min(y.len());
        ys.push(y);
    }
    if lags >= shortest {
        return Err(AsrError::invalid(format!(
            "{lags} lags need episodes longer than {lags} records; shortest has {shortest}"
        )));
    }
    let n: usize = ys.iter().map(Vec::len).sum();
    if n < 10 * d_y * lags {
        return Err(AsrError::invalid(format!(
            "{n} usable steps is fewer than the required 10·(d_o+1)·K = {}",
            10 * d_y * lags
        )));
    }

    let mut mean_y = Vector::zeros(d_y);
    let mut mean_a = Vector::zeros(d_a);
    for (y, traj) in ys.iter().zip(batch) {
        for (yt, at) in y.iter().zip(&traj.actions) {
            mean_y += yt;
            mean_a += at;
        }
    }
    mean_y /= n as f64;
    mean_a /= n as f64;

    let mut r_y = vec![Mat::zeros(d_y, d_y); lags + 1];
    let mut c_ya = vec![Mat::zeros(d_y, d_a); lags + 1];
    let mut var_a = Mat::zeros(d_a, d_a);
    let mut pairs = vec![0usize; lags + 1];
    for (y, traj) in ys.iter().zip(batch) {
        let yc: Vec<Vector> = y.iter().map(|v| v - &mean_y).collect();
        let ac: Vec<Vector> = traj.actions.iter().map(|v| v - &mean_a).collect();
        for a in &ac {
            var_a += a * a.transpose();
        }
        for k in 0..=lags {
            for t in 0..yc.len() - k {
                r_y[k] += &yc[t] * yc[t + k].transpose();
                c_ya[k] += &yc[t + k] * ac[t].transpose();
            }
            pairs[k] += yc.len() - k;
        }
    }
    for k in 0..=lags {
        let denom = if k == 0 { n - 1 } else { pairs[k] } as f64;
        r_y[k] /= denom;
        c_ya[k] /= denom;
    }
    r_y[0] = symmetrize(&r_y[0]);
    var_a = symmetrize(&(var_a / (n - 1) as f64));
    Ok(MomentSummary {
        r_y,
        c_ya,
        var_a,
        n_samples: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionEffects {
    pub c_a_to_r: Vector,
    /// `S_k` for `k = 1..=K` (index 0 holds `S_1`).
    pub s: Vec<Mat>,
    /// Largest magnitude in the observation rows of `Cov(y_t, a_t)`; zero in
    /// population.
    pub o_block_max: f64,
}

impl ActionEffects {
    /// `S_k`, with `S_0 = 0` so the `k = 1` recursion needs no special case.
    fn s_at(&self, k: usize, d_y: usize, d_a: usize) -> Mat {
        if k == 0 {
            Mat::zeros(d_y, d_a)
        } else {
            self.s[k - 1].clone()
        }
    }
}

pub fn recover_action_effects(m: &MomentSummary) -> Result<ActionEffects> {
    let inv = inv_spd(&m.var_a).map_err(|_| AsrError::Singular("sample action covariance".into()))?;
    let d_o = m.d_o();
    let c0 = &m.c_ya[0];
    let c_a_to_r = (c0.row(d_o) * inv).transpose();
    let o_block_max = c0.rows(0, d_o).amax();
    Ok(ActionEffects {
        c_a_to_r,
        s: m.c_ya[1..].to_vec(),
        o_block_max,
    })
}

/// `L_aᵀ S_kᵀ`: only the reward row is non-zero.
fn action_term(eff: &ActionEffects, k: usize, d_y: usize, d_a: usize) -> Mat {
    let mut la = Mat::zeros(d_a, d_y);
    la.set_column(d_y - 1, &eff.c_a_to_r);
    la.transpose() * eff.s_at(k, d_y, d_a).transpose()
}

/// `R_y(k) − L_aᵀ S_kᵀ`.
fn corrected_autocov(m: &MomentSummary, eff: &ActionEffects, k: usize) -> Mat {
    &m.r_y[k] - action_term(eff, k, m.r_y[0].nrows(), m.d_a())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmegaEstimate {
    pub omega: Mat,
    /// `σ_1 / σ_{d_s}` of the stacked left factor.
    pub condition: f64,
    pub rank: usize,
}

/// Stacked least squares over lags `2..=k_max`, truncated to rank `d_s`.
pub fn recover_omega(
    m: &MomentSummary,
    eff: &ActionEffects,
    k_max: usize,
    d_s: usize,
) -> Result<OmegaEstimate> {
    let d_y = m.r_y[0].nrows();
    if d_s == 0 || d_s > d_y {
        return Err(AsrError::Identifiability {
            assumption: "A1",
            detail: format!("d_o + 1 = {d_y} must be at least d_s = {d_s}"),
        });
    }
    if k_max < 2 || k_max > m.lags() {
        return Err(AsrError::invalid(format!(
            "k_max must lie in 2..={} (available lags), got {k_max}",
            m.lags()
        )));
    }
    let blocks = k_max - 1;
    let mut x = Mat::zeros(blocks * d_y, d_y);
    let mut y = Mat::zeros(blocks * d_y, d_y);
    for (b, k) in (2..=k_max).enumerate() {
        x.view_mut((b * d_y, 0), (d_y, d_y))
            .copy_from(&corrected_autocov(m, eff, k - 1));
        y.view_mut((b * d_y, 0), (d_y, d_y))
            .copy_from(&corrected_autocov(m, eff, k));
    }
    let sv = singular_values_desc(&x);
    let lead = sv.first().copied().unwrap_or(0.0);
    if lead == 0.0 {
        return Ok(OmegaEstimate {
            omega: Mat::zeros(d_y, d_y),
            condition: f64::INFINITY,
            rank: 0,
        });
    }
    let tail = sv[d_s - 1];
    let condition = if tail > 0.0 { lead / tail } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(AsrError::Identifiability {
            assumption: "A2",
            detail: format!(
                "lagged autocovariance factor is rank deficient (condition number {condition:.3e})"
            ),
        });
    }
    let omega_t = pinv(&x, Some(d_s), RANK_RTOL) * y;
    let omega = omega_t.transpose();
    let osv = singular_values_desc(&omega);
    let olead = osv.first().copied().unwrap_or(0.0);
    let rank = osv.iter().filter(|&&s| s > 1e-9 * olead).count();
    Ok(OmegaEstimate {
        omega,
        condition,
        rank,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseAndGram {
    /// `blkdiag(Σ_e, var_eps)` as recovered (off-diagonal block kept).
    pub cov_y_noise: Mat,
    /// `Lᵀ (C_asᵀ Var(a) C_as + I) L`.
    pub m: Mat,
    /// `Lᵀ L`.
    pub gram: Mat,
    /// Relative residual of the lag-one equation `X_1 = P Ωᵀ`.
    pub residual: f64,
    pub gram_min_eigenvalue: f64,
}

pub fn recover_noise_and_gram(
    m: &MomentSummary,
    eff: &ActionEffects,
    omega: &OmegaEstimate,
    d_s: usize,
) -> Result<NoiseAndGram> {
    let d_y = m.r_y[0].nrows();
    let d_a = m.d_a();
    let inv_a = inv_spd(&m.var_a).map_err(|_| AsrError::Singular("sample action covariance".into()))?;
    let x1 = corrected_autocov(m, eff, 1);
    let omega_t = omega.omega.transpose();
    let sv = singular_values_desc(&omega_t);
    if sv.len() < d_s || sv[d_s - 1] <= 1e-10 * sv[0].max(1e-300) {
        return Err(AsrError::Identifiability {
            assumption: "A2",
            detail: "recovered Ω has rank below d_s; the transition must be invertible".into(),
        });
    }
    let p = symmetrize(&(&x1 * pinv(&omega_t, Some(d_s), RANK_RTOL)));
    let resid = (&p * &omega_t - &x1).norm();
    let residual = resid / x1.norm().max(1e-300);

    let mut la = Mat::zeros(d_a, d_y);
    la.set_column(d_y - 1, &eff.c_a_to_r);
    let noise = symmetrize(&(&m.r_y[0] - la.transpose() * &m.var_a * &la - &p));
    let mm = symmetrize(&(&p - &omega.omega * &p * &omega_t));
    let b = &eff.s[0] * &inv_a;
    let gram = symmetrize(&(&mm - &b * &m.var_a * b.transpose()));
    if !gram.iter().chain(noise.iter()).all(|v| v.is_finite()) {
        return Err(AsrError::NonFinite { term: "gram" });
    }
    if residual > 1.0 {
        return Err(AsrError::Identifiability {
            assumption: "A3",
            detail: format!(
                "lag-one moment equation is inconsistent (relative residual {residual:.3}); \
                 moments are too noisy or the model is misspecified"
            ),
        });
    }
    Ok(NoiseAndGram {
        cov_y_noise: noise,
        m: mm,
        gram_min_eigenvalue: min_eigenvalue(&gram),
        gram,
        residual,
    })
}

/// Factor `F` (`d_s × (d_o+1)`) with `FᵀF` the best rank-`d_s` PSD
/// approximation of `gram`; equals `U L` for some orthogonal `U`.
pub fn factor_from_gram(gram: &Mat, d_s: usize) -> Mat {
    let (vals, vecs) = sym_eigen_desc(gram);
    let n = gram.nrows();
    let mut f = Mat::zeros(d_s, n);
    for i in 0..d_s.min(n) {
        let scale = vals[i].max(0.0).sqrt();
        f.set_row(i, &(vecs.column(i).transpose() * scale));
    }
    f
}

/// Orthogonal Procrustes: `U = argmin ‖est − U·truth‖_F` over orthogonal `U`.
pub fn align_orthogonal(est: &Mat, truth: &Mat) -> Result<(Mat, f64)> {
    if est.shape() != truth.shape() {
        return Err(AsrError::invalid(format!(
            "loading shapes differ: {:?} vs {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let d = truth.nrows();
    let sv = singular_values_desc(truth);
    if sv.len() < d || sv[d - 1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(AsrError::invalid("reference loading is rank deficient"));
    }
    let svd = (est * truth.transpose()).svd(true, true);
    let u = svd.u.unwrap() * svd.v_t.unwrap();
    let residual = (est - &u * truth).norm();
    Ok((u, residual))
}

pub fn observationally_equivalent(
    p1: &LinearModelParams,
    p2: &LinearModelParams,
    lags: usize,
    tol: f64,
) -> Result<bool> {
    if (p1.d_s(), p1.d_o(), p1.d_a()) != (p2.d_s(), p2.d_o(), p2.d_a()) {
        return Err(AsrError::invalid("models have different dimensions"));
    }
    if (&p1.cov_a - &p2.cov_a).amax() > tol {
        return Err(AsrError::invalid("models use different action covariances"));
    }
    for k in 0..=lags {
        if (autocov_y(p1, k)? - autocov_y(p2, k)?).amax() > tol
            || (cross_cov_ya(p1, k)? - cross_cov_ya(p2, k)?).amax() > tol
        {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationDiagnostics {
    pub omega_condition: f64,
    pub omega_rank: usize,
    pub o_block_max: f64,
    pub lag_one_residual: f64,
    pub gram_min_eigenvalue: f64,
    /// Largest relative eigen-gap of the Gram matrix (a `d_s` suggestion);
    /// reported only, never applied.
    pub eigen_gap_dimension: usize,
    pub n_samples: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedParams {
    pub d_s: usize,
    #[serde(with = "serde_vec")]
    pub c_a_to_r_hat: Vector,
    #[serde(with = "serde_rows_list")]
    pub s_hat: Vec<Mat>,
    #[serde(with = "serde_rows")]
    pub omega_hat: Mat,
    /// Recovered `blkdiag(Σ_e, var_eps)`.
    #[serde(with = "serde_rows")]
    pub cov_e_hat: Mat,
    /// `Lᵀ L`.
    #[serde(with = "serde_rows")]
    pub gram_hat: Mat,
    /// `Lᵀ (C_asᵀ Var(a) C_as + I) L`.
    #[serde(with = "serde_rows")]
    pub gram_with_action_hat: Mat,
    #[serde(with = "serde_rows")]
    pub var_a: Mat,
    pub diagnostics: IdentificationDiagnostics,
}

impl IdentifiedParams {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("identified params serialize")
    }

    /// Stacked loading `[C_o | c_sr]` in the canonical eigen-basis.
    pub fn loading(&self) -> Mat {
        factor_from_gram(&self.gram_hat, self.d_s)
    }

    /// A full parameter set in the canonical basis; observationally
    /// equivalent to the truth when moments are exact.
    pub fn implied_params(&self) -> Result<LinearModelParams> {
        let d_s = self.d_s;
        let d_y = self.gram_hat.nrows();
        let d_o = d_y - 1;
        let f = self.loading();
        let ft_pinv = pinv(&f.transpose(), Some(d_s), RANK_RTOL);
        let c_s_t = &ft_pinv * &self.omega_hat * f.transpose();
        let inv_a = inv_spd(&self.var_a)?;
        let c_as_t = &ft_pinv * &self.s_hat[0] * inv_a;
        let noise = &self.cov_e_hat;
        let cov_e = project_psd(&noise.view((0, 0), (d_o, d_o)).into_owned());
        let params = LinearModelParams {
            c_s_to_o: f.columns(0, d_o).into_owned(),
            c_s_to_r: f.column(d_o).into_owned(),
            c_a_to_r: self.c_a_to_r_hat.clone(),
            c_s: c_s_t.transpose(),
            c_a_to_s: c_as_t.transpose(),
            cov_e,
            var_eps: noise[(d_o, d_o)].max(0.0),
            cov_a: self.var_a.clone(),
        };
        params.validate()?;
        Ok(params)
    }
}

/// Clips negative eigenvalues to zero.
pub fn project_psd(m: &Mat) -> Mat {
    let (vals, vecs) = sym_eigen_desc(m);
    let d = Mat::from_diagonal(&Vector::from_iterator(
        vals.len(),
        vals.iter().map(|v| v.max(0.0)),
    ));
    symmetrize(&(&vecs * d * vecs.transpose()))
}

fn eigen_gap_dimension(gram: &Mat) -> usize {
    let (vals, _) = sym_eigen_desc(gram);
    let lead = vals.first().copied().unwrap_or(0.0).max(1e-300);
    let mut best = (0.0, vals.len());
    for i in 0..vals.len().saturating_sub(1) {
        let gap = (vals[i] - vals[i + 1]) / lead;
        if gap > best.0 {
            best = (gap, i + 1);
        }
    }
    best.1
}

/// Full identification from a moment summary.
pub fn identify_from_moments(m: &MomentSummary, d_s: usize, k_max: usize) -> Result<IdentifiedParams> {
    let eff = recover_action_effects(m)?;
    let omega = recover_omega(m, &eff, k_max, d_s)?;
    let ng = recover_noise_and_gram(m, &eff, &omega, d_s)?;
    let mut warnings = Vec::new();
    if ng.gram_min_eigenvalue < -1e-8 {
        warnings.push(format!(
            "Gram estimate has a negative eigenvalue ({:.3e})",
            ng.gram_min_eigenvalue
        ));
    }
    let d_o = m.d_o();
    let cross = ng.cov_y_noise.view((0, d_o), (d_o, 1)).amax();
    if cross > 0.05 * ng.cov_y_noise.amax().max(1e-12) {
        warnings.push(format!(
            "observation and reward noise appear correlated (max cross term {cross:.3e})"
        ));
    }
    let gap_dim = eigen_gap_dimension(&ng.gram);
    if gap_dim != d_s {
        warnings.push(format!(
            "largest Gram eigen-gap suggests d_s = {gap_dim}, using the supplied d_s = {d_s}"
        ));
    }
    Ok(IdentifiedParams {
        d_s,
        c_a_to_r_hat: eff.c_a_to_r.clone(),
        s_hat: eff.s.clone(),
        omega_hat: omega.omega.clone(),
        cov_e_hat: ng.cov_y_noise.clone(),
        gram_hat: ng.gram.clone(),
        gram_with_action_hat: ng.m.clone(),
        var_a: m.var_a.clone(),
        diagnostics: IdentificationDiagnostics {
            omega_condition: omega.condition,
            omega_rank: omega.rank,
            o_block_max: eff.o_block_max,
            lag_one_residual: ng.residual,
            gram_min_eigenvalue: ng.gram_min_eigenvalue,
            eigen_gap_dimension: gap_dim,
            n_samples: m.n_samples,
            warnings,
        },
    })
}

/// Default number of lags in the stacked Ω system.
pub const DEFAULT_K_MAX: usize = 4;

/// Estimates moments from trajectories and identifies the model.
pub fn identify(batch: &TrajectoryBatch, lags: usize, d_s: usize) -> Result<IdentifiedParams> {
    let m = estimate_moments(batch, lags)?;
    identify_from_moments(&m, d_s, lags.min(DEFAULT_K_MAX).max(2))
}
