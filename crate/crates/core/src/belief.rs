//! Exact Gaussian posterior over latent states.
//!
//! The belief about `s_t` is conditioned on `o_{≤t}` and `r_{≤t+1}`: the
//! reward that follows `a_t` loads on `s_t`, so it refines the current state
//! rather than the next one.

use crate::env::{stationary_state_cov, LinearModelParams, Trajectory};
use crate::error::{AsrError, Result};
use crate::graph::IndexSet;
use crate::linalg::{inv_spd, select, select_vec, symmetrize, Mat, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector,
    pub cov: Mat,
}

impl GaussianBelief {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Prior of `s_1`: the stationary distribution.
pub fn filter_init(params: &LinearModelParams) -> Result<GaussianBelief> {
    Ok(GaussianBelief {
        mean: Vector::zeros(params.d_s()),
        cov: stationary_state_cov(params)?,
    })
}

/// `p(s_{t+1} | …)` from a belief about `s_t` and the action `a_t`.
pub fn predict(params: &LinearModelParams, belief: &GaussianBelief, action: &Vector) -> GaussianBelief {
    let a = params.c_s.transpose();
    GaussianBelief {
        mean: &a * &belief.mean + params.c_a_to_s.transpose() * action,
        cov: symmetrize(&(&a * &belief.cov * &params.c_s))
            + Mat::identity(params.d_s(), params.d_s()),
    }
}

/// Joseph-form update for `z = Hᵀ s + v`, `v ~ N(0, noise)`.
fn update_linear(belief: &GaussianBelief, h: &Mat, z: &Vector, noise: &Mat) -> Result<GaussianBelief> {
    if z.is_empty() {
        return Ok(belief.clone());
    }
    let ph = &belief.cov * h;
    let innov_cov = symmetrize(&(h.transpose() * &ph + noise));
    let inv = inv_spd(&innov_cov)
        .map_err(|_| AsrError::Singular("innovation covariance".into()))?;
    let gain = &ph * inv;
    let resid = z - h.transpose() * &belief.mean;
    let mean = &belief.mean + &gain * resid;
    let n = belief.dim();
    let i_kh = Mat::identity(n, n) - &gain * h.transpose();
    let cov = symmetrize(&(&i_kh * &belief.cov * i_kh.transpose() + &gain * noise * gain.transpose()));
    Ok(GaussianBelief { mean, cov })
}

/// Conditions on `o_t` only.
pub fn update_observation(params: &LinearModelParams, belief: &GaussianBelief, o: &Vector) -> Result<GaussianBelief> {
    check_len("observation", o.len(), params.d_o())?;
    update_linear(belief, &params.c_s_to_o, o, &params.cov_e)
}

/// Conditions on `r_{t+1}` given `a_t`.
pub fn update_reward(
    params: &LinearModelParams,
    belief: &GaussianBelief,
    reward: f64,
    action: &Vector,
) -> Result<GaussianBelief> {
    check_len("action", action.len(), params.d_a())?;
    let h = Mat::from_column_slice(params.d_s(), 1, params.c_s_to_r.as_slice());
    let z = Vector::from_element(1, reward - params.c_a_to_r.dot(action));
    update_linear(belief, &h, &z, &Mat::from_element(1, 1, params.var_eps))
}

/// Joint update against `(o_t, r_{t+1} − c_arᵀ a_t)`.
pub fn update_stacked(
    params: &LinearModelParams,
    belief: &GaussianBelief,
    o: &Vector,
    reward: f64,
    action: &Vector,
) -> Result<GaussianBelief> {
    check_len("observation", o.len(), params.d_o())?;
    check_len("action", action.len(), params.d_a())?;
    let d_o = params.d_o();
    let mut z = Vector::zeros(d_o + 1);
    z.rows_mut(0, d_o).copy_from(o);
    z[d_o] = reward - params.c_a_to_r.dot(action);
    update_linear(belief, &params.loading(), &z, &params.stacked_noise())
}

/// One filter step: predict with `a_prev`, then update with
/// `(o_t, r_{t+1} − c_arᵀ a_now)`.
pub fn filter_step(
    params: &LinearModelParams,
    belief: &GaussianBelief,
    a_prev: &Vector,
    o: &Vector,
    r_next: f64,
    a_now: &Vector,
) -> Result<GaussianBelief> {
    check_len("action", a_prev.len(), params.d_a())?;
    update_stacked(params, &predict(params, belief, a_prev), o, r_next, a_now)
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(AsrError::DimensionMismatch { what, expected, got })
    }
}

fn check_traj(params: &LinearModelParams, traj: &Trajectory) -> Result<()> {
    traj.validate()?;
    check_len("observation", traj.d_o(), params.d_o())?;
    if !traj.actions.is_empty() {
        check_len("action", traj.d_a(), params.d_a())?;
    }
    Ok(())
}

/// Filtered beliefs plus the one-step predictions that preceded them
/// (`predicted[0]` is the stationary prior).
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub filtered: Vec<GaussianBelief>,
    pub predicted: Vec<GaussianBelief>,
}

pub fn filter(params: &LinearModelParams, traj: &Trajectory) -> Result<FilterOutput> {
    check_traj(params, traj)?;
    let t_len = traj.len();
    let mut filtered = Vec::with_capacity(t_len);
    let mut predicted = Vec::with_capacity(t_len);
    let mut prior = filter_init(params)?;
    for t in 0..t_len {
        if t > 0 {
            prior = predict(params, &filtered[t - 1], &traj.actions[t - 1]);
        }
        let post = if t + 1 < t_len {
            update_stacked(params, &prior, &traj.observations[t], traj.rewards[t], &traj.actions[t])?
        } else {
            update_observation(params, &prior, &traj.observations[t])?
        };
        predicted.push(prior.clone());
        filtered.push(post);
    }
    Ok(FilterOutput { filtered, predicted })
}

/// Smoothed marginals and lag-one cross-covariances
/// `cross[t] = Cov(s_{t+1}, s_t | all data)`.
#[derive(Debug, Clone)]
pub struct Smoothed {
    pub beliefs: Vec<GaussianBelief>,
    pub cross: Vec<Mat>,
}

/// Rauch–Tung–Striebel smoother.
pub fn smooth_with_cross(params: &LinearModelParams, traj: &Trajectory) -> Result<Smoothed> {
    let FilterOutput { filtered, predicted } = filter(params, traj)?;
    let t_len = filtered.len();
    let mut beliefs = filtered.clone();
    let mut cross = vec![Mat::zeros(params.d_s(), params.d_s()); t_len.saturating_sub(1)];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let pred = &predicted[t + 1];
        let gain = &filtered[t].cov * &params.c_s * inv_spd(&pred.cov)?;
        let mean = &filtered[t].mean + &gain * (&beliefs[t + 1].mean - &pred.mean);
        let cov = symmetrize(
            &(&filtered[t].cov + &gain * (&beliefs[t + 1].cov - &pred.cov) * gain.transpose()),
        );
        cross[t] = &beliefs[t + 1].cov * gain.transpose();
        beliefs[t] = GaussianBelief { mean, cov };
    }
    Ok(Smoothed { beliefs, cross })
}

pub fn smooth(params: &LinearModelParams, traj: &Trajectory) -> Result<Vec<GaussianBelief>> {
    Ok(smooth_with_cross(params, traj)?.beliefs)
}

/// Marginal over the given state dimensions (0-based).
pub fn asr_belief(belief: &GaussianBelief, asr: &IndexSet) -> Result<GaussianBelief> {
    if let Some(&bad) = asr.iter().find(|&&i| i >= belief.dim()) {
        return Err(AsrError::invalid(format!(
            "ASR index {} out of range for a {}-dimensional belief",
            bad + 1,
            belief.dim()
        )));
    }
    let idx: Vec<usize> = asr.iter().copied().collect();
    Ok(GaussianBelief {
        mean: select_vec(&belief.mean, &idx),
        cov: select(&belief.cov, &idx),
    })
}

/// Incremental filter for acting online: `observe(o_t)` at decision time,
/// `observe_reward(r_{t+1}, a_t)` after acting, then `advance(a_t)`.
#[derive(Debug, Clone)]
pub struct OnlineFilter {
    params: LinearModelParams,
    belief: GaussianBelief,
}

impl OnlineFilter {
    pub fn new(params: LinearModelParams) -> Result<Self> {
        let belief = filter_init(&params)?;
        Ok(OnlineFilter { params, belief })
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    pub fn params(&self) -> &LinearModelParams {
        &self.params
    }

    pub fn observe(&mut self, o: &Vector) -> Result<&GaussianBelief> {
        self.belief = update_observation(&self.params, &self.belief, o)?;
        Ok(&self.belief)
    }

    pub fn observe_reward(&mut self, reward: f64, action: &Vector) -> Result<&GaussianBelief> {
        self.belief = update_reward(&self.params, &self.belief, reward, action)?;
        Ok(&self.belief)
    }

    pub fn advance(&mut self, action: &Vector) -> Result<()> {
        check_len("action", action.len(), self.params.d_a())?;
        self.belief = predict(&self.params, &self.belief, action);
        Ok(())
    }

    pub fn reset(&mut self) -> Result<()> {
        self.belief = filter_init(&self.params)?;
        Ok(())
    }
}
