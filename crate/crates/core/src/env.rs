//! Linear-Gaussian environment:
//!
//! ```text
//! o_t     = C_oᵀ s_t + e_t
//! r_{t+1} = c_srᵀ s_t + c_arᵀ a_t + ε_{t+1}
//! s_t     = C_sᵀ s_{t-1} + C_asᵀ a_{t-1} + η_t,   Var(η_t) = I
//! ```
//!
//! A record at step `t` holds `(o_t, a_t, r_{t+1})`; the stacked observation
//! `y_t = (o_t, r_{t+1})` then loads on `s_t` through `L = [C_o | c_sr]`
//! (`d_s × (d_o+1)`) and on `a_t` through `L_a = [0 | c_ar]`.

use nalgebra::Cholesky;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};
use crate::linalg::{
    block_diag, from_rows, mat_pow, pinv, singular_values_desc, solve_discrete_lyapunov,
    spectral_radius, sym_eigen_desc, to_rows, Mat, Vector,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct LinearModelParams {
    /// `d_s × d_o`
    pub c_s_to_o: Mat,
    pub c_s_to_r: Vector,
    pub c_a_to_r: Vector,
    /// `d_s × d_s`, transposed transition (`s_t = C_sᵀ s_{t-1} + …`).
    pub c_s: Mat,
    /// `d_a × d_s`
    pub c_a_to_s: Mat,
    pub cov_e: Mat,
    pub var_eps: f64,
    pub cov_a: Mat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParams {
    c_s_to_o: Vec<Vec<f64>>,
    c_s_to_r: Vec<f64>,
    c_a_to_r: Vec<f64>,
    c_s: Vec<Vec<f64>>,
    c_a_to_s: Vec<Vec<f64>>,
    cov_e: Vec<Vec<f64>>,
    var_eps: f64,
    cov_a: Vec<Vec<f64>>,
}

impl TryFrom<RawParams> for LinearModelParams {
    type Error = AsrError;

    fn try_from(raw: RawParams) -> Result<Self> {
        let d_s = raw.c_s.len();
        let d_o = raw.c_s_to_o.first().map_or(0, Vec::len);
        let d_a = raw.c_a_to_r.len();
        if raw.c_s_to_o.len() != d_s {
            return Err(AsrError::DimensionMismatch {
                what: "c_s_to_o rows",
                expected: d_s,
                got: raw.c_s_to_o.len(),
            });
        }
        if raw.c_a_to_s.len() != d_a {
            return Err(AsrError::DimensionMismatch {
                what: "c_a_to_s rows",
                expected: d_a,
                got: raw.c_a_to_s.len(),
            });
        }
        if raw.cov_e.len() != d_o {
            return Err(AsrError::DimensionMismatch {
                what: "cov_e rows",
                expected: d_o,
                got: raw.cov_e.len(),
            });
        }
        if raw.cov_a.len() != d_a {
            return Err(AsrError::DimensionMismatch {
                what: "cov_a rows",
                expected: d_a,
                got: raw.cov_a.len(),
            });
        }
        let vec_of = |v: &[f64], n: usize, what: &'static str| -> Result<Vector> {
            if v.len() != n {
                return Err(AsrError::DimensionMismatch {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(AsrError::invalid(format!("{what} contains a non-finite entry")));
            }
            Ok(Vector::from_column_slice(v))
        };
        let params = LinearModelParams {
            c_s_to_o: from_rows(&raw.c_s_to_o, d_o, "c_s_to_o")?,
            c_s_to_r: vec_of(&raw.c_s_to_r, d_s, "c_s_to_r")?,
            c_a_to_r: vec_of(&raw.c_a_to_r, d_a, "c_a_to_r")?,
            c_s: from_rows(&raw.c_s, d_s, "c_s")?,
            c_a_to_s: from_rows(&raw.c_a_to_s, d_s, "c_a_to_s")?,
            cov_e: from_rows(&raw.cov_e, d_o, "cov_e")?,
            var_eps: raw.var_eps,
            cov_a: from_rows(&raw.cov_a, d_a, "cov_a")?,
        };
        params.validate()?;
        Ok(params)
    }
}

impl From<LinearModelParams> for RawParams {
    fn from(p: LinearModelParams) -> Self {
        RawParams {
            c_s_to_o: to_rows(&p.c_s_to_o),
            c_s_to_r: p.c_s_to_r.iter().copied().collect(),
            c_a_to_r: p.c_a_to_r.iter().copied().collect(),
            c_s: to_rows(&p.c_s),
            c_a_to_s: to_rows(&p.c_a_to_s),
            cov_e: to_rows(&p.cov_e),
            var_eps: p.var_eps,
            cov_a: to_rows(&p.cov_a),
        }
    }
}

fn is_symmetric(m: &Mat, tol: f64) -> bool {
    (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

impl LinearModelParams {
    /// All coefficients zero, unit noises.
    pub fn zeros(d_s: usize, d_o: usize, d_a: usize) -> Self {
        LinearModelParams {
            c_s_to_o: Mat::zeros(d_s, d_o),
            c_s_to_r: Vector::zeros(d_s),
            c_a_to_r: Vector::zeros(d_a),
            c_s: Mat::zeros(d_s, d_s),
            c_a_to_s: Mat::zeros(d_a, d_s),
            cov_e: Mat::identity(d_o, d_o),
            var_eps: 1.0,
            cov_a: Mat::identity(d_a, d_a),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn d_s(&self) -> usize {
        self.c_s.nrows()
    }

    pub fn d_o(&self) -> usize {
        self.c_s_to_o.ncols()
    }

    pub fn d_a(&self) -> usize {
        self.c_a_to_r.len()
    }

    /// Shape and symmetry checks; stationarity is checked separately.
    pub fn validate(&self) -> Result<()> {
        let (d_s, d_o, d_a) = (self.d_s(), self.d_o(), self.d_a());
        if d_s == 0 || d_a == 0 {
            return Err(AsrError::invalid("state and action dimensions must be positive"));
        }
        let check = |what: &'static str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(AsrError::invalid(format!(
                    "{what} has shape {got:?}, expected {want:?}"
                )))
            } else {
                Ok(())
            }
        };
        check("c_s", self.c_s.shape(), (d_s, d_s))?;
        check("c_s_to_o", self.c_s_to_o.shape(), (d_s, d_o))?;
        check("c_a_to_s", self.c_a_to_s.shape(), (d_a, d_s))?;
        check("cov_e", self.cov_e.shape(), (d_o, d_o))?;
        check("cov_a", self.cov_a.shape(), (d_a, d_a))?;
        if self.c_s_to_r.len() != d_s {
            return Err(AsrError::DimensionMismatch {
                what: "c_s_to_r",
                expected: d_s,
                got: self.c_s_to_r.len(),
            });
        }
        if !(self.var_eps >= 0.0 && self.var_eps.is_finite()) {
            return Err(AsrError::invalid("var_eps must be a finite non-negative number"));
        }
        if !is_symmetric(&self.cov_e, 1e-9) || !is_symmetric(&self.cov_a, 1e-9) {
            return Err(AsrError::invalid("noise covariances must be symmetric"));
        }
        if sym_eigen_desc(&self.cov_e).0.last().is_some_and(|&l| l < -1e-10) {
            return Err(AsrError::invalid("cov_e is not positive semi-definite"));
        }
        if Cholesky::new(self.cov_a.clone()).is_none() {
            return Err(AsrError::invalid("cov_a is not positive definite"));
        }
        Ok(())
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.c_s)
    }

    pub fn is_stationary(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    pub fn ensure_stationary(&self) -> Result<()> {
        let rho = self.spectral_radius();
        if rho < 1.0 {
            Ok(())
        } else {
            Err(AsrError::NonStationary {
                spectral_radius: rho,
            })
        }
    }

    /// Stacked loading `[C_o | c_sr]`, `d_s × (d_o+1)`.
    pub fn loading(&self) -> Mat {
        let (d_s, d_o) = (self.d_s(), self.d_o());
        let mut l = Mat::zeros(d_s, d_o + 1);
        l.view_mut((0, 0), (d_s, d_o)).copy_from(&self.c_s_to_o);
        l.set_column(d_o, &self.c_s_to_r);
        l
    }

    /// Stacked action loading `[0 | c_ar]`, `d_a × (d_o+1)`.
    pub fn action_loading(&self) -> Mat {
        let (d_a, d_o) = (self.d_a(), self.d_o());
        let mut l = Mat::zeros(d_a, d_o + 1);
        l.set_column(d_o, &self.c_a_to_r);
        l
    }

    /// `blkdiag(cov_e, var_eps)`.
    pub fn stacked_noise(&self) -> Mat {
        block_diag(&[&self.cov_e, &Mat::from_element(1, 1, self.var_eps)])
    }

    /// Input covariance of the state recursion, `C_asᵀ Var(a) C_as + I`.
    pub fn state_input_cov(&self) -> Mat {
        self.c_a_to_s.transpose() * &self.cov_a * &self.c_a_to_s + Mat::identity(self.d_s(), self.d_s())
    }

    /// Observation-space transition `Ω = Lᵀ C_sᵀ (Lᵀ)⁺`.
    pub fn omega(&self) -> Mat {
        let lt = self.loading().transpose();
        &lt * self.c_s.transpose() * pinv(&lt, Some(self.d_s()), 1e-13)
    }

    /// Checks the rank conditions needed for moment-based identification.
    pub fn check_identifiable(&self) -> Result<()> {
        if self.d_o() + 1 < self.d_s() {
            return Err(AsrError::Identifiability {
                assumption: "A1",
                detail: format!(
                    "d_o + 1 = {} is smaller than d_s = {}",
                    self.d_o() + 1,
                    self.d_s()
                ),
            });
        }
        let sv = singular_values_desc(&self.loading());
        if sv.len() < self.d_s() || sv[self.d_s() - 1] <= 1e-10 * sv[0].max(1e-300) {
            return Err(AsrError::Identifiability {
                assumption: "A2",
                detail: "stacked observation/reward loading is not full rank".into(),
            });
        }
        let sv = singular_values_desc(&self.c_s);
        if sv.last().copied().unwrap_or(0.0) <= 1e-10 * sv[0].max(1e-300) {
            return Err(AsrError::Identifiability {
                assumption: "A2",
                detail: "transition matrix is singular".into(),
            });
        }
        Ok(())
    }

    /// The observationally equivalent model in the latent basis `s̃ = U s`.
    pub fn rotate(&self, u: &Mat) -> Result<Self> {
        let d = self.d_s();
        if u.shape() != (d, d) {
            return Err(AsrError::invalid("rotation must be d_s × d_s"));
        }
        if (u.transpose() * u - Mat::identity(d, d)).amax() > 1e-9 {
            return Err(AsrError::invalid("rotation is not orthogonal"));
        }
        Ok(LinearModelParams {
            c_s_to_o: u * &self.c_s_to_o,
            c_s_to_r: u * &self.c_s_to_r,
            c_a_to_r: self.c_a_to_r.clone(),
            c_s: u * &self.c_s * u.transpose(),
            c_a_to_s: &self.c_a_to_s * u.transpose(),
            cov_e: self.cov_e.clone(),
            var_eps: self.var_eps,
            cov_a: self.cov_a.clone(),
        })
    }
}

/// Solves `Σ = C_sᵀ Σ C_s + C_asᵀ Var(a) C_as + I`.
pub fn stationary_state_cov(params: &LinearModelParams) -> Result<Mat> {
    solve_discrete_lyapunov(&params.c_s, &params.state_input_cov())
}

/// `Cov(y_{t+k}, a_t)`, `(d_o+1) × d_a`.
pub fn cross_cov_ya(params: &LinearModelParams, k: usize) -> Result<Mat> {
    params.ensure_stationary()?;
    if k == 0 {
        return Ok(params.action_loading().transpose() * &params.cov_a);
    }
    Ok(params.loading().transpose()
        * mat_pow(&params.c_s.transpose(), k - 1)
        * params.c_a_to_s.transpose()
        * &params.cov_a)
}

/// Population autocovariance `R_y(k) = E[y_t y_{t+k}ᵀ]`.
pub fn autocov_y(params: &LinearModelParams, k: usize) -> Result<Mat> {
    let sigma = stationary_state_cov(params)?;
    let l = params.loading();
    let la = params.action_loading();
    if k == 0 {
        return Ok(crate::linalg::symmetrize(
            &(l.transpose() * &sigma * &l
                + la.transpose() * &params.cov_a * &la
                + params.stacked_noise()),
        ));
    }
    let cs_k1 = mat_pow(&params.c_s, k - 1);
    Ok(l.transpose() * &sigma * &cs_k1 * &params.c_s * &l
        + la.transpose() * &params.cov_a * &params.c_a_to_s * &cs_k1 * &l)
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub(crate) fn psd_sqrt(m: &Mat) -> Mat {
    let (vals, vecs) = sym_eigen_desc(m);
    let d = Mat::from_diagonal(&Vector::from_iterator(
        vals.len(),
        vals.iter().map(|v| v.max(0.0).sqrt()),
    ));
    &vecs * d * vecs.transpose()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Stateful simulator of a stationary linear-Gaussian environment.
///
/// The latent state is private; callers only ever see observations and
/// rewards through [`LinearEnv::reset`] and [`LinearEnv::step`].
#[derive(Debug, Clone)]
pub struct LinearEnv {
    params: LinearModelParams,
    sqrt_stationary: Mat,
    sqrt_cov_e: Mat,
    sqrt_cov_a: Mat,
    sd_eps: f64,
    rng: ChaCha8Rng,
    state: Vector,
}

impl LinearEnv {
    pub fn new(params: LinearModelParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let sigma = stationary_state_cov(&params)?;
        Ok(LinearEnv {
            sqrt_stationary: psd_sqrt(&sigma),
            sqrt_cov_e: psd_sqrt(&params.cov_e),
            sqrt_cov_a: psd_sqrt(&params.cov_a),
            sd_eps: params.var_eps.sqrt(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: Vector::zeros(params.d_s()),
            params,
        })
    }

    pub fn params(&self) -> &LinearModelParams {
        &self.params
    }

    /// Draws `s_1` from the stationary law and returns `o_1`.
    pub fn reset(&mut self) -> Vector {
        let z = gaussian(&mut self.rng, self.params.d_s());
        self.state = &self.sqrt_stationary * z;
        self.observe()
    }

    fn observe(&mut self) -> Vector {
        let e = &self.sqrt_cov_e * gaussian(&mut self.rng, self.params.d_o());
        self.params.c_s_to_o.transpose() * &self.state + e
    }

    /// Applies `a_t`; returns `(r_{t+1}, o_{t+1})`.
    pub fn step(&mut self, action: &Vector) -> (f64, Vector) {
        let p = &self.params;
        let eps: f64 = StandardNormal.sample(&mut self.rng);
        let reward = p.c_s_to_r.dot(&self.state) + p.c_a_to_r.dot(action) + self.sd_eps * eps;
        let eta = gaussian(&mut self.rng, p.d_s());
        self.state = p.c_s.transpose() * &self.state + p.c_a_to_s.transpose() * action + eta;
        (reward, self.observe())
    }

    /// Draws an exploration action from `N(0, cov_a)`.
    pub fn random_action(&mut self) -> Vector {
        &self.sqrt_cov_a * gaussian(&mut self.rng, self.params.d_a())
    }

    /// Ground-truth latent state; for simulation bookkeeping and tests only.
    pub(crate) fn latent(&self) -> &Vector {
        &self.state
    }
}

/// A recorded episode: `o_{1:T}`, `a_{1:T-1}`, `r_{2:T}` (the reward stored
/// at index `t` is the one that follows `a_t`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vector>,
    pub actions: Vec<Vector>,
    pub rewards: Vec<f64>,
    pub latents: Option<Vec<Vector>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn d_o(&self) -> usize {
        self.observations.first().map_or(0, |o| o.len())
    }

    pub fn d_a(&self) -> usize {
        self.actions.first().map_or(0, |a| a.len())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.observations.len();
        if t == 0 {
            return Err(AsrError::invalid("trajectory has no observations"));
        }
        if self.actions.len() + 1 != t || self.rewards.len() + 1 != t {
            return Err(AsrError::invalid(format!(
                "trajectory of {t} observations needs {} actions and rewards, got {} and {}",
                t - 1,
                self.actions.len(),
                self.rewards.len()
            )));
        }
        let (d_o, d_a) = (self.d_o(), self.d_a());
        if self.observations.iter().any(|o| o.len() != d_o)
            || self.actions.iter().any(|a| a.len() != d_a)
        {
            return Err(AsrError::invalid("ragged observation or action vectors"));
        }
        if let Some(l) = &self.latents {
            if l.len() != t {
                return Err(AsrError::invalid("latent sequence length differs"));
            }
        }
        Ok(())
    }

    /// Contiguous window `[start, start+len)` of this episode.
    pub fn window(&self, start: usize, len: usize) -> Trajectory {
        let end = start + len;
        Trajectory {
            observations: self.observations[start..end].to_vec(),
            actions: self.actions[start..end - 1].to_vec(),
            rewards: self.rewards[start..end - 1].to_vec(),
            latents: self.latents.as_ref().map(|l| l[start..end].to_vec()),
        }
    }
}

/// Episodes recorded independently; statistics never straddle two episodes.
pub type TrajectoryBatch = Vec<Trajectory>;

/// Action source for [`simulate`]: gets the step index and `o_t`.
pub type PolicyFn<'a> = dyn FnMut(usize, &Vector) -> Vector + 'a;

pub fn simulate(
    params: &LinearModelParams,
    steps: usize,
    seed: u64,
    policy: Option<&mut PolicyFn<'_>>,
) -> Result<Trajectory> {
    if steps < 3 {
        return Err(AsrError::invalid(format!(
            "simulation needs at least 3 steps, got {steps}"
        )));
    }
    let mut env = LinearEnv::new(params.clone(), seed)?;
    let mut policy = policy;
    let mut observations = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps - 1);
    let mut rewards = Vec::with_capacity(steps - 1);
    let mut latents = Vec::with_capacity(steps);
    let mut o = env.reset();
    for t in 1..=steps {
        latents.push(env.latent().clone());
        observations.push(o.clone());
        if t == steps {
            break;
        }
        let a = match policy.as_mut() {
            Some(f) => f(t, &o),
            None => env.random_action(),
        };
        if a.len() != params.d_a() {
            return Err(AsrError::DimensionMismatch {
                what: "policy action",
                expected: params.d_a(),
                got: a.len(),
            });
        }
        let (r, next) = env.step(&a);
        actions.push(a);
        rewards.push(r);
        o = next;
    }
    Ok(Trajectory {
        observations,
        actions,
        rewards,
        latents: Some(latents),
    })
}

/// Several independent episodes with seeds `seed, seed+1, …`.
pub fn simulate_batch(
    params: &LinearModelParams,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    (0..episodes)
        .map(|e| simulate(params, steps, seed.wrapping_add(e as u64), None))
        .collect()
}
