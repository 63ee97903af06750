//! Q-learning on ASR beliefs, with optional Dyna-style imagined updates.
//!
//! The agent sees the environment only through [`ObservableEnv`]: it gets
//! observations and rewards, keeps a belief with an [`OnlineFilter`] under
//! the inference parameters, and acts on features of the ASR marginal.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::belief::{GaussianBelief, OnlineFilter};
use crate::env::{LinearEnv, LinearModelParams};
use crate::error::{AsrError, Result};
use crate::graph::IndexSet;
use crate::linalg::{inv_spd, Mat, Vector};

/// Largest tolerated `|Q|` before a run is declared divergent.
pub const MAX_Q: f64 = 1e6;

const AGENT_STREAM: u64 = 1;
const IMAGINATION_STREAM: u64 = 2;
const REFIT_RIDGE: f64 = 1e-6;

/// The agent's view of an environment: observations and rewards only.
pub trait ObservableEnv {
    /// Starts an episode and returns the first observation.
    fn reset(&mut self) -> Vector;
    /// Applies an action; returns the reward and the next observation.
    fn step(&mut self, action: &Vector) -> (f64, Vector);
}

impl ObservableEnv for LinearEnv {
    fn reset(&mut self) -> Vector {
        LinearEnv::reset(self)
    }

    fn step(&mut self, action: &Vector) -> (f64, Vector) {
        LinearEnv::step(self, action)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub action_set: Vec<Vec<f64>>,
    pub episodes: usize,
    pub horizon: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which epsilon decays linearly.
    pub epsilon_decay_episodes: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub replay_capacity: usize,
    /// Replayed transitions per real step.
    pub minibatch: usize,
    /// Imagined updates per real step.
    pub imagination_steps: usize,
    /// Real steps between refits of the imagination model; 0 never refits.
    pub model_refresh_every: usize,
    /// Polynomial degree of the belief features (1 or 2).
    pub feature_degree: usize,
    /// Appends the diagonal of the ASR belief covariance to the input.
    pub include_variance: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            action_set: vec![vec![-1.0], vec![1.0]],
            episodes: 100,
            horizon: 100,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 50,
            learning_rate: 0.01,
            gamma: 0.9,
            replay_capacity: 10_000,
            minibatch: 8,
            imagination_steps: 20,
            model_refresh_every: 100,
            feature_degree: 1,
            include_variance: false,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self, d_a: usize) -> Result<()> {
        if self.action_set.is_empty() {
            return Err(AsrError::invalid("action set is empty"));
        }
        if let Some(a) = self.action_set.iter().find(|a| a.len() != d_a) {
            return Err(AsrError::DimensionMismatch {
                what: "action",
                expected: d_a,
                got: a.len(),
            });
        }
        if self.action_set.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AsrError::invalid("actions must be finite"));
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AsrError::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(AsrError::invalid("gamma must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AsrError::invalid("learning_rate must be positive"));
        }
        if self.horizon == 0 {
            return Err(AsrError::invalid("horizon must be positive"));
        }
        if self.replay_capacity == 0 {
            return Err(AsrError::invalid("replay_capacity must be positive"));
        }
        if !(1..=2).contains(&self.feature_degree) {
            return Err(AsrError::invalid("feature_degree must be 1 or 2"));
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        if self.epsilon_decay_episodes == 0 {
            return self.epsilon_end;
        }
        let frac = (episode as f64 / self.epsilon_decay_episodes as f64).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }

    fn actions(&self) -> Vec<Vector> {
        self.action_set.iter().map(|a| Vector::from_vec(a.clone())).collect()
    }
}

/// Maps a belief to the agent's input and the input to Q features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub asr: Vec<usize>,
    pub degree: usize,
    pub include_variance: bool,
}

impl FeatureMap {
    pub fn input_len(&self) -> usize {
        self.asr.len() * if self.include_variance { 2 } else { 1 }
    }

    pub fn len(&self) -> usize {
        let n = self.input_len();
        1 + n + if self.degree == 2 { n * (n + 1) / 2 } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// ASR belief mean, optionally followed by its variances.
    pub fn input(&self, belief: &GaussianBelief) -> Vector {
        let mean = self.asr.iter().map(|&i| belief.mean[i]);
        if self.include_variance {
            let var = self.asr.iter().map(|&i| belief.cov[(i, i)]);
            Vector::from_iterator(self.input_len(), mean.chain(var))
        } else {
            Vector::from_iterator(self.input_len(), mean)
        }
    }

    pub fn features(&self, x: &Vector) -> Vector {
        let mut out = Vec::with_capacity(self.len());
        out.push(1.0);
        out.extend(x.iter());
        if self.degree == 2 {
            for i in 0..x.len() {
                for j in i..x.len() {
                    out.push(x[i] * x[j]);
                }
            }
        }
        Vector::from_vec(out)
    }
}

/// One linear value function per discrete action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub weights: Vec<Vec<f64>>,
}

impl QFunction {
    pub fn zeros(actions: usize, features: usize) -> Self {
        QFunction {
            weights: vec![vec![0.0; features]; actions],
        }
    }

    pub fn value(&self, phi: &Vector, action: usize) -> f64 {
        self.weights[action].iter().zip(phi.iter()).map(|(w, f)| w * f).sum()
    }

    /// Greedy action; ties go to the lowest index.
    pub fn greedy(&self, phi: &Vector) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for a in 0..self.weights.len() {
            let v = self.value(phi, a);
            if v > best.1 {
                best = (a, v);
            }
        }
        best.0
    }

    pub fn max_value(&self, phi: &Vector) -> f64 {
        (0..self.weights.len()).map(|a| self.value(phi, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Semi-gradient step toward `target`; returns the new `|Q(φ, a)|`.
    fn update(&mut self, phi: &Vector, action: usize, target: f64, lr: f64) -> f64 {
        let err = target - self.value(phi, action);
        for (w, f) in self.weights[action].iter_mut().zip(phi.iter()) {
            *w += lr * err * f;
        }
        self.value(phi, action).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    /// Agent input at decision time.
    pub s_asr: Vector,
    /// Full belief mean at decision time; the imagination model's proxy for
    /// state content outside the ASR.
    pub s_full: Vector,
    pub action: usize,
    pub reward: f64,
    pub next_s_asr: Vector,
    pub done: bool,
}

impl TransitionRecord {
    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.s_asr.iter().chain(self.s_full.iter()).chain(self.next_s_asr.iter()).all(|v| v.is_finite())
    }
}

/// Linear-Gaussian one-step model of the ASR means and the reward given the
/// full state proxy and the action.
#[derive(Debug, Clone, PartialEq)]
pub struct ImaginationModel {
    pub asr: Vec<usize>,
    /// `|ASR| × (d_s + d_a)`.
    pub transition: Mat,
    /// Lower Cholesky factor of the transition noise.
    pub noise_chol: Mat,
    /// Reward weights on `(s, a)`.
    pub reward: Vector,
    pub reward_sd: f64,
}

impl ImaginationModel {
    pub fn from_params(p: &LinearModelParams, asr: &[usize]) -> Result<Self> {
        let (d_s, d_a) = (p.d_s(), p.d_a());
        if asr.iter().any(|&i| i >= d_s) {
            return Err(AsrError::invalid("ASR index out of range"));
        }
        let a = p.c_s.transpose();
        let b = p.c_a_to_s.transpose();
        let transition = Mat::from_fn(asr.len(), d_s + d_a, |r, c| {
            if c < d_s {
                a[(asr[r], c)]
            } else {
                b[(asr[r], c - d_s)]
            }
        });
        Ok(ImaginationModel {
            asr: asr.to_vec(),
            transition,
            noise_chol: Mat::identity(asr.len(), asr.len()),
            reward: Vector::from_iterator(d_s + d_a, p.c_s_to_r.iter().chain(p.c_a_to_r.iter()).copied()),
            reward_sd: p.var_eps.sqrt(),
        })
    }

    /// Least-squares refit from replayed transitions; returns `false` and
    /// leaves the model unchanged when there are too few records.
    pub fn refit(&mut self, records: &VecDeque<TransitionRecord>, actions: &[Vector]) -> Result<bool> {
        let k = self.asr.len();
        let dx = self.transition.ncols();
        let n = records.len();
        if n < 2 * dx + 2 {
            return Ok(false);
        }
        let mut xtx = Mat::identity(dx, dx) * REFIT_RIDGE;
        let mut xty = Mat::zeros(dx, k + 1);
        let rows: Vec<(Vector, Vector)> = records
            .iter()
            .map(|r| {
                let x = Vector::from_iterator(dx, r.s_full.iter().chain(actions[r.action].iter()).copied());
                let y = Vector::from_iterator(k + 1, r.next_s_asr.iter().take(k).copied().chain(std::iter::once(r.reward)));
                (x, y)
            })
            .collect();
        for (x, y) in &rows {
            xtx.ger(1.0, x, x, 1.0);
            xty.ger(1.0, x, y, 1.0);
        }
        let coef = inv_spd(&xtx)? * xty;
        let mut resid_cov = Mat::zeros(k + 1, k + 1);
        for (x, y) in &rows {
            let e = y - coef.transpose() * x;
            resid_cov.ger(1.0 / n as f64, &e, &e, 1.0);
        }
        let noise = resid_cov.view((0, 0), (k, k)).into_owned() + Mat::identity(k, k) * REFIT_RIDGE;
        let chol = noise
            .cholesky()
            .ok_or_else(|| AsrError::Singular("imagination noise covariance".into()))?;
        self.transition = coef.columns(0, k).transpose();
        self.noise_chol = chol.l();
        self.reward = coef.column(k).into_owned();
        self.reward_sd = resid_cov[(k, k)].max(0.0).sqrt();
        Ok(true)
    }
}

/// One draw of `(next ASR mean, reward)` from the model, with the ASR part
/// of `s_full_proxy` replaced by `s_asr`.
pub fn imagine_step<R: Rng>(
    model: &ImaginationModel,
    s_asr: &Vector,
    s_full_proxy: &Vector,
    action: &Vector,
    rng: &mut R,
) -> Result<(Vector, f64)> {
    let k = model.asr.len();
    let d_s = s_full_proxy.len();
    if s_asr.len() != k {
        return Err(AsrError::DimensionMismatch {
            what: "ASR state",
            expected: k,
            got: s_asr.len(),
        });
    }
    if d_s + action.len() != model.transition.ncols() {
        return Err(AsrError::DimensionMismatch {
            what: "state and action",
            expected: model.transition.ncols(),
            got: d_s + action.len(),
        });
    }
    let mut full = s_full_proxy.clone();
    for (j, &i) in model.asr.iter().enumerate() {
        full[i] = s_asr[j];
    }
    let x = Vector::from_iterator(d_s + action.len(), full.iter().chain(action.iter()).copied());
    let xi = Vector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
    let next = &model.transition * &x + &model.noise_chol * xi;
    let eps: f64 = StandardNormal.sample(rng);
    Ok((next, model.reward.dot(&x) + model.reward_sd * eps))
}

/// A trained greedy policy together with what it needs to act.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QPolicy {
    pub q: QFunction,
    pub features: FeatureMap,
    pub action_set: Vec<Vec<f64>>,
    pub inference: LinearModelParams,
}

impl QPolicy {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: QPolicy = serde_json::from_str(text)?;
        p.inference.validate()?;
        if p.q.weights.len() != p.action_set.len() || p.q.weights.iter().any(|w| w.len() != p.features.len()) {
            return Err(AsrError::invalid("Q weights do not match the action set and features"));
        }
        if p.features.asr.iter().any(|&i| i >= p.inference.d_s()) {
            return Err(AsrError::invalid("ASR index out of range"));
        }
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub epsilon: f64,
    pub real_steps: usize,
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRun {
    pub curve: Vec<CurvePoint>,
    pub policy: QPolicy,
    pub q_updates: usize,
}

fn check_q(q: &QFunction, magnitude: f64, step: usize) -> Result<()> {
    if !magnitude.is_finite() || magnitude > MAX_Q || q.weights.iter().flatten().any(|w| !w.is_finite()) {
        return Err(AsrError::QDivergence { magnitude, step });
    }
    Ok(())
}

fn td_target(q: &QFunction, features: &FeatureMap, reward: f64, next: &Vector, done: bool, gamma: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * q.max_value(&features.features(next))
    }
}

/// `n` imagined updates on uniformly drawn stored transitions.
#[allow(clippy::too_many_arguments)]
pub fn plan<R: Rng>(
    q: &mut QFunction,
    model: &ImaginationModel,
    features: &FeatureMap,
    buffer: &VecDeque<TransitionRecord>,
    actions: &[Vector],
    gamma: f64,
    lr: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let k = model.asr.len();
    let mut worst: f64 = 0.0;
    if buffer.is_empty() {
        return Ok(worst);
    }
    for _ in 0..n {
        let rec = &buffer[rng.random_range(0..buffer.len())];
        let mean = rec.s_asr.rows(0, k).into_owned();
        let (next_mean, reward) = imagine_step(model, &mean, &rec.s_full, &actions[rec.action], rng)?;
        // Variance features, when present, are carried over from the record.
        let next = Vector::from_iterator(
            rec.next_s_asr.len(),
            next_mean.iter().chain(rec.next_s_asr.iter().skip(k)).copied(),
        );
        let target = td_target(q, features, reward, &next, rec.done, gamma);
        worst = worst.max(q.update(&features.features(&rec.s_asr), rec.action, target, lr));
    }
    Ok(worst)
}

fn validate_run_inputs(inference: &LinearModelParams, asr: &IndexSet, cfg: &PolicyConfig) -> Result<()> {
    cfg.validate(inference.d_a())?;
    if asr.is_empty() {
        return Err(AsrError::invalid("ASR set is empty"));
    }
    if asr.iter().any(|&i| i >= inference.d_s()) {
        return Err(AsrError::invalid("ASR index out of range"));
    }
    inference.ensure_stationary()
}

/// Algorithm loop shared by the model-free and Dyna variants; imagination
/// draws from its own random stream so `n = 0` leaves the agent's stream
/// untouched.
pub fn run_on_env<E: ObservableEnv>(
    env: &mut E,
    inference: &LinearModelParams,
    asr: &IndexSet,
    cfg: &PolicyConfig,
    seed: u64,
    imagination_steps: usize,
) -> Result<PolicyRun> {
    validate_run_inputs(inference, asr, cfg)?;
    let actions = cfg.actions();
    let features = FeatureMap {
        asr: asr.iter().copied().collect(),
        degree: cfg.feature_degree,
        include_variance: cfg.include_variance,
    };
    let mut q = QFunction::zeros(actions.len(), features.len());
    let mut filter = OnlineFilter::new(inference.clone())?;
    let mut agent_rng = ChaCha8Rng::seed_from_u64(seed);
    agent_rng.set_stream(AGENT_STREAM);
    let mut imagination_rng = ChaCha8Rng::seed_from_u64(seed);
    imagination_rng.set_stream(IMAGINATION_STREAM);
    let mut model = ImaginationModel::from_params(inference, &features.asr)?;
    let mut buffer: VecDeque<TransitionRecord> = VecDeque::with_capacity(cfg.replay_capacity.min(1 << 16));
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut real_steps = 0usize;
    let mut q_updates = 0usize;

    for episode in 0..cfg.episodes {
        let epsilon = cfg.epsilon(episode);
        filter.reset()?;
        let o = env.reset();
        filter.observe(&o)?;
        let mut ret = 0.0;
        for t in 0..cfg.horizon {
            let belief = filter.belief().clone();
            let x = features.input(&belief);
            let phi = features.features(&x);
            let a = if agent_rng.random::<f64>() < epsilon {
                agent_rng.random_range(0..actions.len())
            } else {
                q.greedy(&phi)
            };
            let (r, o_next) = env.step(&actions[a]);
            ret += r;
            real_steps += 1;
            filter.observe_reward(r, &actions[a])?;
            filter.advance(&actions[a])?;
            filter.observe(&o_next)?;
            let record = TransitionRecord {
                s_asr: x,
                s_full: belief.mean,
                action: a,
                reward: r,
                next_s_asr: features.input(filter.belief()),
                done: t + 1 == cfg.horizon,
            };
            if !record.is_finite() {
                return Err(AsrError::NonFinite { term: "transition record" });
            }
            if buffer.len() == cfg.replay_capacity {
                buffer.pop_front();
            }
            buffer.push_back(record);

            if buffer.len() >= cfg.minibatch {
                for _ in 0..cfg.minibatch {
                    let rec = &buffer[agent_rng.random_range(0..buffer.len())];
                    let target = td_target(&q, &features, rec.reward, &rec.next_s_asr, rec.done, cfg.gamma);
                    let mag = q.update(&features.features(&rec.s_asr), rec.action, target, cfg.learning_rate);
                    q_updates += 1;
                    check_q(&q, mag, real_steps)?;
                }
            }
            if imagination_steps > 0 {
                if cfg.model_refresh_every > 0 && real_steps % cfg.model_refresh_every == 0 {
                    model.refit(&buffer, &actions)?;
                }
                let mag = plan(
                    &mut q,
                    &model,
                    &features,
                    &buffer,
                    &actions,
                    cfg.gamma,
                    cfg.learning_rate,
                    imagination_steps,
                    &mut imagination_rng,
                )?;
                q_updates += imagination_steps;
                check_q(&q, mag, real_steps)?;
            }
        }
        curve.push(CurvePoint {
            episode,
            ret,
            epsilon,
            real_steps,
        });
    }
    Ok(PolicyRun {
        curve,
        policy: QPolicy {
            q,
            features,
            action_set: cfg.action_set.clone(),
            inference: inference.clone(),
        },
        q_updates,
    })
}

/// Q-learning with replay on ASR beliefs.
pub fn run_model_free(
    env: &LinearModelParams,
    inference: &LinearModelParams,
    asr: &IndexSet,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<PolicyRun> {
    let mut e = LinearEnv::new(env.clone(), seed)?;
    run_on_env(&mut e, inference, asr, cfg, seed, 0)
}

/// As [`run_model_free`] plus `cfg.imagination_steps` imagined updates per
/// real step.
pub fn run_dyna(
    env: &LinearModelParams,
    model: &LinearModelParams,
    asr: &IndexSet,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<PolicyRun> {
    let mut e = LinearEnv::new(env.clone(), seed)?;
    run_on_env(&mut e, model, asr, cfg, seed, cfg.imagination_steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub std_err: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n.max(1.0);
        let var = if returns.len() > 1 {
            returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EvalResult {
            mean,
            std_err: (var / n.max(1.0)).sqrt(),
            returns,
        }
    }
}

/// Something that acts from observations and learns nothing during
/// evaluation.
trait Actor {
    fn reset(&mut self) -> Result<()>;
    fn act(&mut self, o: &Vector) -> Result<Vector>;
    fn feedback(&mut self, action: &Vector, reward: f64) -> Result<()>;
}

struct GreedyActor<'a> {
    policy: &'a QPolicy,
    filter: OnlineFilter,
    actions: Vec<Vector>,
}

impl Actor for GreedyActor<'_> {
    fn reset(&mut self) -> Result<()> {
        self.filter.reset()
    }

    fn act(&mut self, o: &Vector) -> Result<Vector> {
        let b = self.filter.observe(o)?;
        let phi = self.policy.features.features(&self.policy.features.input(b));
        Ok(self.actions[self.policy.q.greedy(&phi)].clone())
    }

    fn feedback(&mut self, action: &Vector, reward: f64) -> Result<()> {
        self.filter.observe_reward(reward, action)?;
        self.filter.advance(action)
    }
}

struct RandomActor {
    actions: Vec<Vector>,
    rng: ChaCha8Rng,
}

impl Actor for RandomActor {
    fn reset(&mut self) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _: &Vector) -> Result<Vector> {
        Ok(self.actions[self.rng.random_range(0..self.actions.len())].clone())
    }

    fn feedback(&mut self, _: &Vector, _: f64) -> Result<()> {
        Ok(())
    }
}

fn rollouts(env_params: &LinearModelParams, episodes: usize, horizon: usize, seed: u64, actor: &mut dyn Actor) -> Result<EvalResult> {
    let mut env = LinearEnv::new(env_params.clone(), seed)?;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        actor.reset()?;
        let mut o = env.reset();
        let mut ret = 0.0;
        for _ in 0..horizon {
            let a = actor.act(&o)?;
            let (r, next) = env.step(&a);
            actor.feedback(&a, r)?;
            ret += r;
            o = next;
        }
        returns.push(ret);
    }
    Ok(EvalResult::from_returns(returns))
}

/// Greedy rollouts of a trained policy.
pub fn evaluate(policy: &QPolicy, env: &LinearModelParams, episodes: usize, horizon: usize, seed: u64) -> Result<EvalResult> {
    if env.d_a() != policy.inference.d_a() || env.d_o() != policy.inference.d_o() {
        return Err(AsrError::invalid("policy and environment dimensions differ"));
    }
    let mut actor = GreedyActor {
        policy,
        filter: OnlineFilter::new(policy.inference.clone())?,
        actions: policy.action_set.iter().map(|a| Vector::from_vec(a.clone())).collect(),
    };
    rollouts(env, episodes, horizon, seed, &mut actor)
}

/// Uniformly random actions from `action_set`.
pub fn evaluate_random(env: &LinearModelParams, action_set: &[Vec<f64>], episodes: usize, horizon: usize, seed: u64) -> Result<EvalResult> {
    if action_set.is_empty() {
        return Err(AsrError::invalid("action set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(AGENT_STREAM);
    let mut actor = RandomActor {
        actions: action_set.iter().map(|a| Vector::from_vec(a.clone())).collect(),
        rng,
    };
    rollouts(env, episodes, horizon, seed, &mut actor)
}

/// Optimal discounted action values for a fully known linear model:
/// `Q*(s, a) = uᵀs + vᵀa + κ` with `u = (I − γC_s)⁻¹ c_sr`,
/// `v = c_ar + γ C_as u` and `κ = γ max_a vᵀa / (1 − γ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticQ {
    pub state_weights: Vector,
    pub action_values: Vec<f64>,
    pub constant: f64,
}

impl AnalyticQ {
    pub fn new(params: &LinearModelParams, action_set: &[Vec<f64>], gamma: f64) -> Result<Self> {
        if action_set.is_empty() {
            return Err(AsrError::invalid("action set is empty"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(AsrError::invalid("gamma must lie in [0, 1)"));
        }
        let d = params.d_s();
        let m = Mat::identity(d, d) - &params.c_s * gamma;
        let u = m
            .lu()
            .solve(&params.c_s_to_r)
            .ok_or_else(|| AsrError::Singular("I − γ C_s".into()))?;
        let v = &params.c_a_to_r + &params.c_a_to_s * &u * gamma;
        let action_values: Vec<f64> = action_set.iter().map(|a| v.dot(&Vector::from_vec(a.clone()))).collect();
        let best = action_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(AnalyticQ {
            state_weights: u,
            action_values,
            constant: gamma * best / (1.0 - gamma),
        })
    }

    pub fn best_action(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.action_values.iter().enumerate() {
            if *v > self.action_values[best] {
                best = i;
            }
        }
        best
    }

    pub fn value(&self, s: &Vector, action: usize) -> f64 {
        self.state_weights.dot(s) + self.action_values[action] + self.constant
    }
}

/// Rollouts of the optimal policy of the true model, which in a linear
/// environment is a constant action.
pub fn evaluate_oracle(env: &LinearModelParams, action_set: &[Vec<f64>], gamma: f64, episodes: usize, horizon: usize, seed: u64) -> Result<EvalResult> {
    let q = AnalyticQ::new(env, action_set, gamma)?;
    let best = Vector::from_vec(action_set[q.best_action()].clone());
    struct Constant(Vector);
    impl Actor for Constant {
        fn reset(&mut self) -> Result<()> {
            Ok(())
        }
        fn act(&mut self, _: &Vector) -> Result<Vector> {
            Ok(self.0.clone())
        }
        fn feedback(&mut self, _: &Vector, _: f64) -> Result<()> {
            Ok(())
        }
    }
    rollouts(env, episodes, horizon, seed, &mut Constant(best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::steering_toy;

    fn quick_cfg() -> PolicyConfig {
        PolicyConfig {
            episodes: 30,
            horizon: 50,
            epsilon_decay_episodes: 10,
            imagination_steps: 0,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn dyna_without_imagination_is_model_free() {
        let (_, p) = steering_toy();
        let asr: IndexSet = [0].into_iter().collect();
        let cfg = quick_cfg();
        let a = run_model_free(&p, &p, &asr, &cfg, 3).unwrap();
        let b = run_dyna(&p, &p, &asr, &cfg, 3).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn runs_are_deterministic() {
        let (_, p) = steering_toy();
        let asr: IndexSet = [0, 1].into_iter().collect();
        let cfg = PolicyConfig {
            imagination_steps: 5,
            model_refresh_every: 50,
            ..quick_cfg()
        };
        let a = run_dyna(&p, &p, &asr, &cfg, 9).unwrap();
        let b = run_dyna(&p, &p, &asr, &cfg, 9).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn zero_reward_environment_gives_zero_return() {
        let (_, mut p) = steering_toy();
        p.c_s_to_r.fill(0.0);
        p.var_eps = 0.0;
        let r = evaluate_random(&p, &[vec![-1.0], vec![1.0]], 5, 20, 1).unwrap();
        assert_eq!((r.mean, r.std_err), (0.0, 0.0));
    }

    #[test]
    fn state_independent_reward_curve_is_flat_at_mean() {
        // Reward is pure noise, so every policy has mean return 0.
        let (_, mut p) = steering_toy();
        p.c_s_to_r.fill(0.0);
        let asr: IndexSet = [0].into_iter().collect();
        let cfg = PolicyConfig {
            episodes: 200,
            horizon: 20,
            ..quick_cfg()
        };
        let run = run_model_free(&p, &p, &asr, &cfg, 2).unwrap();
        let mean = run.curve.iter().map(|c| c.ret).sum::<f64>() / 200.0;
        let se = (p.var_eps * 20.0 / 200.0).sqrt();
        assert!(mean.abs() < 4.0 * se, "{mean}");
    }

    #[test]
    fn steering_policy_matches_oracle_sign() {
        let (_, p) = steering_toy();
        let asr: IndexSet = [0].into_iter().collect();
        let cfg = PolicyConfig {
            episodes: 60,
            ..quick_cfg()
        };
        let run = run_model_free(&p, &p, &asr, &cfg, 4).unwrap();
        let oracle = AnalyticQ::new(&p, &cfg.action_set, cfg.gamma).unwrap().best_action();
        // Decision states from a fresh rollout of the true environment.
        let traj = crate::env::simulate(&p, 500, 77, None).unwrap();
        let mut filter = OnlineFilter::new(p.clone()).unwrap();
        let mut agree = 0;
        for t in 0..traj.actions.len() {
            let b = filter.observe(&traj.observations[t]).unwrap().clone();
            let phi = run.policy.features.features(&run.policy.features.input(&b));
            agree += (run.policy.q.greedy(&phi) == oracle) as usize;
            filter.observe_reward(traj.rewards[t], &traj.actions[t]).unwrap();
            filter.advance(&traj.actions[t]).unwrap();
        }
        assert!(agree as f64 >= 0.95 * traj.actions.len() as f64, "{agree}");
    }

    #[test]
    fn planning_converges_to_value_iteration_fixed_point() {
        let mut p = LinearModelParams::zeros(2, 2, 1);
        p.c_s = Mat::from_row_slice(2, 2, &[0.6, 0.0, 0.2, 0.5]);
        p.c_a_to_s = Mat::from_row_slice(1, 2, &[0.5, -0.3]);
        p.c_s_to_r = Vector::from_vec(vec![1.0, -0.5]);
        p.c_a_to_r = Vector::from_vec(vec![0.2]);
        p.c_s_to_o = Mat::identity(2, 2);
        p.cov_e = Mat::identity(2, 2);
        p.var_eps = 1.0;
        p.cov_a = Mat::identity(1, 1);
        let actions = vec![vec![-1.0], vec![1.0]];
        let avec: Vec<Vector> = actions.iter().map(|a| Vector::from_vec(a.clone())).collect();
        let gamma = 0.8;
        let mut model = ImaginationModel::from_params(&p, &[0, 1]).unwrap();
        model.noise_chol.fill(0.0);
        model.reward_sd = 0.0;
        let features = FeatureMap {
            asr: vec![0, 1],
            degree: 1,
            include_variance: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let buffer: VecDeque<TransitionRecord> = (0..400)
            .map(|i| {
                let s = Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
                TransitionRecord {
                    s_asr: s.clone(),
                    s_full: s.clone(),
                    action: i % 2,
                    reward: 0.0,
                    next_s_asr: s,
                    done: false,
                }
            })
            .collect();
        let mut q = QFunction::zeros(2, 3);
        for _ in 0..400 {
            plan(&mut q, &model, &features, &buffer, &avec, gamma, 0.02, 1000, &mut rng).unwrap();
        }
        let oracle = AnalyticQ::new(&p, &actions, gamma).unwrap();
        for a in 0..2 {
            assert!((q.weights[a][0] - oracle.action_values[a] - oracle.constant).abs() < 1e-3);
            for i in 0..2 {
                assert!((q.weights[a][1 + i] - oracle.state_weights[i]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn imagined_mean_matches_model() {
        let (_, p) = steering_toy();
        let model = ImaginationModel::from_params(&p, &[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Vector::from_vec(vec![0.8, -1.2]);
        let a = Vector::from_vec(vec![1.0]);
        let n = 100_000;
        let mut mean = 0.0;
        for _ in 0..n {
            mean += imagine_step(&model, &s.rows(0, 1).into_owned(), &s, &a, &mut rng).unwrap().0[0] / n as f64;
        }
        let expect = (p.c_s.transpose() * &s + p.c_a_to_s.transpose() * &a)[0];
        assert!((mean - expect).abs() < 0.02);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let x = Vector::from_vec(vec![0.1]);
        assert_eq!(
            imagine_step(&model, &x, &s, &a, &mut r1).unwrap(),
            imagine_step(&model, &x, &s, &a, &mut r2).unwrap()
        );
    }

    #[test]
    fn zero_model_imagines_zero() {
        let p = LinearModelParams::zeros(2, 2, 1);
        let mut model = ImaginationModel::from_params(&p, &[1]).unwrap();
        model.noise_chol.fill(0.0);
        model.reward_sd = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (next, r) = imagine_step(&model, &Vector::from_vec(vec![3.0]), &Vector::zeros(2), &Vector::from_vec(vec![1.0]), &mut rng).unwrap();
        assert_eq!((next[0], r), (0.0, 0.0));
    }

    #[test]
    fn refit_recovers_belief_dynamics() {
        let (_, p) = steering_toy();
        let asr: IndexSet = [0].into_iter().collect();
        let cfg = PolicyConfig {
            epsilon_start: 1.0,
            epsilon_end: 1.0,
            replay_capacity: 100_000,
            ..quick_cfg()
        };
        let mut env = LinearEnv::new(p.clone(), 1).unwrap();
        let run = run_on_env(&mut env, &p, &asr, &cfg, 1, 0).unwrap();
        assert_eq!(run.curve.len(), 30);
        // Rebuild a buffer from random play and refit: the reward weights
        // must match the true reward equation.
        let mut filter = OnlineFilter::new(p.clone()).unwrap();
        let traj = crate::env::simulate(&p, 20_000, 5, Some(&mut |t: usize, _: &Vector| {
            Vector::from_element(1, if t % 3 == 0 { 1.0 } else { -1.0 })
        }))
        .unwrap();
        let mut buffer = VecDeque::new();
        for t in 0..traj.actions.len() {
            let b = filter.observe(&traj.observations[t]).unwrap().clone();
            filter.observe_reward(traj.rewards[t], &traj.actions[t]).unwrap();
            filter.advance(&traj.actions[t]).unwrap();
            let nb = crate::belief::predict(&p, &b, &traj.actions[t]);
            buffer.push_back(TransitionRecord {
                s_asr: Vector::from_element(1, b.mean[0]),
                s_full: b.mean.clone(),
                action: (traj.actions[t][0] > 0.0) as usize,
                reward: traj.rewards[t],
                next_s_asr: Vector::from_element(1, nb.mean[0]),
                done: false,
            });
        }
        let actions = vec![Vector::from_element(1, -1.0), Vector::from_element(1, 1.0)];
        let mut model = ImaginationModel::from_params(&p, &[0]).unwrap();
        assert!(model.refit(&buffer, &actions).unwrap());
        assert!((model.reward[0] - 1.0).abs() < 0.05, "{}", model.reward);
        assert!(model.reward[1].abs() < 0.05);
    }

    #[test]
    fn rejects_bad_configs() {
        let (_, p) = steering_toy();
        let asr: IndexSet = [0].into_iter().collect();
        let empty = PolicyConfig {
            action_set: vec![],
            ..quick_cfg()
        };
        assert!(run_model_free(&p, &p, &asr, &empty, 0).is_err());
        assert!(run_model_free(&p, &p, &IndexSet::new(), &quick_cfg(), 0).is_err());
    }

    #[test]
    fn divergent_learning_rate_is_reported() {
        let (_, p) = steering_toy();
        let asr: IndexSet = [0, 1].into_iter().collect();
        let cfg = PolicyConfig {
            learning_rate: 50.0,
            feature_degree: 2,
            ..quick_cfg()
        };
        assert!(matches!(
            run_model_free(&p, &p, &asr, &cfg, 0),
            Err(AsrError::QDivergence { .. })
        ));
    }

    #[test]
    fn policy_json_round_trip() {
        let (_, p) = steering_toy();
        let asr: IndexSet = [0].into_iter().collect();
        let run = run_model_free(&p, &p, &asr, &PolicyConfig { episodes: 2, ..quick_cfg() }, 0).unwrap();
        let back = QPolicy::from_json(&run.policy.to_json()).unwrap();
        assert_eq!(back, run.policy);
    }

    #[test]
    fn evaluation_is_pure() {
        let (_, p) = steering_toy();
        let asr: IndexSet = [0].into_iter().collect();
        let run = run_model_free(&p, &p, &asr, &quick_cfg(), 0).unwrap();
        let a = evaluate(&run.policy, &p, 5, 30, 11).unwrap();
        let b = evaluate(&run.policy, &p, 5, 30, 11).unwrap();
        assert_eq!(a, b);
    }
}
