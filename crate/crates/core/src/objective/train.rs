//! Proximal gradient ascent on the objective.
//!
//! Each iteration recomputes the smoothing posterior on a minibatch, then
//! takes a few backtracking proximal steps on the coefficients and plain
//! backtracking steps on the gate with that posterior held fixed. Every
//! `rotation_every` iterations a sweep of Givens rotations moves the latent
//! basis toward sparser coefficients; the likelihood and KL terms are
//! invariant under such rotations, so only the penalties and the
//! sufficiency term decide the sweep.

use std::f64::consts::FRAC_PI_4;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::loss::{posterior, sparsity_terms, LossBreakdown, SuffBase, SuffVariant, Surrogate};
use super::model::{Block, LearnableModel, SUPPORT_THRESHOLD};
use crate::env::{LinearModelParams, Trajectory, TrajectoryBatch};
use crate::error::{AsrError, Result};
use crate::graph::IndexSet;
use crate::identify::IdentifiedParams;
use crate::linalg::{spectral_radius, Mat, Vector};

/// Largest spectral radius a training step may produce.
pub const MAX_SPECTRAL_RADIUS: f64 = 0.999;

const MAX_HALVINGS: usize = 40;

/// Gate logits are kept in `[−B, B]` so the sigmoid never saturates and the
/// gate can follow later changes of the structural indicator.
pub const GATE_LOGIT_BOUND: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Initial per-step coefficient step size; 0 leaves the model unchanged.
    pub learning_rate: f64,
    /// Initial per-step gate step size.
    pub gate_learning_rate: f64,
    /// Window length for minibatches; 0 uses whole episodes.
    pub window_len: usize,
    /// Windows per minibatch (ignored when `window_len` is 0).
    pub windows: usize,
    /// Proximal steps per posterior refresh.
    pub inner_steps: usize,
    /// Givens sweep period in iterations; 0 disables sweeps.
    pub rotation_every: usize,
    /// Period for recomputing the structural ASR indicator.
    pub structure_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 200,
            learning_rate: 1.0,
            gate_learning_rate: 1.0,
            window_len: 0,
            windows: 4,
            inner_steps: 5,
            rotation_every: 20,
            structure_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(AsrError::invalid("learning_rate must be finite and nonnegative"));
        }
        if !(self.gate_learning_rate >= 0.0 && self.gate_learning_rate.is_finite()) {
            return Err(AsrError::invalid("gate_learning_rate must be finite and nonnegative"));
        }
        if self.window_len > 0 && self.windows == 0 {
            return Err(AsrError::invalid("windows must be positive when window_len is set"));
        }
        if self.structure_every == 0 {
            return Err(AsrError::invalid("structure_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    /// Exponential moving average of `total / steps`.
    pub smoothed_total: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LearnableModel,
    pub history: Vec<HistoryRow>,
    /// Final gate thresholded at one half.
    pub learned_asr: IndexSet,
}

/// Writes the loss history as CSV.
pub fn write_history_csv<W: Write>(history: &[HistoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "recon_o",
        "recon_r",
        "pred_o",
        "pred_r",
        "kl_transition",
        "suff_minus",
        "sparsity",
        "total",
        "smoothed_total",
        "steps",
    ])?;
    for h in history {
        let l = &h.loss;
        w.write_record(
            std::iter::once(h.iteration.to_string())
                .chain(
                    [
                        l.recon_o,
                        l.recon_r,
                        l.pred_o,
                        l.pred_r,
                        l.kl_transition,
                        l.suff_minus,
                        l.sparsity,
                        l.total,
                        h.smoothed_total,
                    ]
                    .iter()
                    .map(|v| v.to_string()),
                )
                .chain(std::iter::once(h.steps.to_string())),
        )?;
    }
    w.flush()?;
    Ok(())
}

fn sample_minibatch(data: &TrajectoryBatch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> TrajectoryBatch {
    if cfg.window_len == 0 {
        return data.clone();
    }
    (0..cfg.windows)
        .map(|_| {
            let traj = &data[rng.random_range(0..data.len())];
            let len = cfg.window_len.min(traj.len());
            let start = rng.random_range(0..=traj.len() - len);
            traj.window(start, len)
        })
        .collect()
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

fn acceptable(model: &LearnableModel) -> bool {
    spectral_radius(&model.params.c_s) < MAX_SPECTRAL_RADIUS
}

/// One backtracking step on the coordinates selected by `mask`; returns the
/// new objective value and updates `step` for the next call.
fn prox_step(
    model: &mut LearnableModel,
    sur: &Surrogate,
    current: f64,
    grad: &Vector,
    mask: &[bool],
    bound: f64,
    step: &mut f64,
) -> Result<f64> {
    let theta = model.to_vec();
    let l1 = model.l1_weights();
    let mut probe = model.clone();
    let mut t = *step;
    for _ in 0..MAX_HALVINGS {
        let mut cand = theta.clone();
        for i in 0..theta.len() {
            if !mask[i] {
                continue;
            }
            // `grad` carries the L1 subgradient; the smooth part adds it back.
            let smooth = grad[i] + l1[i] * theta[i].signum() * (theta[i] != 0.0) as u8 as f64;
            cand[i] = soft_threshold(theta[i] + t * smooth, t * l1[i]).clamp(-bound, bound);
        }
        probe.set_vec(&cand);
        if acceptable(&probe) {
            if let Ok((l, _)) = sur.eval(&probe, false) {
                if l.total.is_finite() && l.total >= current {
                    *model = probe;
                    *step = t * 2.0;
                    return Ok(l.total);
                }
            }
        }
        t *= 0.5;
    }
    *step = t;
    Ok(current)
}

/// Orthogonal rotation in the `(i, j)` plane.
pub fn givens(d: usize, i: usize, j: usize, angle: f64) -> Mat {
    let mut u = Mat::identity(d, d);
    let (s, c) = angle.sin_cos();
    u[(i, i)] = c;
    u[(j, j)] = c;
    u[(i, j)] = -s;
    u[(j, i)] = s;
    u
}

/// The part of the objective that depends on the latent basis.
fn basis_score(model: &LearnableModel, base: Option<&SuffBase>) -> Result<f64> {
    let suff = match base {
        Some(b) if model.lambdas.suff > 0.0 => {
            let (t, _) = b.evaluate(&model.gate_weights(), SuffVariant::Reward)?;
            t.difference()
        }
        _ => 0.0,
    };
    Ok(model.lambdas.suff * suff - sparsity_terms(model).sum())
}

/// Sweeps all coordinate planes once, keeping each rotation that raises the
/// basis-dependent score. Returns the total gain.
pub fn rotation_sweep(model: &mut LearnableModel, base: Option<&SuffBase>) -> Result<f64> {
    let d = model.params.d_s();
    let mut gain = 0.0;
    let mut base = base.cloned();
    let grid = 24;
    for i in 0..d {
        for j in (i + 1)..d {
            let score_at = |angle: f64| -> Result<(f64, LearnableModel, Mat)> {
                let u = givens(d, i, j, angle);
                let mut m = model.clone();
                m.params = model.params.rotate(&u)?;
                let b = base.as_ref().map(|b| b.rotated(&u));
                Ok((basis_score(&m, b.as_ref())?, m, u))
            };
            let start = basis_score(model, base.as_ref())?;
            let mut best = (start, 0.0);
            for k in 1..=grid {
                let angle = -FRAC_PI_4 + k as f64 * 2.0 * FRAC_PI_4 / grid as f64;
                let (s, _, _) = score_at(angle)?;
                if s > best.0 {
                    best = (s, angle);
                }
            }
            // Golden-section refinement around the best grid point.
            let width = 2.0 * FRAC_PI_4 / grid as f64;
            let (mut lo, mut hi) = (best.1 - width, best.1 + width);
            let phi = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..30 {
                let a = hi - phi * (hi - lo);
                let b = lo + phi * (hi - lo);
                let (sa, _, _) = score_at(a)?;
                let (sb, _, _) = score_at(b)?;
                if sa > best.0 {
                    best = (sa, a);
                }
                if sb > best.0 {
                    best = (sb, b);
                }
                if sa > sb {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            if best.1 != 0.0 && best.0 > start + 1e-9 {
                let (s, m, u) = score_at(best.1)?;
                gain += s - start;
                *model = m;
                base = base.map(|b| b.rotated(&u));
            }
        }
    }
    Ok(gain)
}

fn divergence(iteration: usize) -> impl Fn(AsrError) -> AsrError {
    move |e| AsrError::Divergence {
        iteration,
        detail: e.to_string(),
    }
}

fn step_count(batch: &TrajectoryBatch) -> usize {
    batch.iter().map(Trajectory::len).sum::<usize>().max(1)
}

pub fn train(model: LearnableModel, data: &TrajectoryBatch, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(AsrError::invalid("training data is empty"));
    }
    for traj in data {
        traj.validate()?;
        if traj.d_o() != model.params.d_o() || traj.d_a() != model.params.d_a() {
            return Err(AsrError::DimensionMismatch {
                what: "trajectory",
                expected: model.params.d_o(),
                got: traj.d_o(),
            });
        }
    }
    model.params.ensure_stationary()?;
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = model.layout();
    let gate_off = layout.offset(Block::Gate);
    let coef_mask: Vec<bool> = (0..layout.len()).map(|i| i < gate_off).collect();
    let gate_mask: Vec<bool> = (0..layout.len()).map(|i| i >= gate_off).collect();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut smoothed: Option<f64> = None;
    let mut step = f64::NAN;
    let mut gate_step = f64::NAN;

    for it in 0..cfg.iterations {
        if it > 0 && it % cfg.structure_every == 0 {
            model.refresh_structure();
        }
        let batch = sample_minibatch(data, cfg, &mut rng);
        let n = step_count(&batch);
        if step.is_nan() {
            step = cfg.learning_rate / n as f64;
            gate_step = cfg.gate_learning_rate;
        }
        let post = posterior(&model, &batch).map_err(divergence(it))?;
        let sur = Surrogate::build(&model, &batch, &post).map_err(divergence(it))?;
        let (loss, _) = sur.eval(&model, false).map_err(divergence(it))?;
        if !loss.total.is_finite() {
            return Err(AsrError::Divergence {
                iteration: it,
                detail: "objective is not finite".into(),
            });
        }
        let per_step = loss.total / n as f64;
        let s = smoothed.map_or(per_step, |s| 0.9 * s + 0.1 * per_step);
        smoothed = Some(s);
        history.push(HistoryRow {
            iteration: it,
            loss,
            smoothed_total: s,
            steps: n,
        });
        if cfg.learning_rate == 0.0 && cfg.gate_learning_rate == 0.0 {
            continue;
        }
        let mut current = loss.total;
        for _ in 0..cfg.inner_steps {
            let (_, grad) = sur.eval(&model, true).map_err(divergence(it))?;
            let grad = grad.expect("gradient requested");
            if cfg.learning_rate > 0.0 {
                current = prox_step(&mut model, &sur, current, &grad, &coef_mask, f64::INFINITY, &mut step)?;
            }
            if cfg.gate_learning_rate > 0.0 {
                let (_, grad) = sur.eval(&model, true).map_err(divergence(it))?;
                let grad = grad.expect("gradient requested");
                current = prox_step(&mut model, &sur, current, &grad, &gate_mask, GATE_LOGIT_BOUND, &mut gate_step)?;
            }
        }
        if cfg.learning_rate > 0.0 && cfg.rotation_every > 0 && (it + 1) % cfg.rotation_every == 0 {
            rotation_sweep(&mut model, sur.suff_base()).map_err(divergence(it))?;
        }
    }
    let learned_asr = model.hard_gate();
    Ok(TrainOutput {
        model,
        history,
        learned_asr,
    })
}

/// A starting point from identified moments: diagonal observation noise and
/// a transition pulled inside the stable region when needed.
pub fn init_from_identified(id: &IdentifiedParams) -> Result<LinearModelParams> {
    let mut p = id.implied_params()?;
    p.cov_e = Mat::from_diagonal(&p.cov_e.diagonal().map(|v| v.max(1e-3)));
    p.var_eps = p.var_eps.max(1e-3);
    let rho = spectral_radius(&p.c_s);
    if rho >= 0.98 {
        p.c_s *= 0.98 / rho;
    }
    p.validate()?;
    Ok(p)
}

/// Random stable starting point.
pub fn random_init(d_s: usize, d_o: usize, cov_a: &Mat, seed: u64) -> Result<LinearModelParams> {
    let d_a = cov_a.nrows();
    if d_s == 0 || d_o == 0 || d_a == 0 {
        return Err(AsrError::invalid("dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |r: usize, c: usize, scale: f64| {
        Mat::from_fn(r, c, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
    };
    let mut c_s = normal(d_s, d_s, 0.3) + Mat::identity(d_s, d_s) * 0.3;
    let rho = spectral_radius(&c_s);
    if rho > 0.8 {
        c_s *= 0.8 / rho;
    }
    let p = LinearModelParams {
        c_s_to_o: normal(d_s, d_o, 0.5),
        c_s_to_r: normal(d_s, 1, 0.5).column(0).into_owned(),
        c_a_to_r: normal(d_a, 1, 0.5).column(0).into_owned(),
        c_s,
        c_a_to_s: normal(d_a, d_s, 0.5),
        cov_e: Mat::identity(d_o, d_o),
        var_eps: 1.0,
        cov_a: cov_a.clone(),
    };
    p.validate()?;
    Ok(p)
}

/// Fraction of entries whose magnitude exceeds [`SUPPORT_THRESHOLD`].
pub fn support_density(p: &LinearModelParams) -> f64 {
    let all: Vec<f64> = [&p.c_s_to_o, &p.c_s, &p.c_a_to_s]
        .iter()
        .flat_map(|m| m.iter().copied())
        .chain(p.c_s_to_r.iter().copied())
        .collect();
    all.iter().filter(|v| v.abs() > SUPPORT_THRESHOLD).count() as f64 / all.len() as f64
}
