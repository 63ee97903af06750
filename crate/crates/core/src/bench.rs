//! Ground-truth benchmark models.
//!
//! Every coefficient on a present edge has magnitude in `[0.3, 0.9]` with a
//! random sign; reward couplings of state dimensions lie in `[0.5, 0.9]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::LinearModelParams;
use crate::error::{AsrError, Result};
use crate::graph::{asr_indices, StructuralGraph};
use crate::linalg::{Mat, Vector};

pub const BENCHMARKS: [&str; 4] = ["figure1", "random-d4", "random-d5-sparse", "steering-toy"];

/// Observation noise variance used by every benchmark.
pub const OBS_NOISE: f64 = 0.1;
pub const REWARD_NOISE: f64 = 0.1;

const MAX_DRAWS: usize = 10_000;

fn magnitude(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.random_range(lo..=hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Draws coefficients on the edges of `g` until the model is stationary and
/// passes the identifiability checks.
pub fn params_for_graph(g: &StructuralGraph, d_o: usize, rng: &mut ChaCha8Rng) -> Result<LinearModelParams> {
    let (d_s, d_a) = (g.d_s(), g.d_a());
    if d_o == 0 {
        return Err(AsrError::invalid("observation dimension must be positive"));
    }
    for _ in 0..MAX_DRAWS {
        let mut p = LinearModelParams::zeros(d_s, d_o, d_a);
        for j in 0..d_s {
            for i in 0..d_s {
                if g.s_to_s(j, i) {
                    p.c_s[(j, i)] = if i == j {
                        rng.random_range(0.3..=0.9)
                    } else {
                        magnitude(rng, 0.3, 0.9)
                    };
                }
            }
            if g.s_to_r(j) {
                p.c_s_to_r[j] = magnitude(rng, 0.5, 0.9);
            }
            if g.s_to_o(j) {
                for k in 0..d_o {
                    p.c_s_to_o[(j, k)] = magnitude(rng, 0.3, 0.9);
                }
            }
        }
        for k in 0..d_a {
            for i in 0..d_s {
                if g.a_to_s(k, i) {
                    p.c_a_to_s[(k, i)] = magnitude(rng, 0.3, 0.9);
                }
            }
            if g.a_to_r(k) {
                p.c_a_to_r[k] = magnitude(rng, 0.3, 0.9);
            }
        }
        p.cov_e = Mat::identity(d_o, d_o) * OBS_NOISE;
        p.var_eps = REWARD_NOISE;
        p.cov_a = Mat::identity(d_a, d_a);
        if p.spectral_radius() < 0.95 && p.check_identifiable().is_ok() {
            return Ok(p);
        }
    }
    Err(AsrError::invalid("could not draw a stationary identifiable model for this graph"))
}

/// Random graph with self-loops on every state, each other edge present with
/// probability `density`, and at least one state and one non-ASR state
/// when `d_s > 1`.
pub fn random_graph(d_s: usize, d_a: usize, density: f64, rng: &mut ChaCha8Rng) -> Result<StructuralGraph> {
    for _ in 0..MAX_DRAWS {
        let mut g = StructuralGraph::empty(d_s, d_a)?;
        for j in 0..d_s {
            for i in 0..d_s {
                g.set_s_to_s(j, i, i == j || rng.random_bool(density));
            }
            g.set_s_to_r(j, rng.random_bool(density));
            g.set_s_to_o(j, true);
        }
        for k in 0..d_a {
            for i in 0..d_s {
                g.set_a_to_s(k, i, rng.random_bool(density));
            }
            g.set_a_to_r(k, true);
        }
        let asr = asr_indices(&g);
        if !asr.is_empty() && (d_s == 1 || asr.len() < d_s) {
            return Ok(g);
        }
    }
    Err(AsrError::invalid("could not draw a random graph"))
}

/// Two states: `s1` feeds the reward and is steered by the action with
/// coefficient 0.5, `s2` is a self-driven distractor.
pub fn steering_toy() -> (StructuralGraph, LinearModelParams) {
    let mut g = StructuralGraph::empty(2, 1).expect("positive dimensions");
    g.set_s_to_s(0, 0, true);
    g.set_s_to_s(1, 1, true);
    g.set_a_to_s(0, 0, true);
    g.set_s_to_r(0, true);
    g.set_s_to_o(0, true);
    g.set_s_to_o(1, true);
    let mut p = LinearModelParams::zeros(2, 2, 1);
    p.c_s = Mat::from_row_slice(2, 2, &[0.7, 0.0, 0.0, 0.8]);
    p.c_a_to_s = Mat::from_row_slice(1, 2, &[0.5, 0.0]);
    p.c_s_to_r = Vector::from_vec(vec![1.0, 0.0]);
    p.c_s_to_o = Mat::from_row_slice(2, 2, &[1.0, 0.3, 0.4, 1.0]);
    p.cov_e = Mat::identity(2, 2) * OBS_NOISE;
    p.var_eps = REWARD_NOISE;
    p.cov_a = Mat::identity(1, 1);
    (g, p)
}

/// Graph and ground-truth parameters for a named benchmark.
pub fn benchmark_model(name: &str, seed: u64) -> Result<(StructuralGraph, LinearModelParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "figure1" => {
            let g = StructuralGraph::figure1();
            let p = params_for_graph(&g, 3, &mut rng)?;
            Ok((g, p))
        }
        "random-d4" => {
            let g = random_graph(4, 1, 0.4, &mut rng)?;
            let p = params_for_graph(&g, 4, &mut rng)?;
            Ok((g, p))
        }
        "random-d5-sparse" => {
            let g = random_graph(5, 1, 0.2, &mut rng)?;
            let p = params_for_graph(&g, 5, &mut rng)?;
            Ok((g, p))
        }
        "steering-toy" => Ok(steering_toy()),
        other => Err(AsrError::UnknownBenchmark(other.to_string())),
    }
}
