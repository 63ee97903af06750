use serde::{Deserialize, Serialize};

use crate::env::LinearModelParams;
use crate::error::{AsrError, Result};
use crate::graph::{asr_indices, IndexSet, StructuralGraph};
use crate::linalg::{serde_vec, Mat, Vector};

/// Regularization weights, named after their role in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    /// Transition KL.
    #[serde(rename = "lambda1")]
    pub kl: f64,
    /// `‖σ(gate)‖₁`.
    #[serde(rename = "lambda2")]
    pub gate_l1: f64,
    /// Sufficiency minus complement information.
    #[serde(rename = "lambda3")]
    pub suff: f64,
    /// `‖Ď − σ(gate)‖₁`.
    #[serde(rename = "lambda4")]
    pub gate_coupling: f64,
    #[serde(rename = "lambda5")]
    pub obs: f64,
    #[serde(rename = "lambda6")]
    pub reward: f64,
    #[serde(rename = "lambda7")]
    pub transition: f64,
    #[serde(rename = "lambda8")]
    pub action: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            kl: 1.0,
            gate_l1: 1.0,
            suff: 1.0,
            gate_coupling: 1.0,
            obs: 1.0,
            reward: 6.0,
            transition: 10.0,
            action: 0.1,
        }
    }
}

impl Lambdas {
    pub fn zero() -> Self {
        Lambdas {
            kl: 0.0,
            gate_l1: 0.0,
            suff: 0.0,
            gate_coupling: 0.0,
            obs: 0.0,
            reward: 0.0,
            transition: 0.0,
            action: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kl,
            self.gate_l1,
            self.suff,
            self.gate_coupling,
            self.obs,
            self.reward,
            self.transition,
            self.action,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(AsrError::invalid("lambdas must be finite and non-negative"))
        }
    }
}

/// Default discount for the cumulative reward in the sufficiency terms.
pub const DEFAULT_GAMMA: f64 = 0.99;

/// `⌈log 0.01 / log γ⌉`, at least 1.
pub fn default_horizon(gamma: f64) -> usize {
    if gamma <= 0.0 {
        1
    } else if gamma >= 1.0 {
        usize::MAX
    } else {
        ((0.01f64).ln() / gamma.ln()).ceil().max(1.0) as usize
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Coefficient magnitude above which an edge counts as present.
pub const SUPPORT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnableModel {
    /// Coefficients and noise levels; `cov_e` is kept diagonal and `cov_a`
    /// is taken from the data.
    pub params: LinearModelParams,
    /// Gate logits; `σ(gate)` is the soft ASR indicator.
    #[serde(with = "serde_vec")]
    pub gate: Vector,
    pub lambdas: Lambdas,
    pub gamma: f64,
    pub horizon: usize,
    /// Structurally derived ASR set, held fixed between recomputations.
    pub structural_asr: IndexSet,
}

/// Offsets of each parameter block in the flat trainable vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub d_s: usize,
    pub d_o: usize,
    pub d_a: usize,
}

/// Parameter groups in flat-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    CsToO,
    CsToR,
    CaToR,
    Cs,
    CaToS,
    LogVarE,
    LogVarEps,
    Gate,
}

impl Layout {
    pub fn of(p: &LinearModelParams) -> Self {
        Layout {
            d_s: p.d_s(),
            d_o: p.d_o(),
            d_a: p.d_a(),
        }
    }

    pub const BLOCKS: [Block; 8] = [
        Block::CsToO,
        Block::CsToR,
        Block::CaToR,
        Block::Cs,
        Block::CaToS,
        Block::LogVarE,
        Block::LogVarEps,
        Block::Gate,
    ];

    pub fn size(&self, b: Block) -> usize {
        let Layout { d_s, d_o, d_a } = *self;
        match b {
            Block::CsToO => d_s * d_o,
            Block::CsToR => d_s,
            Block::CaToR => d_a,
            Block::Cs => d_s * d_s,
            Block::CaToS => d_a * d_s,
            Block::LogVarE => d_o,
            Block::LogVarEps => 1,
            Block::Gate => d_s,
        }
    }

    pub fn offset(&self, b: Block) -> usize {
        Self::BLOCKS
            .iter()
            .take_while(|&&x| x != b)
            .map(|&x| self.size(x))
            .sum()
    }

    pub fn len(&self) -> usize {
        Self::BLOCKS.iter().map(|&b| self.size(b)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_of(&self, index: usize) -> Block {
        let mut off = 0;
        for &b in &Self::BLOCKS {
            off += self.size(b);
            if index < off {
                return b;
            }
        }
        panic!("index {index} beyond parameter vector of length {}", self.len())
    }
}

/// Lower bound on learned noise variances.
pub const MIN_LOG_VAR: f64 = -13.8;

fn write_mat(out: &mut [f64], m: &Mat) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
}

fn read_mat(src: &[f64], r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |i, j| src[i * c + j])
}

impl LearnableModel {
    pub fn new(params: LinearModelParams, lambdas: Lambdas, gamma: f64, horizon: usize) -> Result<Self> {
        params.validate()?;
        lambdas.validate()?;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(AsrError::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if horizon == 0 {
            return Err(AsrError::invalid("horizon must be positive"));
        }
        let d_s = params.d_s();
        let mut params = params;
        params.cov_e = Mat::from_diagonal(&params.cov_e.diagonal().map(|v| v.max(MIN_LOG_VAR.exp())));
        params.var_eps = params.var_eps.max(MIN_LOG_VAR.exp());
        let mut model = LearnableModel {
            params,
            gate: Vector::zeros(d_s),
            lambdas,
            gamma,
            horizon,
            structural_asr: IndexSet::new(),
        };
        model.refresh_structure();
        Ok(model)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: LearnableModel = serde_json::from_str(text)?;
        m.params.validate()?;
        m.lambdas.validate()?;
        if m.gate.len() != m.params.d_s() {
            return Err(AsrError::DimensionMismatch {
                what: "gate",
                expected: m.params.d_s(),
                got: m.gate.len(),
            });
        }
        if m.structural_asr.iter().any(|&i| i >= m.params.d_s()) {
            return Err(AsrError::invalid("structural ASR index out of range"));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn layout(&self) -> Layout {
        Layout::of(&self.params)
    }

    pub fn gate_weights(&self) -> Vector {
        self.gate.map(sigmoid)
    }

    /// Dimensions whose gate exceeds one half.
    pub fn hard_gate(&self) -> IndexSet {
        self.gate_weights()
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    /// Graph of coefficients whose magnitude exceeds `threshold`.
    pub fn learned_graph(&self, threshold: f64) -> StructuralGraph {
        support_graph(&self.params, threshold)
    }

    /// Recomputes the structural ASR set from thresholded supports.
    pub fn refresh_structure(&mut self) {
        self.structural_asr = asr_indices(&self.learned_graph(SUPPORT_THRESHOLD));
    }

    pub fn to_vec(&self) -> Vector {
        let l = self.layout();
        let mut v = vec![0.0; l.len()];
        let p = &self.params;
        write_mat(&mut v[l.offset(Block::CsToO)..], &p.c_s_to_o);
        v[l.offset(Block::CsToR)..][..l.d_s].copy_from_slice(p.c_s_to_r.as_slice());
        v[l.offset(Block::CaToR)..][..l.d_a].copy_from_slice(p.c_a_to_r.as_slice());
        write_mat(&mut v[l.offset(Block::Cs)..], &p.c_s);
        write_mat(&mut v[l.offset(Block::CaToS)..], &p.c_a_to_s);
        for i in 0..l.d_o {
            v[l.offset(Block::LogVarE) + i] = p.cov_e[(i, i)].ln();
        }
        v[l.offset(Block::LogVarEps)] = p.var_eps.ln();
        v[l.offset(Block::Gate)..][..l.d_s].copy_from_slice(self.gate.as_slice());
        Vector::from_vec(v)
    }

    pub fn set_vec(&mut self, v: &Vector) {
        let l = self.layout();
        assert_eq!(v.len(), l.len(), "parameter vector length");
        let s = v.as_slice();
        let p = &mut self.params;
        p.c_s_to_o = read_mat(&s[l.offset(Block::CsToO)..], l.d_s, l.d_o);
        p.c_s_to_r = Vector::from_column_slice(&s[l.offset(Block::CsToR)..][..l.d_s]);
        p.c_a_to_r = Vector::from_column_slice(&s[l.offset(Block::CaToR)..][..l.d_a]);
        p.c_s = read_mat(&s[l.offset(Block::Cs)..], l.d_s, l.d_s);
        p.c_a_to_s = read_mat(&s[l.offset(Block::CaToS)..], l.d_a, l.d_s);
        p.cov_e = Mat::from_diagonal(&Vector::from_iterator(
            l.d_o,
            (0..l.d_o).map(|i| s[l.offset(Block::LogVarE) + i].max(MIN_LOG_VAR).exp()),
        ));
        p.var_eps = s[l.offset(Block::LogVarEps)].max(MIN_LOG_VAR).exp();
        self.gate = Vector::from_column_slice(&s[l.offset(Block::Gate)..][..l.d_s]);
    }

    /// L1 weight attached to each flat parameter (zero when unpenalized).
    pub fn l1_weights(&self) -> Vector {
        let l = self.layout();
        let lam = &self.lambdas;
        Vector::from_iterator(
            l.len(),
            (0..l.len()).map(|i| match l.block_of(i) {
                Block::CsToO => lam.obs,
                Block::CsToR => lam.reward,
                Block::Cs => lam.transition,
                Block::CaToS => lam.action,
                _ => 0.0,
            }),
        )
    }
}

/// Graph with an edge wherever the coefficient magnitude exceeds `threshold`.
pub fn support_graph(p: &LinearModelParams, threshold: f64) -> StructuralGraph {
    let (d_s, d_a) = (p.d_s(), p.d_a());
    let mut g = StructuralGraph::empty(d_s, d_a).expect("validated params have positive dimensions");
    for i in 0..d_s {
        for j in 0..d_s {
            // c_s[(j, i)] is the weight of s_j,t-1 in s_i,t.
            g.set_s_to_s(j, i, p.c_s[(j, i)].abs() > threshold);
        }
        for k in 0..d_a {
            g.set_a_to_s(k, i, p.c_a_to_s[(k, i)].abs() > threshold);
        }
        g.set_s_to_r(i, p.c_s_to_r[i].abs() > threshold);
        g.set_s_to_o(i, (0..p.d_o()).any(|o| p.c_s_to_o[(i, o)].abs() > threshold));
    }
    for k in 0..d_a {
        g.set_a_to_r(k, p.c_a_to_r[k].abs() > threshold);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::tests::random_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_vector_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_model(&mut rng, 3, 2, 2);
        p.cov_e = Mat::from_diagonal(&Vector::from_vec(vec![0.3, 0.7]));
        let mut m = LearnableModel::new(p, Lambdas::default(), 0.9, 10).unwrap();
        m.gate = Vector::from_vec(vec![0.1, -2.0, 3.0]);
        let v = m.to_vec();
        assert_eq!(v.len(), m.layout().len());
        let mut n = m.clone();
        n.set_vec(&v);
        assert!((n.to_vec() - &v).amax() < 1e-14);
        assert_eq!(m.layout().block_of(0), Block::CsToO);
        assert_eq!(m.layout().block_of(v.len() - 1), Block::Gate);
    }

    #[test]
    fn horizon_rule() {
        assert_eq!(default_horizon(0.99), 459);
        assert_eq!(default_horizon(0.5), 7);
        assert_eq!(default_horizon(0.0), 1);
    }

    #[test]
    fn lambdas_json_names() {
        let text = serde_json::to_string(&Lambdas::default()).unwrap();
        assert!(text.contains("\"lambda6\":6.0") && text.contains("\"lambda8\":0.1"));
        let bad = text.replace("\"lambda1\":1.0", "\"lambda1\":-1.0");
        let parsed: Lambdas = serde_json::from_str(&bad).unwrap();
        assert!(parsed.validate().is_err());
    }

    #[test]
    fn support_graph_of_figure1_params() {
        let g = StructuralGraph::figure1();
        let mut p = LinearModelParams::zeros(3, 2, 1);
        for i in 0..3 {
            for j in 0..3 {
                if g.s_to_s(j, i) {
                    p.c_s[(j, i)] = 0.5;
                }
            }
            if g.a_to_s(0, i) {
                p.c_a_to_s[(0, i)] = 0.5;
            }
            if g.s_to_r(i) {
                p.c_s_to_r[i] = 0.5;
            }
            p.c_s_to_o[(i, 0)] = 1.0;
        }
        p.c_a_to_r[0] = 0.5;
        assert_eq!(support_graph(&p, 0.1), g);
    }
}
