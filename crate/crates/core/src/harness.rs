//! Reproducible experiments: config schema, stage seeds, the pipeline runner
//! and its report.
//!
//! Every stage reads its inputs back from the artifact files written by the
//! stages before it, so an artifact depends only on the config and on the
//! upstream files.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::benchmark_model;
use crate::env::{simulate_batch, LinearModelParams, TrajectoryBatch};
use crate::error::{AsrError, Result};
use crate::graph::{asr_indices, format_index_set, parse_index_set, StructuralGraph};
use crate::identify::{identify, identify_from_moments, IdentifiedParams, MomentSummary, DEFAULT_K_MAX};
use crate::io::{read_trajectories, write_trajectories};
use crate::linalg::max_abs;
use crate::objective::model::{default_horizon, DEFAULT_GAMMA};
use crate::objective::train::{init_from_identified, random_init, write_history_csv};
use crate::objective::{
    canonical_alignment, per_dimension_sufficiency, sufficiency_terms, support_f1, train, Lambdas,
    LearnableModel, LossBreakdown, TrainConfig,
};
use crate::policy::{evaluate, evaluate_oracle, evaluate_random, run_dyna, write_curve_csv, EvalResult, PolicyConfig, QPolicy};

/// Threshold on coefficient magnitudes for support comparisons.
pub const F1_THRESHOLD: f64 = 0.1;

/// Derives a stage's seed from the master seed: the first eight bytes
/// (little-endian) of `SHA-256(stage ":" master_le_bytes)`.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(b":");
    h.update(master.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvironmentSpec {
    /// A named benchmark; ground truth is regenerated from `(name, seed)`.
    Benchmark { name: String, seed: u64 },
    /// Ground truth given inline.
    Explicit {
        #[serde(default)]
        graph: Option<StructuralGraph>,
        params: LinearModelParams,
    },
    /// Ground truth read from files, relative to the config's directory.
    Files {
        #[serde(default)]
        graph: Option<PathBuf>,
        params: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub episodes: usize,
    pub steps: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            episodes: 10,
            steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationSpec {
    pub lags: usize,
    /// Latent dimension; defaults to the ground truth's.
    pub d_s: Option<usize>,
}

impl Default for IdentificationSpec {
    fn default() -> Self {
        IdentificationSpec { lags: 6, d_s: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitSpec {
    Identified,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningSpec {
    pub lambdas: Lambdas,
    pub gamma: f64,
    /// Return horizon; defaults to `⌈log 0.01 / log γ⌉`.
    pub horizon: Option<usize>,
    pub init: InitSpec,
    /// `train.seed` is replaced by the derived stage seed.
    pub train: TrainConfig,
}

impl Default for LearningSpec {
    fn default() -> Self {
        LearningSpec {
            lambdas: Lambdas::default(),
            gamma: DEFAULT_GAMMA,
            horizon: None,
            init: InitSpec::Identified,
            train: TrainConfig::default(),
        }
    }
}

impl LearningSpec {
    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or_else(|| default_horizon(self.gamma))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    pub config: PolicyConfig,
    pub eval_episodes: usize,
    /// 1-based ASR override in the learned basis; defaults to the learned gate.
    pub asr: Option<String>,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            config: PolicyConfig::default(),
            eval_episodes: 20,
            asr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub identification: IdentificationSpec,
    #[serde(default)]
    pub learning: LearningSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Loads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let EnvironmentSpec::Files { graph, params } = &mut cfg.environment {
            resolve(params);
            if let Some(g) = graph {
                resolve(g);
            }
        }
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.episodes == 0 || self.data.steps < 3 {
            return Err(AsrError::invalid("data needs at least one episode of 3 steps"));
        }
        if self.identification.lags < 2 {
            return Err(AsrError::invalid("identification needs at least 2 lags"));
        }
        if let EnvironmentSpec::Files { graph, params } = &self.environment {
            for p in std::iter::once(params).chain(graph.iter()) {
                if !p.exists() {
                    return Err(AsrError::invalid(format!("referenced file {} does not exist", p.display())));
                }
            }
        }
        self.learning.lambdas.validate()?;
        self.learning.train.validate()?;
        if !(0.0..1.0).contains(&self.learning.gamma) {
            return Err(AsrError::invalid("learning gamma must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Ground truth graph (when known) and parameters.
    pub fn ground_truth(&self) -> Result<(Option<StructuralGraph>, LinearModelParams)> {
        let (g, p) = match &self.environment {
            EnvironmentSpec::Benchmark { name, seed } => {
                let (g, p) = benchmark_model(name, *seed)?;
                (Some(g), p)
            }
            EnvironmentSpec::Explicit { graph, params } => (graph.clone(), params.clone()),
            EnvironmentSpec::Files { graph, params } => {
                let p = LinearModelParams::from_json(&fs::read_to_string(params)?)?;
                let g = match graph {
                    Some(path) => Some(StructuralGraph::from_json(&fs::read_to_string(path)?)?),
                    None => None,
                };
                (g, p)
            }
        };
        p.validate()?;
        p.ensure_stationary()?;
        if let Some(g) = &g {
            if g.d_s() != p.d_s() || g.d_a() != p.d_a() {
                return Err(AsrError::invalid("graph and parameter dimensions differ"));
            }
        }
        Ok((g, p))
    }
}

pub struct Benchmark {
    pub config: ExperimentConfig,
    pub graph: StructuralGraph,
    pub params: LinearModelParams,
}

/// A fully specified experiment for a named benchmark with the ground truth
/// inlined.
pub fn make_benchmark(name: &str, seed: u64) -> Result<Benchmark> {
    let (graph, params) = benchmark_model(name, seed)?;
    let gamma = 0.5;
    let config = ExperimentConfig {
        name: format!("{name}-{seed}"),
        seed,
        environment: EnvironmentSpec::Explicit {
            graph: Some(graph.clone()),
            params: params.clone(),
        },
        data: DataSpec::default(),
        identification: IdentificationSpec {
            lags: 6,
            d_s: Some(params.d_s()),
        },
        learning: LearningSpec {
            gamma,
            horizon: Some(default_horizon(gamma)),
            train: TrainConfig {
                iterations: 150,
                ..TrainConfig::default()
            },
            ..LearningSpec::default()
        },
        policy: PolicySpec {
            config: PolicyConfig {
                episodes: 50,
                action_set: vec![vec![-1.0; params.d_a()], vec![1.0; params.d_a()]],
                ..PolicyConfig::default()
            },
            ..PolicySpec::default()
        },
        output_dir: PathBuf::from(format!("runs/{name}-{seed}")),
    };
    Ok(Benchmark { config, graph, params })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    /// Largest absolute deviation from identification on exact population
    /// moments of the truth, per recovered quantity.
    pub errors: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiRow {
    pub set: String,
    pub asr_information: f64,
    pub complement_information: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    /// 1-based, from the true graph.
    pub true_asr: Option<String>,
    /// 1-based, learned gate in the learned basis.
    pub learned_asr: String,
    /// The learned set mapped through the signed-permutation alignment.
    pub learned_asr_in_truth_basis: Option<String>,
    pub structural_asr: String,
    pub gate_weights: Vec<f64>,
    pub support_f1: Option<f64>,
    pub alignment_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub asr: String,
    pub final_training_return: f64,
    pub real_steps: usize,
    pub greedy: EvalResult,
    pub random: EvalResult,
    pub oracle: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_hash: String,
    pub stage_seeds: BTreeMap<String, u64>,
    pub identification: IdentificationReport,
    pub asr: AsrReport,
    pub cmi: Vec<CmiRow>,
    pub final_loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicyReport>,
    /// Stage name to artifact file name within the output directory.
    pub artifacts: BTreeMap<String, Vec<String>>,
    /// Wall-clock per stage; the only field that varies between reruns.
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const STAGES: [&str; 6] = ["simulate", "identify", "asr", "learn", "train-policy", "eval"];

struct Runner<'a> {
    dir: &'a Path,
    artifacts: BTreeMap<String, Vec<String>>,
    timings: BTreeMap<String, f64>,
}

impl Runner<'_> {
    fn stage<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Vec<String>) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let mut files = Vec::new();
        let out = f(&mut files).map_err(|e| AsrError::Stage {
            stage,
            source: Box::new(e),
        });
        self.timings.insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
        self.artifacts.insert(stage.to_string(), files);
        out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn write(path: &Path, files: &mut Vec<String>, contents: &[u8]) -> Result<()> {
    fs::write(path, contents)?;
    files.push(path.file_name().expect("artifact has a file name").to_string_lossy().into_owned());
    Ok(())
}

fn read_batch(path: &Path) -> Result<TrajectoryBatch> {
    read_trajectories(BufReader::new(fs::File::open(path)?))
}

fn identification_errors(id: &IdentifiedParams, truth: &LinearModelParams, lags: usize) -> Result<BTreeMap<String, f64>> {
    let pop = identify_from_moments(&MomentSummary::population(truth, lags)?, id.d_s, lags.min(DEFAULT_K_MAX).max(2))?;
    let mut errors = BTreeMap::new();
    errors.insert("c_a_to_r".into(), (&id.c_a_to_r_hat - &pop.c_a_to_r_hat).amax());
    errors.insert("omega".into(), max_abs(&(&id.omega_hat - &pop.omega_hat)));
    errors.insert("noise".into(), max_abs(&(&id.cov_e_hat - &pop.cov_e_hat)));
    errors.insert("gram".into(), max_abs(&(&id.gram_hat - &pop.gram_hat)));
    let s = id.s_hat.iter().zip(&pop.s_hat).map(|(a, b)| max_abs(&(a - b))).fold(0.0, f64::max);
    errors.insert("s".into(), s);
    Ok(errors)
}

/// Runs simulate → identify → asr → learn → train-policy → eval, writing
/// each stage's artifacts and `report.json` into `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    let seeds: BTreeMap<String, u64> = ["simulate", "learn", "train-policy", "eval"]
        .iter()
        .map(|s| (s.to_string(), stage_seed(cfg.seed, s)))
        .collect();
    let mut run = Runner {
        dir,
        artifacts: BTreeMap::new(),
        timings: BTreeMap::new(),
    };

    let (graph, truth) = run.stage("simulate", |files| {
        let (graph, truth) = cfg.ground_truth()?;
        write(&run_path(dir, "truth.json"), files, truth.to_json().as_bytes())?;
        if let Some(g) = &graph {
            write(&run_path(dir, "graph.json"), files, g.to_json().as_bytes())?;
        }
        let batch = simulate_batch(&truth, cfg.data.episodes, cfg.data.steps, seeds["simulate"])?;
        let mut buf = Vec::new();
        write_trajectories(&batch, &mut buf)?;
        write(&run_path(dir, "trajectories.jsonl"), files, &buf)?;
        Ok((graph, truth))
    })?;
    let traj_path = run.path("trajectories.jsonl");

    let d_s = cfg.identification.d_s.unwrap_or(truth.d_s());
    let id_report = run.stage("identify", |files| {
        let batch = read_batch(&traj_path)?;
        let id = identify(&batch, cfg.identification.lags, d_s)?;
        write(&run_path(dir, "identified.json"), files, id.to_json().as_bytes())?;
        let errors = if d_s == truth.d_s() {
            identification_errors(&id, &truth, cfg.identification.lags)?
        } else {
            BTreeMap::new()
        };
        let report = IdentificationReport {
            errors,
            warnings: id.diagnostics.warnings.clone(),
        };
        Ok(report)
    })?;

    let true_asr = run.stage("asr", |files| {
        let set = graph.as_ref().map(asr_indices);
        if let Some(s) = &set {
            write(&run_path(dir, "asr.txt"), files, format!("{}\n", format_index_set(s)).as_bytes())?;
        }
        Ok(set)
    })?;

    let (model, final_loss, cmi) = run.stage("learn", |files| {
        let batch = read_batch(&traj_path)?;
        let id = IdentifiedParams::from_json(&fs::read_to_string(dir.join("identified.json"))?)?;
        let init = match cfg.learning.init {
            InitSpec::Identified => init_from_identified(&id)?,
            InitSpec::Random => random_init(d_s, truth.d_o(), &id.var_a, seeds["learn"])?,
        };
        let model = LearnableModel::new(init, cfg.learning.lambdas, cfg.learning.gamma, cfg.learning.horizon())?;
        let train_cfg = TrainConfig {
            seed: seeds["learn"],
            ..cfg.learning.train.clone()
        };
        let out = train(model, &batch, &train_cfg)?;
        write(&run_path(dir, "model.json"), files, out.model.to_json().as_bytes())?;
        let mut buf = Vec::new();
        write_history_csv(&out.history, &mut buf)?;
        write(&run_path(dir, "history.csv"), files, &buf)?;
        let final_loss = crate::objective::elbo_terms(&out.model, &batch)?;
        let soft = sufficiency_terms(&out.model, &batch)?;
        let mut cmi = vec![CmiRow {
            set: "gate".into(),
            asr_information: soft.asr,
            complement_information: soft.complement,
        }];
        for (i, t) in per_dimension_sufficiency(&out.model, &batch)?.into_iter().enumerate() {
            cmi.push(CmiRow {
                set: (i + 1).to_string(),
                asr_information: t.asr,
                complement_information: t.complement,
            });
        }
        Ok((out.model, final_loss, cmi))
    })?;

    let learned_asr = model.hard_gate();
    let (mapped, f1, residual) = if model.params.d_s() == truth.d_s() {
        let a = canonical_alignment(&model.params, &truth)?;
        (
            Some(format_index_set(&a.map_indices(&learned_asr))),
            Some(support_f1(&model.params, &truth, F1_THRESHOLD)?),
            Some(a.residual),
        )
    } else {
        (None, None, None)
    };
    let asr = AsrReport {
        true_asr: true_asr.as_ref().map(format_index_set),
        learned_asr: format_index_set(&learned_asr),
        learned_asr_in_truth_basis: mapped,
        structural_asr: format_index_set(&model.structural_asr),
        gate_weights: model.gate_weights().iter().copied().collect(),
        support_f1: f1,
        alignment_residual: residual,
    };

    let mut policy_report = None;
    if cfg.policy.config.episodes > 0 {
        let policy_asr = match &cfg.policy.asr {
            Some(text) => parse_index_set(text, model.params.d_s())?,
            None => learned_asr.clone(),
        };
        let (final_return, real_steps) = run.stage("train-policy", |files| {
            let model = LearnableModel::from_json(&fs::read_to_string(dir.join("model.json"))?)?;
            let out = run_dyna(&truth, &model.params, &policy_asr, &cfg.policy.config, seeds["train-policy"])?;
            write(&run_path(dir, "policy.json"), files, out.policy.to_json().as_bytes())?;
            let mut buf = Vec::new();
            write_curve_csv(&out.curve, &mut buf)?;
            write(&run_path(dir, "curve.csv"), files, &buf)?;
            let tail = out.curve.len().min(10);
            let final_return = out.curve[out.curve.len() - tail..].iter().map(|c| c.ret).sum::<f64>() / tail as f64;
            Ok((final_return, out.curve.last().map_or(0, |c| c.real_steps)))
        })?;
        let report = run.stage("eval", |files| {
            let policy = QPolicy::from_json(&fs::read_to_string(dir.join("policy.json"))?)?;
            let (n, h, seed) = (cfg.policy.eval_episodes, cfg.policy.config.horizon, seeds["eval"]);
            let greedy = evaluate(&policy, &truth, n, h, seed)?;
            let random = evaluate_random(&truth, &policy.action_set, n, h, seed)?;
            let oracle = evaluate_oracle(&truth, &policy.action_set, cfg.policy.config.gamma, n, h, seed)?;
            let report = PolicyReport {
                asr: format_index_set(&policy_asr),
                final_training_return: final_return,
                real_steps,
                greedy,
                random,
                oracle,
            };
            write(
                &run_path(dir, "eval.json"),
                files,
                serde_json::to_string_pretty(&report).expect("eval serializes").as_bytes(),
            )?;
            Ok(report)
        })?;
        policy_report = Some(report);
    }

    let report = RunReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        stage_seeds: seeds,
        identification: id_report,
        asr,
        cmi,
        final_loss,
        policy: policy_report,
        artifacts: run.artifacts,
        timings_ms: run.timings,
    };
    fs::write(dir.join("report.json"), report.to_json())?;
    Ok(report)
}

fn run_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
