//! `asr`: command-line driver for the ASR pipeline.
//!
//! Exit status is 0 on success, 2 when the input is rejected and 1 when a
//! computation fails.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use asr_core::bench::BENCHMARKS;
use asr_core::env::simulate_batch;
use asr_core::graph::{asr_by_dsep, format_index_set, parse_index_set};
use asr_core::harness::{make_benchmark, run_pipeline, EnvironmentSpec, ExperimentConfig, InitSpec, LearningSpec};
use asr_core::identify::{identify, IdentifiedParams};
use asr_core::io::{read_trajectories, write_trajectories};
use asr_core::objective::train::{init_from_identified, random_init, write_history_csv};
use asr_core::objective::{train, LearnableModel};
use asr_core::policy::{evaluate, run_dyna, write_curve_csv, PolicyConfig, QPolicy};
use asr_core::{asr_indices, AsrError, LinearModelParams, StructuralGraph, TrajectoryBatch};

#[derive(Parser)]
#[command(name = "asr", version, about = "Action-sufficient state representations for linear-Gaussian POMDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate random-action episodes and write them as JSON lines.
    Simulate {
        #[arg(long)]
        params: PathBuf,
        /// Steps per episode.
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify the model up to rotation from trajectory moments.
    Identify {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, default_value_t = 6)]
        lags: usize,
        #[arg(long)]
        dstate: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the action-sufficient state set of a structural graph (1-based).
    Asr {
        #[arg(long)]
        graph: PathBuf,
        /// Also run the d-separation test on the unrolled network and fail
        /// if it disagrees.
        #[arg(long)]
        check: bool,
    },
    /// Fit the structured model with sparsity and sufficiency penalties.
    Learn {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        dstate: usize,
        /// Learning config (lambdas, gamma, horizon, init, train).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Identification output used for initialisation; computed from the
        /// trajectories when absent.
        #[arg(long)]
        identified: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        lags: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Learn a Q policy on ASR beliefs against the true environment.
    TrainPolicy {
        #[arg(long)]
        env_params: PathBuf,
        /// Learned model (from `learn`) or plain parameters.
        #[arg(long)]
        model: PathBuf,
        /// 1-based ASR set in the model's basis; defaults to the learned gate.
        #[arg(long)]
        asr: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        curve_out: PathBuf,
        #[arg(long)]
        policy_out: Option<PathBuf>,
    },
    /// Greedy rollouts of a trained policy.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        env_params: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 100)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage of an experiment config and write its report.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a benchmark's experiment config and ground-truth files.
    Benchmark {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(BENCHMARKS))]
        name: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_batch(path: &Path) -> Result<TrajectoryBatch> {
    let f = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_trajectories(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?)
}

fn read_params(path: &Path) -> Result<LinearModelParams> {
    let p = LinearModelParams::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    p.validate()?;
    Ok(p)
}

/// Accepts a learned model or bare parameters.
fn read_model(path: &Path) -> Result<(LinearModelParams, Option<LearnableModel>)> {
    let text = read(path)?;
    match LearnableModel::from_json(&text) {
        Ok(m) => Ok((m.params.clone(), Some(m))),
        Err(_) => {
            let p = LinearModelParams::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            p.validate()?;
            Ok((p, None))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            params,
            steps,
            episodes,
            seed,
            out,
        } => {
            let p = read_params(&params)?;
            let batch = simulate_batch(&p, episodes, steps, seed)?;
            let f = fs::File::create(&out).with_context(|| format!("writing {}", out.display()))?;
            write_trajectories(&batch, BufWriter::new(f))?;
        }
        Command::Identify { traj, lags, dstate, out } => {
            let batch = read_batch(&traj)?;
            let id = identify(&batch, lags, dstate)?;
            for w in &id.diagnostics.warnings {
                eprintln!("warning: {w}");
            }
            write(&out, &id.to_json())?;
        }
        Command::Asr { graph, check } => {
            let g = StructuralGraph::from_json(&read(&graph)?).with_context(|| format!("parsing {}", graph.display()))?;
            let set = asr_indices(&g);
            if check {
                let dsep = asr_by_dsep(&g, 6)?;
                if dsep != set {
                    bail!(
                        "fixpoint ASR {{{}}} disagrees with d-separation ASR {{{}}}",
                        format_index_set(&set),
                        format_index_set(&dsep)
                    );
                }
            }
            println!("{}", format_index_set(&set));
        }
        Command::Learn {
            traj,
            dstate,
            config,
            identified,
            lags,
            seed,
            out,
            history,
        } => {
            let spec: LearningSpec = match &config {
                Some(path) => serde_json::from_str(&read(path)?).map_err(AsrError::from).with_context(|| format!("parsing {}", path.display()))?,
                None => LearningSpec::default(),
            };
            let batch = read_batch(&traj)?;
            let id = match &identified {
                Some(path) => IdentifiedParams::from_json(&read(path)?)?,
                None => identify(&batch, lags, dstate)?,
            };
            if id.d_s != dstate {
                return Err(AsrError::DimensionMismatch {
                    what: "identified latent dimension",
                    expected: dstate,
                    got: id.d_s,
                }
                .into());
            }
            let mut train_cfg = spec.train.clone();
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            let init = match spec.init {
                InitSpec::Identified => init_from_identified(&id)?,
                InitSpec::Random => random_init(dstate, batch[0].d_o(), &id.var_a, train_cfg.seed)?,
            };
            let model = LearnableModel::new(init, spec.lambdas, spec.gamma, spec.horizon())?;
            let trained = train(model, &batch, &train_cfg)?;
            write(&out, &trained.model.to_json())?;
            if let Some(path) = history {
                let f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
                write_history_csv(&trained.history, BufWriter::new(f))?;
            }
            println!("{}", format_index_set(&trained.learned_asr));
        }
        Command::TrainPolicy {
            env_params,
            model,
            asr,
            config,
            seed,
            curve_out,
            policy_out,
        } => {
            let truth = read_params(&env_params)?;
            let (params, learned) = read_model(&model)?;
            let cfg: PolicyConfig = match &config {
                Some(path) => serde_json::from_str(&read(path)?).map_err(AsrError::from).with_context(|| format!("parsing {}", path.display()))?,
                None => PolicyConfig::default(),
            };
            let set = match (&asr, &learned) {
                (Some(text), _) => parse_index_set(text, params.d_s())?,
                (None, Some(m)) => m.hard_gate(),
                (None, None) => bail!(AsrError::InvalidInput("--asr is required when the model has no gate".into())),
            };
            if truth.d_o() != params.d_o() || truth.d_a() != params.d_a() {
                bail!(AsrError::InvalidInput("environment and model dimensions differ".into()));
            }
            let run = run_dyna(&truth, &params, &set, &cfg, seed)?;
            let f = fs::File::create(&curve_out).with_context(|| format!("writing {}", curve_out.display()))?;
            write_curve_csv(&run.curve, BufWriter::new(f))?;
            if let Some(path) = policy_out {
                write(&path, &run.policy.to_json())?;
            }
        }
        Command::Eval {
            policy,
            env_params,
            episodes,
            horizon,
            seed,
            out,
        } => {
            let pol = QPolicy::from_json(&read(&policy)?).with_context(|| format!("parsing {}", policy.display()))?;
            let truth = read_params(&env_params)?;
            let result = evaluate(&pol, &truth, episodes, horizon, seed)?;
            println!("{:.6} ± {:.6}", result.mean, result.std_err);
            if let Some(path) = out {
                write(&path, &serde_json::to_string_pretty(&result)?)?;
            }
        }
        Command::Pipeline { config, out_dir } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(dir) = out_dir {
                cfg.output_dir = dir;
            }
            let report = run_pipeline(&cfg)?;
            println!("{}", cfg.output_dir.join("report.json").display());
            println!("learned ASR: {{{}}}", report.asr.learned_asr_in_truth_basis.as_deref().unwrap_or(&report.asr.learned_asr));
        }
        Command::Benchmark { name, seed, out_dir } => {
            let b = make_benchmark(&name, seed)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            write(&out_dir.join("truth.json"), &b.params.to_json())?;
            write(&out_dir.join("graph.json"), &b.graph.to_json())?;
            let mut cfg = b.config;
            cfg.environment = EnvironmentSpec::Files {
                graph: Some("graph.json".into()),
                params: "truth.json".into(),
            };
            cfg.output_dir = "run".into();
            write(&out_dir.join("config.json"), &cfg.to_json())?;
        }
    }
    Ok(())
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if let Some(a) = e.downcast_ref::<AsrError>() {
            a.is_validation()
        } else if let Some(io) = e.downcast_ref::<std::io::Error>() {
            io.kind() == std::io::ErrorKind::NotFound
        } else {
            e.is::<serde_json::Error>()
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_validation(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
