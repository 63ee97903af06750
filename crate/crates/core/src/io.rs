//! JSON-lines trajectories: one time step per line.
//!
//! Each line holds `episode`, `t` (0-based within the episode), `o`, and for
//! every step but the last `a` and `r`; `s` carries the latent state when the
//! data came from a simulator.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{Trajectory, TrajectoryBatch};
use crate::error::{AsrError, Result};
use crate::linalg::Vector;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepLine {
    #[serde(default)]
    episode: usize,
    t: usize,
    o: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s: Option<Vec<f64>>,
}

pub fn write_trajectories<W: Write>(batch: &TrajectoryBatch, mut out: W) -> Result<()> {
    for (episode, traj) in batch.iter().enumerate() {
        traj.validate()?;
        for t in 0..traj.len() {
            let line = StepLine {
                episode,
                t,
                o: traj.observations[t].as_slice().to_vec(),
                a: traj.actions.get(t).map(|a| a.as_slice().to_vec()),
                r: traj.rewards.get(t).copied(),
                s: traj.latents.as_ref().map(|l| l[t].as_slice().to_vec()),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Builder {
    episode: usize,
    traj: Trajectory,
    closed: bool,
}

impl Builder {
    fn finish(self, line: usize) -> Result<Trajectory> {
        if !self.closed {
            return Err(AsrError::Parse {
                line,
                detail: format!("episode {} does not end with an action-free step", self.episode),
            });
        }
        self.traj.validate().map_err(|e| AsrError::Parse {
            line,
            detail: e.to_string(),
        })?;
        Ok(self.traj)
    }
}

/// Parses a JSON-lines batch. Episodes must be contiguous with `t` counting
/// up from 0, and only an episode's last step may omit `a` and `r`.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<TrajectoryBatch> {
    let mut batch = TrajectoryBatch::new();
    let mut current: Option<Builder> = None;
    let mut last_line = 0;
    for (i, text) in input.lines().enumerate() {
        let line = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        last_line = line;
        let err = |detail: String| AsrError::Parse { line, detail };
        let step: StepLine = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let all_finite = step
            .o
            .iter()
            .chain(step.a.iter().flatten())
            .chain(step.s.iter().flatten())
            .chain(step.r.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(err("non-finite value".into()));
        }
        if step.a.is_some() != step.r.is_some() {
            return Err(err("`a` and `r` must appear together".into()));
        }
        if current.as_ref().is_some_and(|b| b.episode != step.episode) {
            let done = current.take().expect("checked above");
            if step.episode <= done.episode {
                return Err(err(format!("episode {} is not contiguous", step.episode)));
            }
            batch.push(done.finish(line)?);
        }
        let b = current.get_or_insert_with(|| Builder {
            episode: step.episode,
            traj: Trajectory {
                observations: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                latents: step.s.as_ref().map(|_| Vec::new()),
            },
            closed: false,
        });
        if b.closed {
            return Err(err(format!("episode {} continues after its last step", b.episode)));
        }
        if step.t != b.traj.observations.len() {
            return Err(err(format!("expected t = {}, got {}", b.traj.observations.len(), step.t)));
        }
        if step.s.is_some() != b.traj.latents.is_some() {
            return Err(err("`s` must be present on every step of an episode or on none".into()));
        }
        b.traj.observations.push(Vector::from_vec(step.o));
        if let (Some(l), Some(s)) = (b.traj.latents.as_mut(), step.s) {
            l.push(Vector::from_vec(s));
        }
        match (step.a, step.r) {
            (Some(a), Some(r)) => {
                b.traj.actions.push(Vector::from_vec(a));
                b.traj.rewards.push(r);
            }
            _ => b.closed = true,
        }
    }
    if let Some(b) = current {
        batch.push(b.finish(last_line)?);
    }
    if batch.is_empty() {
        return Err(AsrError::Parse {
            line: 0,
            detail: "no trajectory steps".into(),
        });
    }
    let (d_o, d_a) = (batch[0].d_o(), batch[0].d_a());
    if batch.iter().any(|t| t.d_o() != d_o || (t.len() > 1 && t.d_a() != d_a)) {
        return Err(AsrError::Parse {
            line: last_line,
            detail: "episodes disagree on observation or action dimension".into(),
        });
    }
    Ok(batch)
}
