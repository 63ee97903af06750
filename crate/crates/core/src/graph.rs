//! Binary structural masks of the environment, the recursive
//! action-sufficient index set, and a d-separation oracle over the unrolled
//! dynamic Bayesian network.
//!
//! State dimensions are 0-based throughout the library; only the CLI and
//! reports render them 1-based.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AsrError, Result};

/// Index set of state dimensions (0-based).
pub type IndexSet = BTreeSet<usize>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct StructuralGraph {
    d_s: usize,
    d_a: usize,
    /// `s_s[j][i]`: edge `s_{j,t-1} -> s_{i,t}`.
    s_s: Vec<Vec<bool>>,
    /// `a_s[k][i]`: edge `a_{k,t-1} -> s_{i,t}`.
    a_s: Vec<Vec<bool>>,
    s_r: Vec<bool>,
    a_r: Vec<bool>,
    s_o: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    d_s: usize,
    d_a: usize,
    mask_s_to_s: Vec<Vec<u8>>,
    mask_a_to_s: Vec<Vec<u8>>,
    mask_s_to_r: Vec<u8>,
    mask_a_to_r: Vec<u8>,
    mask_s_to_o: Vec<u8>,
}

fn bits(row: &[u8], len: usize, what: &'static str) -> Result<Vec<bool>> {
    if row.len() != len {
        return Err(AsrError::DimensionMismatch {
            what,
            expected: len,
            got: row.len(),
        });
    }
    row.iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(AsrError::invalid(format!(
                "{what} entries must be 0 or 1, found {other}"
            ))),
        })
        .collect()
}

fn bit_matrix(rows: &[Vec<u8>], nrows: usize, ncols: usize, what: &'static str) -> Result<Vec<Vec<bool>>> {
    if rows.len() != nrows {
        return Err(AsrError::DimensionMismatch {
            what,
            expected: nrows,
            got: rows.len(),
        });
    }
    rows.iter().map(|r| bits(r, ncols, what)).collect()
}

impl TryFrom<RawGraph> for StructuralGraph {
    type Error = AsrError;

    fn try_from(raw: RawGraph) -> Result<Self> {
        if raw.d_s == 0 {
            return Err(AsrError::invalid("d_s must be positive"));
        }
        if raw.d_a == 0 {
            return Err(AsrError::invalid("d_a must be positive"));
        }
        Ok(StructuralGraph {
            d_s: raw.d_s,
            d_a: raw.d_a,
            s_s: bit_matrix(&raw.mask_s_to_s, raw.d_s, raw.d_s, "mask_s_to_s")?,
            a_s: bit_matrix(&raw.mask_a_to_s, raw.d_a, raw.d_s, "mask_a_to_s")?,
            s_r: bits(&raw.mask_s_to_r, raw.d_s, "mask_s_to_r")?,
            a_r: bits(&raw.mask_a_to_r, raw.d_a, "mask_a_to_r")?,
            s_o: bits(&raw.mask_s_to_o, raw.d_s, "mask_s_to_o")?,
        })
    }
}

impl From<StructuralGraph> for RawGraph {
    fn from(g: StructuralGraph) -> Self {
        let row = |v: &[bool]| v.iter().map(|&b| b as u8).collect::<Vec<u8>>();
        RawGraph {
            d_s: g.d_s,
            d_a: g.d_a,
            mask_s_to_s: g.s_s.iter().map(|r| row(r)).collect(),
            mask_a_to_s: g.a_s.iter().map(|r| row(r)).collect(),
            mask_s_to_r: row(&g.s_r),
            mask_a_to_r: row(&g.a_r),
            mask_s_to_o: row(&g.s_o),
        }
    }
}

impl StructuralGraph {
    /// Graph with no edges at all.
    pub fn empty(d_s: usize, d_a: usize) -> Result<Self> {
        RawGraph {
            d_s,
            d_a,
            mask_s_to_s: vec![vec![0; d_s]; d_s],
            mask_a_to_s: vec![vec![0; d_s]; d_a],
            mask_s_to_r: vec![0; d_s],
            mask_a_to_r: vec![0; d_a],
            mask_s_to_o: vec![0; d_s],
        }
        .try_into()
    }

    /// The three-dimensional example: every state has a self-loop, `s3`
    /// drives `s2`, only `s2` and `s3` reach the reward and the action does
    /// not reach `s3`.
    pub fn figure1() -> Self {
        RawGraph {
            d_s: 3,
            d_a: 1,
            mask_s_to_s: vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 1, 1]],
            mask_a_to_s: vec![vec![1, 1, 0]],
            mask_s_to_r: vec![0, 1, 1],
            mask_a_to_r: vec![1],
            mask_s_to_o: vec![1, 1, 1],
        }
        .try_into()
        .expect("static graph is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn d_s(&self) -> usize {
        self.d_s
    }

    pub fn d_a(&self) -> usize {
        self.d_a
    }

    pub fn s_to_s(&self, from: usize, to: usize) -> bool {
        self.s_s[from][to]
    }

    pub fn a_to_s(&self, action: usize, to: usize) -> bool {
        self.a_s[action][to]
    }

    pub fn s_to_r(&self, i: usize) -> bool {
        self.s_r[i]
    }

    pub fn a_to_r(&self, k: usize) -> bool {
        self.a_r[k]
    }

    pub fn s_to_o(&self, i: usize) -> bool {
        self.s_o[i]
    }

    pub fn set_s_to_s(&mut self, from: usize, to: usize, on: bool) {
        self.s_s[from][to] = on;
    }

    pub fn set_a_to_s(&mut self, action: usize, to: usize, on: bool) {
        self.a_s[action][to] = on;
    }

    pub fn set_s_to_r(&mut self, i: usize, on: bool) {
        self.s_r[i] = on;
    }

    pub fn set_a_to_r(&mut self, k: usize, on: bool) {
        self.a_r[k] = on;
    }

    pub fn set_s_to_o(&mut self, i: usize, on: bool) {
        self.s_o[i] = on;
    }
}

/// Least fixpoint of: `i` is action-sufficient if it parents the reward, or
/// if it parents (at the next step) some dimension that is action-sufficient.
pub fn asr_indices(g: &StructuralGraph) -> IndexSet {
    let mut set: IndexSet = (0..g.d_s).filter(|&i| g.s_r[i]).collect();
    let mut queue: VecDeque<usize> = set.iter().copied().collect();
    while let Some(j) = queue.pop_front() {
        for i in 0..g.d_s {
            if g.s_s[i][j] && set.insert(i) {
                queue.push_back(i);
            }
        }
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    State,
    Observation,
    Reward,
    Action,
    CumulativeReward,
}

/// A node of the unrolled network; `time` is 1-based, `dim` 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node {
    pub kind: NodeKind,
    pub dim: usize,
    pub time: usize,
}

impl Node {
    pub fn state(dim: usize, time: usize) -> Self {
        Node {
            kind: NodeKind::State,
            dim,
            time,
        }
    }

    pub fn observation(time: usize) -> Self {
        Node {
            kind: NodeKind::Observation,
            dim: 0,
            time,
        }
    }

    pub fn reward(time: usize) -> Self {
        Node {
            kind: NodeKind::Reward,
            dim: 0,
            time,
        }
    }

    pub fn action(dim: usize, time: usize) -> Self {
        Node {
            kind: NodeKind::Action,
            dim,
            time,
        }
    }

    pub fn cumulative(time: usize) -> Self {
        Node {
            kind: NodeKind::CumulativeReward,
            dim: 0,
            time,
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NodeKind::State => write!(f, "s[{},{}]", self.dim + 1, self.time),
            NodeKind::Observation => write!(f, "o[{}]", self.time),
            NodeKind::Reward => write!(f, "r[{}]", self.time),
            NodeKind::Action => write!(f, "a[{},{}]", self.dim + 1, self.time),
            NodeKind::CumulativeReward => write!(f, "R[{}]", self.time),
        }
    }
}

/// Time slice whose states are queried against the cumulative reward node;
/// slice 1 supplies the conditioning past.
pub const QUERY_TIME: usize = 2;

/// The masks repeated over `horizon` slices. States and observations exist at
/// every slice, actions at `1..horizon-1`, rewards at `2..horizon`, plus one
/// cumulative-reward node `R[QUERY_TIME + 1]` aggregating the rewards from
/// that time on (only the first one when the discount is zero).
#[derive(Debug, Clone)]
pub struct UnrolledDbn {
    nodes: Vec<Node>,
    index: HashMap<Node, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    horizon: usize,
}

impl UnrolledDbn {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn contains(&self, n: &Node) -> bool {
        self.index.contains_key(n)
    }

    pub fn edges(&self) -> impl Iterator<Item = (Node, Node)> + '_ {
        self.children
            .iter()
            .enumerate()
            .flat_map(move |(p, cs)| cs.iter().map(move |&c| (self.nodes[p], self.nodes[c])))
    }

    pub fn parents_of(&self, n: &Node) -> Result<Vec<Node>> {
        let i = self.id(n)?;
        Ok(self.parents[i].iter().map(|&p| self.nodes[p]).collect())
    }

    fn id(&self, n: &Node) -> Result<usize> {
        self.index
            .get(n)
            .copied()
            .ok_or_else(|| AsrError::UnknownNode(n.to_string()))
    }

    fn add_node(&mut self, n: Node) {
        self.index.insert(n, self.nodes.len());
        self.nodes.push(n);
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
    }

    fn add_edge(&mut self, from: Node, to: Node) {
        let (f, t) = (self.index[&from], self.index[&to]);
        self.children[f].push(t);
        self.parents[t].push(f);
    }

    fn ancestors_inclusive(&self, set: &[usize]) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = set.to_vec();
        while let Some(n) = stack.pop() {
            if !seen[n] {
                seen[n] = true;
                stack.extend(self.parents[n].iter().copied());
            }
        }
        seen
    }
}

pub fn unroll(g: &StructuralGraph, horizon: usize, gamma: f64) -> Result<UnrolledDbn> {
    if horizon < 2 {
        return Err(AsrError::invalid(format!(
            "unrolling needs at least 2 time steps, got {horizon}"
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(AsrError::invalid(format!("discount {gamma} outside [0, 1]")));
    }
    let mut dbn = UnrolledDbn {
        nodes: Vec::new(),
        index: HashMap::new(),
        parents: Vec::new(),
        children: Vec::new(),
        horizon,
    };
    for t in 1..=horizon {
        for i in 0..g.d_s {
            dbn.add_node(Node::state(i, t));
        }
        dbn.add_node(Node::observation(t));
        if t >= 2 {
            dbn.add_node(Node::reward(t));
        }
        if t < horizon {
            for k in 0..g.d_a {
                dbn.add_node(Node::action(k, t));
            }
        }
    }
    let anchor = QUERY_TIME + 1;
    dbn.add_node(Node::cumulative(anchor));

    for t in 1..=horizon {
        for i in 0..g.d_s {
            if g.s_o[i] {
                dbn.add_edge(Node::state(i, t), Node::observation(t));
            }
        }
        if t >= 2 {
            for i in 0..g.d_s {
                for j in 0..g.d_s {
                    if g.s_s[j][i] {
                        dbn.add_edge(Node::state(j, t - 1), Node::state(i, t));
                    }
                }
                for k in 0..g.d_a {
                    if g.a_s[k][i] {
                        dbn.add_edge(Node::action(k, t - 1), Node::state(i, t));
                    }
                }
                if g.s_r[i] {
                    dbn.add_edge(Node::state(i, t - 1), Node::reward(t));
                }
            }
            for k in 0..g.d_a {
                if g.a_r[k] {
                    dbn.add_edge(Node::action(k, t - 1), Node::reward(t));
                }
            }
        }
    }
    let last = if gamma == 0.0 { anchor.min(horizon) } else { horizon };
    for tau in anchor..=last {
        dbn.add_edge(Node::reward(tau), Node::cumulative(anchor));
    }
    Ok(dbn)
}

/// Bayes-ball reachability: true iff every path between `x` and `y` is
/// blocked by `z`.
pub fn d_separated(dbn: &UnrolledDbn, x: &[Node], y: &[Node], z: &[Node]) -> Result<bool> {
    let xs: Vec<usize> = x.iter().map(|n| dbn.id(n)).collect::<Result<_>>()?;
    let ys: Vec<usize> = y.iter().map(|n| dbn.id(n)).collect::<Result<_>>()?;
    let zs: Vec<usize> = z.iter().map(|n| dbn.id(n)).collect::<Result<_>>()?;
    let n = dbn.nodes.len();
    let mut in_z = vec![false; n];
    for &i in &zs {
        in_z[i] = true;
    }
    let mut in_y = vec![false; n];
    for &i in &ys {
        if in_z[i] {
            return Err(AsrError::invalid(format!(
                "node {} appears in both Y and Z",
                dbn.nodes[i]
            )));
        }
        in_y[i] = true;
    }
    for &i in &xs {
        if in_z[i] || in_y[i] {
            return Err(AsrError::invalid(format!(
                "node {} of X also appears in Y or Z",
                dbn.nodes[i]
            )));
        }
    }
    let anc_z = dbn.ancestors_inclusive(&zs);

    // (node, arrived_from_child)
    let mut visited_up = vec![false; n];
    let mut visited_down = vec![false; n];
    let mut queue: VecDeque<(usize, bool)> = xs.iter().map(|&i| (i, true)).collect();
    while let Some((node, up)) = queue.pop_front() {
        let seen = if up {
            &mut visited_up[node]
        } else {
            &mut visited_down[node]
        };
        if *seen {
            continue;
        }
        *seen = true;
        if !in_z[node] && in_y[node] {
            return Ok(false);
        }
        if up {
            if !in_z[node] {
                queue.extend(dbn.parents[node].iter().map(|&p| (p, true)));
                queue.extend(dbn.children[node].iter().map(|&c| (c, false)));
            }
        } else {
            if !in_z[node] {
                queue.extend(dbn.children[node].iter().map(|&c| (c, false)));
            }
            if anc_z[node] {
                queue.extend(dbn.parents[node].iter().map(|&p| (p, true)));
            }
        }
    }
    Ok(true)
}

/// Action-sufficient dimensions read off the unrolled network: `i` is kept
/// iff `s[i,2]` is d-connected to `R[3]` given `a[·,1]`, `a[·,2]` and the
/// fixpoint set at slice 1.
pub fn asr_by_dsep(g: &StructuralGraph, horizon: usize) -> Result<IndexSet> {
    if horizon < 2 {
        return Err(AsrError::invalid(format!(
            "d-separation check needs horizon >= 2, got {horizon}"
        )));
    }
    let dbn = unroll(g, horizon, 1.0)?;
    let past = QUERY_TIME - 1;
    let mut z: Vec<Node> = Vec::new();
    for t in [past, QUERY_TIME] {
        for k in 0..g.d_a {
            let a = Node::action(k, t);
            if dbn.contains(&a) {
                z.push(a);
            }
        }
    }
    z.extend(asr_indices(g).into_iter().map(|j| Node::state(j, past)));
    let target = [Node::cumulative(QUERY_TIME + 1)];
    let mut out = IndexSet::new();
    for i in 0..g.d_s {
        if !d_separated(&dbn, &[Node::state(i, QUERY_TIME)], &target, &z)? {
            out.insert(i);
        }
    }
    Ok(out)
}

/// Renders an index set 1-based, comma separated (`"2,3"`).
pub fn format_index_set(set: &IndexSet) -> String {
    set.iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Parses a 1-based comma separated index list into a 0-based set.
pub fn parse_index_set(text: &str, d_s: usize) -> Result<IndexSet> {
    let mut out = IndexSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let v: usize = part
            .parse()
            .map_err(|_| AsrError::invalid(format!("bad state index `{part}`")))?;
        if v == 0 || v > d_s {
            return Err(AsrError::invalid(format!(
                "state index {v} outside 1..={d_s}"
            )));
        }
        out.insert(v - 1);
    }
    Ok(out)
}
