//! Exact policy algebra on enumerated environments.
//!
//! A backward policy together with the termination distribution defines an
//! absorbing random walk from the sink to the initial state. Everything of
//! interest (expected trajectory length, per-state visit flows, the unique
//! forward policy with the same trajectory distribution) is a solution of a
//! small linear system over that walk, so on enumerated environments all of
//! it can be computed exactly and checked against brute-force enumeration.
//! The central fact being exercised: the expected trajectory length is
//! bounded below by the reward-weighted mean shortest-path distance, with
//! equality exactly when the backward policy only ever steps one layer closer
//! to the initial state.

use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::cmp::Ordering;

use rand::Rng;

use thiserror::Error;

use crate::graph::{ExplicitGraph, GfnEnv, StateId};
use crate::oracle::DistanceTable;

/// States below this count use a dense LU factorization; larger systems fall
/// back to Gauss-Seidel sweeps on the sparse adjacency.
const DENSE_LIMIT: usize = 2000;
const GS_TOLERANCE: f64 = 1e-13;
const GS_MAX_SWEEPS: usize = 200_000;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("backward walk is not absorbing: state {0} cannot reach the initial state")]
    NonAbsorbing(StateId),
    #[error("linear system is singular at pivot {0}")]
    SingularSystem(usize),
    #[error("iterative solve did not reach tolerance (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("parent map is not a tree rooted at the initial state: {0}")]
    NotATree(String),
    #[error("{} state(s) carry zero flow, first: {}", states.len(), states[0])]
    ZeroFlowState { states: Vec<StateId> },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid reward: {0}")]
    InvalidReward(String),
}

/// Positive rewards on terminal states with their normalizer. In the
/// pathfinding reduction every state is terminal and the reward is uniform,
/// but zero entries are allowed for states without a stop transition.
#[derive(Clone, Debug)]
pub struct RewardSpec {
    reward: Vec<f64>,
    total: f64,
}

impl RewardSpec {
    pub fn new(reward: Vec<f64>) -> Result<Self, TabularError> {
        let mut total = 0.0;
        for (i, &r) in reward.iter().enumerate() {
            if !r.is_finite() || r < 0.0 {
                return Err(TabularError::InvalidReward(format!(
                    "reward of state {i} is {r}"
                )));
            }
            total += r;
        }
        if total <= 0.0 {
            return Err(TabularError::InvalidReward("all rewards are zero".into()));
        }
        Ok(RewardSpec { reward, total })
    }

    /// Unit reward on every state.
    pub fn uniform(n_states: usize) -> Self {
        RewardSpec {
            reward: vec![1.0; n_states],
            total: n_states as f64,
        }
    }

    pub fn reward(&self, s: StateId) -> f64 {
        self.reward[s.index()]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// The normalizer `Z`.
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }

    /// Termination distribution `reward / Z`.
    pub fn matched_terminal(&self) -> Vec<f64> {
        self.reward.iter().map(|r| r / self.total).collect()
    }
}

/// Row-stochastic backward policy over an enumerated environment.
///
/// `terminal[x]` is the probability that a trajectory terminates in `x` (the
/// first hop of the backward walk from the sink); `rows[s]` distributes over
/// `env.parents(s)` in list order and is empty exactly for the initial state.
#[derive(Clone, Debug)]
pub struct TabularBackwardPolicy {
    pub terminal: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl TabularBackwardPolicy {
    pub fn validate(&self, env: &ExplicitGraph) -> Result<(), TabularError> {
        if self.terminal.len() != env.n_states() || self.rows.len() != env.n_states() {
            return Err(TabularError::InvalidPolicy(
                "policy size does not match the environment".into(),
            ));
        }
        let sum: f64 = self.terminal.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(TabularError::InvalidPolicy(format!(
                "terminal row sums to {sum}"
            )));
        }
        for s in env.states() {
            let row = &self.rows[s.index()];
            if s == env.initial_state() {
                if !row.is_empty() {
                    return Err(TabularError::InvalidPolicy(
                        "initial state must have an empty backward row".into(),
                    ));
                }
                continue;
            }
            if row.len() != env.parents(s).len() {
                return Err(TabularError::InvalidPolicy(format!(
                    "row of state {s} has {} entries for {} parents",
                    row.len(),
                    env.parents(s).len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                return Err(TabularError::InvalidPolicy(format!(
                    "row of state {s} sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Probability of stepping from `child` back to `parent`.
    pub fn prob(&self, env: &ExplicitGraph, child: StateId, parent: StateId) -> f64 {
        env.parents(child)
            .iter()
            .position(|&p| p == parent)
            .map(|k| self.rows[child.index()][k])
            .unwrap_or(0.0)
    }

    /// Serializes rows as `parent:prob` pairs, one state per line.
    pub fn format(&self, env: &ExplicitGraph) -> String {
        let mut out = String::new();
        out.push_str("terminal ");
        out.push_str(
            &self
                .terminal
                .iter()
                .enumerate()
                .map(|(x, p)| format!("{x}:{p:.12}"))
                .collect::<Vec<_>>()
                .join(" "),
        );
        out.push('\n');
        for s in env.states() {
            let pairs: Vec<String> = env
                .parents(s)
                .iter()
                .zip(&self.rows[s.index()])
                .map(|(p, q)| format!("{p}:{q:.12}"))
                .collect();
            out.push_str(&format!("{s} {}\n", pairs.join(" ")));
        }
        out
    }
}

/// Row-stochastic forward policy: `rows[s]` distributes over
/// `env.children(s)` in list order and `stop[s]` is the probability of the
/// transition into the sink; together each row sums to one.
#[derive(Clone, Debug)]
pub struct TabularForwardPolicy {
    pub rows: Vec<Vec<f64>>,
    pub stop: Vec<f64>,
}

impl TabularForwardPolicy {
    pub fn validate(&self, env: &ExplicitGraph) -> Result<(), TabularError> {
        if self.rows.len() != env.n_states() || self.stop.len() != env.n_states() {
            return Err(TabularError::InvalidPolicy(
                "policy size does not match the environment".into(),
            ));
        }
        for s in env.states() {
            let row = &self.rows[s.index()];
            if row.len() != env.children(s).len() {
                return Err(TabularError::InvalidPolicy(format!(
                    "row of state {s} has {} entries for {} children",
                    row.len(),
                    env.children(s).len()
                )));
            }
            let sum: f64 = row.iter().sum::<f64>() + self.stop[s.index()];
            if (sum - 1.0).abs() > 1e-12
                || row.iter().any(|&p| p < 0.0)
                || self.stop[s.index()] < 0.0
            {
                return Err(TabularError::InvalidPolicy(format!(
                    "row of state {s} sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    pub fn prob(&self, env: &ExplicitGraph, from: StateId, to: StateId) -> f64 {
        env.children(from)
            .iter()
            .position(|&c| c == to)
            .map(|k| self.rows[from.index()][k])
            .unwrap_or(0.0)
    }
}

/// Per-state flows `F(s) = Z * expected visits of s` under the backward walk,
/// together with the total over non-initial states. Dividing the total by `Z`
/// recovers the expected trajectory length.
#[derive(Clone, Debug)]
pub struct FlowVector {
    pub flow: Vec<f64>,
    pub total_interior: f64,
}

// --- dense LU ----------------------------------------------------------------

struct DenseLu {
    n: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl DenseLu {
    fn factor(mut a: Vec<f64>, n: usize) -> Result<Self, TabularError> {
        assert_eq!(a.len(), n * n);
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let mut p = k;
            let mut best = a[k * n + k].abs();
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best < 1e-300 {
                return Err(TabularError::SingularSystem(k));
            }
            piv[k] = p;
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
            }
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let l = a[i * n + k] / pivot;
                a[i * n + k] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        a[i * n + j] -= l * a[k * n + j];
                    }
                }
            }
        }
        Ok(DenseLu { n, a, piv })
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for i in 1..n {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.a[i * n + j] * b[j];
            }
            b[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in i + 1..n {
                acc -= self.a[i * n + j] * b[j];
            }
            b[i] = acc / self.a[i * n + i];
        }
    }

    /// Solves the transposed system with the same factorization.
    fn solve_transposed(&self, b: &mut [f64]) {
        let n = self.n;
        // U^T y = b (forward), then L^T w = y (backward, unit diagonal),
        // then undo the pivoting.
        for i in 0..n {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.a[j * n + i] * b[j];
            }
            b[i] = acc / self.a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in i + 1..n {
                acc -= self.a[j * n + i] * b[j];
            }
            b[i] = acc;
        }
        for k in (0..n).rev() {
            b.swap(k, self.piv[k]);
        }
    }
}

// --- absorbing walk analysis ---------------------------------------------------

/// Support structure of the backward walk: which states the walk can touch
/// starting from the sink, in a dense renumbering used by the solvers.
struct WalkSupport {
    /// Walk-reachable states other than the initial one, ascending.
    transient: Vec<StateId>,
    /// Position of each state in `transient`; usize::MAX elsewhere.
    slot: Vec<usize>,
}

fn walk_support(env: &ExplicitGraph, pb: &TabularBackwardPolicy) -> WalkSupport {
    let n = env.n_states();
    let s0 = env.initial_state();
    let mut reach = vec![false; n];
    let mut queue = VecDeque::new();
    for (x, &p) in pb.terminal.iter().enumerate() {
        if p > 0.0 && !reach[x] {
            reach[x] = true;
            queue.push_back(StateId(x as u32));
        }
    }
    while let Some(s) = queue.pop_front() {
        if s == s0 {
            continue; // absorbing
        }
        for (k, &parent) in env.parents(s).iter().enumerate() {
            if pb.rows[s.index()][k] > 0.0 && !reach[parent.index()] {
                reach[parent.index()] = true;
                queue.push_back(parent);
            }
        }
    }
    let mut transient = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        if reach[i] && StateId(i as u32) != s0 {
            slot[i] = transient.len();
            transient.push(StateId(i as u32));
        }
    }
    WalkSupport { transient, slot }
}

/// Errors with the first walk-reachable state that cannot reach the initial
/// state; such a state would trap the walk forever.
fn check_absorbing(
    env: &ExplicitGraph,
    pb: &TabularBackwardPolicy,
    support: &WalkSupport,
) -> Result<(), TabularError> {
    let n = env.n_states();
    let s0 = env.initial_state();
    // can_reach[s]: a positive-probability walk path from s to s0 exists.
    let mut can_reach = vec![false; n];
    can_reach[s0.index()] = true;
    let mut queue = VecDeque::new();
    queue.push_back(s0);
    while let Some(p) = queue.pop_front() {
        // walk edges into p come from env children of p that put mass on it
        for &child in env.children(p) {
            if can_reach[child.index()] {
                continue;
            }
            let k = env
                .parents(child)
                .iter()
                .position(|&q| q == p)
                .expect("adjacency is consistent");
            if pb.rows[child.index()][k] > 0.0 {
                can_reach[child.index()] = true;
                queue.push_back(child);
            }
        }
    }
    for &s in &support.transient {
        if !can_reach[s.index()] {
            return Err(TabularError::NonAbsorbing(s));
        }
    }
    Ok(())
}

enum Factorization {
    Dense(DenseLu),
    Sparse,
}

/// Shared solver for the two linear systems attached to a backward walk:
/// expected steps to absorption (uses the walk matrix) and expected visit
/// counts (uses its transpose, hence one factorization serves both).
struct WalkSolver<'a> {
    env: &'a ExplicitGraph,
    pb: &'a TabularBackwardPolicy,
    support: WalkSupport,
    factor: Factorization,
}

impl<'a> WalkSolver<'a> {
    fn new(env: &'a ExplicitGraph, pb: &'a TabularBackwardPolicy) -> Result<Self, TabularError> {
        pb.validate(env)?;
        let support = walk_support(env, pb);
        check_absorbing(env, pb, &support)?;
        let k = support.transient.len();
        let factor = if k < DENSE_LIMIT {
            let mut a = vec![0.0; k * k];
            for (row, &s) in support.transient.iter().enumerate() {
                a[row * k + row] = 1.0;
                for (j, &parent) in env.parents(s).iter().enumerate() {
                    let p = pb.rows[s.index()][j];
                    if p > 0.0 {
                        let col = support.slot[parent.index()];
                        if col != usize::MAX {
                            a[row * k + col] -= p;
                        }
                    }
                }
            }
            Factorization::Dense(DenseLu::factor(a, k)?)
        } else {
            Factorization::Sparse
        };
        Ok(WalkSolver {
            env,
            pb,
            support,
            factor,
        })
    }

    /// Expected number of walk steps from each transient state to absorption.
    fn expected_steps(&self) -> Result<Vec<f64>, TabularError> {
        let k = self.support.transient.len();
        match &self.factor {
            Factorization::Dense(lu) => {
                let mut b = vec![1.0; k];
                lu.solve(&mut b);
                Ok(b)
            }
            Factorization::Sparse => self.gauss_seidel(|s, t| {
                // t[s] = 1 + sum_parents p * t[parent]
                let mut acc = 1.0;
                for (j, &parent) in self.env.parents(s).iter().enumerate() {
                    let p = self.pb.rows[s.index()][j];
                    if p > 0.0 {
                        let col = self.support.slot[parent.index()];
                        if col != usize::MAX {
                            acc += p * t[col];
                        }
                    }
                }
                acc
            }),
        }
    }

    /// Expected visit counts of each transient state for a walk seeded with
    /// the given entry distribution (normally the terminal row).
    fn visit_counts(&self, entry: &[f64]) -> Result<Vec<f64>, TabularError> {
        match &self.factor {
            Factorization::Dense(lu) => {
                let mut b: Vec<f64> = self
                    .support
                    .transient
                    .iter()
                    .map(|&s| entry[s.index()])
                    .collect();
                lu.solve_transposed(&mut b);
                Ok(b)
            }
            Factorization::Sparse => {
                // transpose adjacency: v[s] = entry[s] + sum over children c
                // of s that put mass on s: v[c] * prob(s | c)
                let incoming: Vec<Vec<(usize, f64)>> = self
                    .support
                    .transient
                    .iter()
                    .map(|&s| {
                        let mut list = Vec::new();
                        for &child in self.env.children(s) {
                            let cs = self.support.slot[child.index()];
                            if cs == usize::MAX {
                                continue;
                            }
                            let j = self
                                .env
                                .parents(child)
                                .iter()
                                .position(|&q| q == s)
                                .expect("consistent adjacency");
                            let p = self.pb.rows[child.index()][j];
                            if p > 0.0 {
                                list.push((cs, p));
                            }
                        }
                        list
                    })
                    .collect();
                self.gauss_seidel(|s, v| {
                    let row = self.support.slot[s.index()];
                    let mut acc = entry[s.index()];
                    for &(cs, p) in &incoming[row] {
                        acc += p * v[cs];
                    }
                    acc
                })
            }
        }
    }

    fn gauss_seidel(
        &self,
        update: impl Fn(StateId, &[f64]) -> f64,
    ) -> Result<Vec<f64>, TabularError> {
        let k = self.support.transient.len();
        let mut x = vec![0.0; k];
        for _ in 0..GS_MAX_SWEEPS {
            let mut delta = 0.0f64;
            let mut scale = 1.0f64;
            for (row, &s) in self.support.transient.iter().enumerate() {
                let next = update(s, &x);
                delta = delta.max((next - x[row]).abs());
                scale = scale.max(next.abs());
                x[row] = next;
            }
            if delta <= GS_TOLERANCE * scale {
                return Ok(x);
            }
        }
        // final residual for the error report
        let mut residual = 0.0f64;
        for (row, &s) in self.support.transient.iter().enumerate() {
            residual = residual.max((update(s, &x) - x[row]).abs());
        }
        Err(TabularError::NoConvergence { residual })
    }
}

/// Expected trajectory length of the backward policy, i.e. the mean number of
/// non-sink transitions of the absorbing walk that starts at the sink, hops
/// to a terminal state by the terminal row and then follows the policy until
/// it reaches the initial state.
pub fn expected_length(
    env: &ExplicitGraph,
    pb: &TabularBackwardPolicy,
) -> Result<f64, TabularError> {
    let solver = WalkSolver::new(env, pb)?;
    let t = solver.expected_steps()?;
    let mut e = 0.0;
    for (x, &p) in pb.terminal.iter().enumerate() {
        if p > 0.0 {
            let slot = solver.support.slot[x];
            if slot != usize::MAX {
                e += p * t[slot];
            }
            // terminal mass on the initial state contributes zero steps
        }
    }
    Ok(e)
}

/// Reward-weighted mean shortest-path distance: no trajectory distribution
/// that terminates with probability `reward/Z` can have a smaller expected
/// length, because a trajectory ending at `x` has at least `dist(x)` steps.
pub fn lower_bound(reward: &RewardSpec, distances: &DistanceTable) -> f64 {
    assert_eq!(reward.len(), distances.dist.len());
    reward
        .rewards()
        .iter()
        .zip(&distances.dist)
        .map(|(&r, &d)| (r / reward.total()) * d as f64)
        .sum()
}

/// How to pick the designated shortest-path parent of each state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParentChoice {
    /// First matching entry of the parent list.
    First,
    /// Smallest state id among the matching parents (default; reproducible
    /// regardless of list order).
    LexicographicMin,
}

/// For every non-initial state, a parent that is exactly one layer closer to
/// the initial state. Such a parent always exists in a valid environment.
pub fn shortest_parent_map(
    env: &ExplicitGraph,
    distances: &DistanceTable,
    choice: ParentChoice,
) -> Vec<Option<StateId>> {
    env.states()
        .map(|s| {
            if s == env.initial_state() {
                return None;
            }
            let d = distances.dist[s.index()];
            let candidates = env
                .parents(s)
                .iter()
                .copied()
                .filter(|p| distances.dist[p.index()] + 1 == d);
            match choice {
                ParentChoice::First => candidates.take(1).next(),
                ParentChoice::LexicographicMin => candidates.min(),
            }
            .map(Some)
            .expect("valid environment has a parent one layer closer")
        })
        .collect()
}

/// The constructive length-minimal backward policy: terminate according to
/// the reward and then walk the designated shortest-path parent chain. Its
/// expected length meets [`lower_bound`] exactly.
pub fn optimal_backward_policy(
    env: &ExplicitGraph,
    distances: &DistanceTable,
    reward: &RewardSpec,
    choice: ParentChoice,
) -> TabularBackwardPolicy {
    let par = shortest_parent_map(env, distances, choice);
    let rows = env
        .states()
        .map(|s| match par[s.index()] {
            None => Vec::new(),
            Some(p) => env
                .parents(s)
                .iter()
                .map(|&q| if q == p { 1.0 } else { 0.0 })
                .collect(),
        })
        .collect();
    TabularBackwardPolicy {
        terminal: reward.matched_terminal(),
        rows,
    }
}

/// Forward policy of a tree-structured backward policy. With the parent map
/// forming a tree rooted at the initial state, each state's value is the
/// total reward in its subtree and the forward policy splits proportionally:
/// `P(child | s) = V(child) / V(s)`, `P(stop | s) = reward(s) / V(s)`.
pub fn forward_from_tree(
    env: &ExplicitGraph,
    parent_map: &[Option<StateId>],
    reward: &RewardSpec,
) -> Result<TabularForwardPolicy, TabularError> {
    let n = env.n_states();
    if parent_map.len() != n {
        return Err(TabularError::NotATree("parent map length mismatch".into()));
    }
    let s0 = env.initial_state();
    let mut tree_children: Vec<Vec<StateId>> = vec![Vec::new(); n];
    for s in env.states() {
        match parent_map[s.index()] {
            None => {
                if s != s0 {
                    return Err(TabularError::NotATree(format!("state {s} has no parent")));
                }
            }
            Some(p) => {
                if s == s0 {
                    return Err(TabularError::NotATree(
                        "initial state must not have a parent".into(),
                    ));
                }
                if !env.parents(s).contains(&p) {
                    return Err(TabularError::NotATree(format!(
                        "{p} -> {s} is not an environment edge"
                    )));
                }
                tree_children[p.index()].push(s);
            }
        }
    }
    // breadth-first order from the root; cycles and detached pieces stay
    // unvisited and are reported
    let mut order = vec![s0];
    let mut head = 0;
    while head < order.len() {
        let s = order[head];
        head += 1;
        order.extend(tree_children[s.index()].iter().copied());
    }
    if order.len() != n {
        return Err(TabularError::NotATree(format!(
            "only {} of {} states hang off the root",
            order.len(),
            n
        )));
    }
    let mut value = vec![0.0f64; n];
    for &s in order.iter().rev() {
        value[s.index()] = reward.reward(s)
            + tree_children[s.index()]
                .iter()
                .map(|c| value[c.index()])
                .sum::<f64>();
    }
    let zero: Vec<StateId> = env.states().filter(|s| value[s.index()] <= 0.0).collect();
    if !zero.is_empty() {
        return Err(TabularError::ZeroFlowState { states: zero });
    }
    let rows = env
        .states()
        .map(|s| {
            env.children(s)
                .iter()
                .map(|&c| {
                    if parent_map[c.index()] == Some(s) {
                        value[c.index()] / value[s.index()]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let stop = env
        .states()
        .map(|s| reward.reward(s) / value[s.index()])
        .collect();
    Ok(TabularForwardPolicy { rows, stop })
}

/// State flows under the backward walk: `flow[s] = z * expected visits of s`.
/// The initial state is visited exactly once by every trajectory, so its flow
/// equals `z`; the interior total divided by `z` is the expected length.
pub fn state_flows(
    env: &ExplicitGraph,
    pb: &TabularBackwardPolicy,
    z: f64,
) -> Result<FlowVector, TabularError> {
    let solver = WalkSolver::new(env, pb)?;
    let v = solver.visit_counts(&pb.terminal)?;
    let mut flow = vec![0.0; env.n_states()];
    for (row, &s) in solver.support.transient.iter().enumerate() {
        flow[s.index()] = z * v[row];
    }
    // the initial state's visit count is its total inflow: direct terminal
    // mass plus one hop from each child that can point at it
    let s0 = env.initial_state();
    let mut inflow = pb.terminal[s0.index()];
    for &child in env.children(s0) {
        let slot = solver.support.slot[child.index()];
        if slot == usize::MAX {
            continue;
        }
        let k = env
            .parents(child)
            .iter()
            .position(|&q| q == s0)
            .expect("consistent adjacency");
        inflow += v[slot] * pb.rows[child.index()][k];
    }
    flow[s0.index()] = z * inflow;
    let total_interior = solver
        .support
        .transient
        .iter()
        .map(|&s| flow[s.index()])
        .sum();
    Ok(FlowVector {
        flow,
        total_interior,
    })
}

/// The unique forward policy inducing the same trajectory distribution as
/// `pb`, computed from edge flows: the flow along an edge is the child's flow
/// times the backward probability of the edge, and the stop flow is the
/// terminal mass. States never visited by the walk have no defined forward
/// row and are reported instead of invented.
pub fn forward_from_backward(
    env: &ExplicitGraph,
    pb: &TabularBackwardPolicy,
) -> Result<TabularForwardPolicy, TabularError> {
    let solver = WalkSolver::new(env, pb)?;
    let v = solver.visit_counts(&pb.terminal)?;
    let n = env.n_states();
    let s0 = env.initial_state();
    let mut visits = vec![0.0f64; n];
    for (row, &s) in solver.support.transient.iter().enumerate() {
        visits[s.index()] = v[row];
    }
    let mut inflow0 = pb.terminal[s0.index()];
    for &child in env.children(s0) {
        if visits[child.index()] > 0.0 {
            let k = env
                .parents(child)
                .iter()
                .position(|&q| q == s0)
                .expect("consistent adjacency");
            inflow0 += visits[child.index()] * pb.rows[child.index()][k];
        }
    }
    visits[s0.index()] = inflow0;
    let unvisited: Vec<StateId> = env.states().filter(|s| visits[s.index()] <= 0.0).collect();
    if !unvisited.is_empty() {
        return Err(TabularError::ZeroFlowState { states: unvisited });
    }
    let mut rows = Vec::with_capacity(n);
    let mut stop = Vec::with_capacity(n);
    for s in env.states() {
        let mut row = Vec::with_capacity(env.children(s).len());
        for mv in 0..env.children(s).len() {
            let (child, back) = env.forward_step(&s, mv).expect("child exists");
            let p_edge = pb.rows[child.index()][back];
            row.push(visits[child.index()] * p_edge / visits[s.index()]);
        }
        stop.push(pb.terminal[s.index()] / visits[s.index()]);
        rows.push(row);
    }
    Ok(TabularForwardPolicy { rows, stop })
}

/// One backward transition that leaves the shortest-path layer structure.
#[derive(Clone, Debug)]
pub struct ShortcutViolation {
    pub child: StateId,
    pub parent: StateId,
    pub prob: f64,
    pub child_dist: u16,
    pub parent_dist: u16,
}

/// Outcome of the minimality check of a reward-matched backward policy.
///
/// Two independently computed criteria that the theory says must agree:
/// the expected trajectory length meets the lower bound (`minimal`), and the
/// policy's support uses only edges that step one layer closer to the initial
/// state (`witnesses` empty). Each witness is an edge carrying more than
/// `tol` probability while skipping or leaving a layer.
#[derive(Clone, Debug)]
pub struct MinimalityReport {
    pub expected: f64,
    pub bound: f64,
    pub length_gap: f64,
    pub minimal: bool,
    pub reward_matched: bool,
    pub witnesses: Vec<ShortcutViolation>,
}

pub fn check_minimality(
    env: &ExplicitGraph,
    pb: &TabularBackwardPolicy,
    distances: &DistanceTable,
    reward: &RewardSpec,
    tol: f64,
) -> Result<MinimalityReport, TabularError> {
    let expected = expected_length(env, pb)?;
    let bound = lower_bound(reward, distances);
    let matched = pb
        .terminal
        .iter()
        .zip(reward.matched_terminal())
        .all(|(&a, b)| (a - b).abs() <= tol);
    let mut witnesses = Vec::new();
    for s in env.states() {
        for (k, &parent) in env.parents(s).iter().enumerate() {
            let p = pb.rows[s.index()][k];
            if p > tol && distances.dist[parent.index()] + 1 != distances.dist[s.index()] {
                witnesses.push(ShortcutViolation {
                    child: s,
                    parent,
                    prob: p,
                    child_dist: distances.dist[s.index()],
                    parent_dist: distances.dist[parent.index()],
                });
            }
        }
    }
    let gap = expected - bound;
    Ok(MinimalityReport {
        expected,
        bound,
        length_gap: gap,
        minimal: gap.abs() <= tol,
        reward_matched: matched,
        witnesses,
    })
}

// --- trajectory enumeration -----------------------------------------------------

/// A finite chunk of a trajectory distribution: probability per complete
/// trajectory (keyed by the forward state sequence) plus the total mass
/// covered. Enumeration expands prefixes in order of decreasing probability,
/// so `1 - mass` bounds everything left out.
#[derive(Clone, Debug)]
pub struct TrajectoryDist {
    pub probs: HashMap<Vec<StateId>, f64>,
    pub mass: f64,
}

impl TrajectoryDist {
    /// KL divergence from `self` to `other` over the enumerated support;
    /// infinite if `other` misses one of our trajectories.
    pub fn kl_to(&self, other: &TrajectoryDist) -> f64 {
        let mut kl = 0.0;
        for (traj, &p) in &self.probs {
            match other.probs.get(traj) {
                Some(&q) if q > 0.0 => kl += p * (p / q).ln(),
                _ => return f64::INFINITY,
            }
        }
        kl
    }

    pub fn max_abs_diff(&self, other: &TrajectoryDist) -> f64 {
        let mut m: f64 = 0.0;
        for (traj, &p) in &self.probs {
            m = m.max((p - other.probs.get(traj).copied().unwrap_or(0.0)).abs());
        }
        for (traj, &q) in &other.probs {
            if !self.probs.contains_key(traj) {
                m = m.max(q);
            }
        }
        m
    }
}

struct HeapEntry {
    prob: f64,
    path: Vec<StateId>,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.prob
            .total_cmp(&other.prob)
            .then_with(|| self.path.cmp(&other.path))
    }
}

/// Enumerates the trajectory distribution of a backward policy until at most
/// `target_miss` probability mass remains undiscovered, or `max_expansions`
/// prefix expansions have been spent. Check `mass` on the result: policies
/// with heavy-tailed length distributions may not reach the target.
pub fn enumerate_backward(
    env: &ExplicitGraph,
    pb: &TabularBackwardPolicy,
    target_miss: f64,
    max_expansions: usize,
) -> TrajectoryDist {
    let s0 = env.initial_state();
    let mut heap = BinaryHeap::new();
    let mut pending = 0.0;
    for (x, &p) in pb.terminal.iter().enumerate() {
        if p > 0.0 {
            heap.push(HeapEntry {
                prob: p,
                path: vec![StateId(x as u32)],
            });
            pending += p;
        }
    }
    let mut probs = HashMap::new();
    let mut mass = 0.0;
    let mut expansions = 0;
    while let Some(entry) = heap.pop() {
        pending -= entry.prob;
        let &current = entry.path.last().unwrap();
        if current == s0 {
            let mut traj = entry.path.clone();
            traj.reverse();
            mass += entry.prob;
            let prev = probs.insert(traj, entry.prob);
            debug_assert!(prev.is_none(), "walk paths are unique");
        } else {
            for (k, &parent) in env.parents(current).iter().enumerate() {
                let p = pb.rows[current.index()][k];
                if p > 0.0 {
                    let mut path = entry.path.clone();
                    path.push(parent);
                    pending += entry.prob * p;
                    heap.push(HeapEntry {
                        prob: entry.prob * p,
                        path,
                    });
                }
            }
        }
        expansions += 1;
        if pending <= target_miss || expansions >= max_expansions {
            break;
        }
    }
    TrajectoryDist { probs, mass }
}

/// Same for a forward policy: trajectories run from the initial state and
/// complete through the stop transition.
pub fn enumerate_forward(
    env: &ExplicitGraph,
    pf: &TabularForwardPolicy,
    target_miss: f64,
    max_expansions: usize,
) -> TrajectoryDist {
    let s0 = env.initial_state();
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry {
        prob: 1.0,
        path: vec![s0],
    });
    let mut pending = 1.0;
    let mut probs = HashMap::new();
    let mut mass = 0.0;
    let mut expansions = 0;
    while let Some(entry) = heap.pop() {
        pending -= entry.prob;
        let &current = entry.path.last().unwrap();
        let stop = pf.stop[current.index()];
        if stop > 0.0 {
            let p = entry.prob * stop;
            mass += p;
            let prev = probs.insert(entry.path.clone(), p);
            debug_assert!(prev.is_none());
        }
        for (k, &child) in env.children(current).iter().enumerate() {
            let p = pf.rows[current.index()][k];
            if p > 0.0 {
                let mut path = entry.path.clone();
                path.push(child);
                pending += entry.prob * p;
                heap.push(HeapEntry {
                    prob: entry.prob * p,
                    path,
                });
            }
        }
        expansions += 1;
        if pending <= target_miss || expansions >= max_expansions {
            break;
        }
    }
    TrajectoryDist { probs, mass }
}

// --- forward-walk analysis ------------------------------------------------------

/// Exact statistics of the forward walk of a forward policy, used as an
/// independent route for checking [`forward_from_backward`]: the termination
/// distribution must match the backward policy's terminal row and the
/// expected lengths must agree, without any trajectory enumeration.
#[derive(Clone, Debug)]
pub struct ForwardAnalysis {
    /// Expected visit count per state (1 for the initial state).
    pub visits: Vec<f64>,
    /// Probability of terminating in each state.
    pub termination: Vec<f64>,
    pub expected_length: f64,
}

pub fn analyze_forward(
    env: &ExplicitGraph,
    pf: &TabularForwardPolicy,
) -> Result<ForwardAnalysis, TabularError> {
    pf.validate(env)?;
    let n = env.n_states();
    let s0 = env.initial_state();
    // support reachability from the initial state
    let mut reach = vec![false; n];
    reach[s0.index()] = true;
    let mut queue = VecDeque::new();
    queue.push_back(s0);
    while let Some(s) = queue.pop_front() {
        for (k, &c) in env.children(s).iter().enumerate() {
            if pf.rows[s.index()][k] > 0.0 && !reach[c.index()] {
                reach[c.index()] = true;
                queue.push_back(c);
            }
        }
    }
    // every reachable state must be able to reach a positive stop probability
    let mut can_stop = vec![false; n];
    let mut queue = VecDeque::new();
    for s in env.states() {
        if pf.stop[s.index()] > 0.0 {
            can_stop[s.index()] = true;
            queue.push_back(s);
        }
    }
    while let Some(s) = queue.pop_front() {
        for &p in env.parents(s) {
            if can_stop[p.index()] {
                continue;
            }
            let k = env
                .children(p)
                .iter()
                .position(|&c| c == s)
                .expect("consistent adjacency");
            if pf.rows[p.index()][k] > 0.0 {
                can_stop[p.index()] = true;
                queue.push_back(p);
            }
        }
    }
    for s in env.states() {
        if reach[s.index()] && !can_stop[s.index()] {
            return Err(TabularError::NonAbsorbing(s));
        }
    }
    // transient states: reachable, excluding the initial state
    let mut transient = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for s in env.states() {
        if reach[s.index()] && s != s0 {
            slot[s.index()] = transient.len();
            transient.push(s);
        }
    }
    let k = transient.len();
    // u[s] = inflow from the initial state + inflow from transient states
    let mut rhs = vec![0.0f64; k];
    for (j, &c) in env.children(s0).iter().enumerate() {
        let p = pf.rows[s0.index()][j];
        if p > 0.0 {
            rhs[slot[c.index()]] += p;
        }
    }
    let visits_t: Vec<f64> = if k == 0 {
        Vec::new()
    } else if k < DENSE_LIMIT {
        let mut a = vec![0.0f64; k * k];
        for row in 0..k {
            a[row * k + row] = 1.0;
        }
        for &s in &transient {
            let row_s = slot[s.index()];
            for (j, &c) in env.children(s).iter().enumerate() {
                let p = pf.rows[s.index()][j];
                if p > 0.0 {
                    if let Some(&cslot) = slot.get(c.index()) {
                        if cslot != usize::MAX {
                            // column: source state, row: target state
                            a[cslot * k + row_s] -= p;
                        }
                    }
                }
            }
        }
        let lu = DenseLu::factor(a, k)?;
        let mut b = rhs.clone();
        lu.solve(&mut b);
        b
    } else {
        // Gauss-Seidel over the transpose adjacency
        let incoming: Vec<Vec<(usize, f64)>> = transient
            .iter()
            .map(|&s| {
                let mut list = Vec::new();
                for &p in env.parents(s) {
                    if p == s0 {
                        continue;
                    }
                    let ps = slot[p.index()];
                    if ps == usize::MAX {
                        continue;
                    }
                    let j = env
                        .children(p)
                        .iter()
                        .position(|&c| c == s)
                        .expect("consistent adjacency");
                    let q = pf.rows[p.index()][j];
                    if q > 0.0 {
                        list.push((ps, q));
                    }
                }
                list
            })
            .collect();
        let mut x = vec![0.0f64; k];
        let mut converged = false;
        for _ in 0..GS_MAX_SWEEPS {
            let mut delta = 0.0f64;
            let mut scale = 1.0f64;
            for row in 0..k {
                let mut acc = rhs[row];
                for &(ps, q) in &incoming[row] {
                    acc += q * x[ps];
                }
                delta = delta.max((acc - x[row]).abs());
                scale = scale.max(acc.abs());
                x[row] = acc;
            }
            if delta <= GS_TOLERANCE * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(TabularError::NoConvergence { residual: f64::NAN });
        }
        x
    };
    let mut visits = vec![0.0f64; n];
    visits[s0.index()] = 1.0;
    for (row, &s) in transient.iter().enumerate() {
        visits[s.index()] = visits_t[row];
    }
    let termination: Vec<f64> = env
        .states()
        .map(|s| visits[s.index()] * pf.stop[s.index()])
        .collect();
    let expected_length = transient.iter().map(|&s| visits[s.index()]).sum();
    Ok(ForwardAnalysis {
        visits,
        termination,
        expected_length,
    })
}

// --- random policies --------------------------------------------------------------

/// Reward-matched backward policy with independent positive random rows
/// (full support on every parent edge, hence absorbing on valid
/// environments).
pub fn random_backward_policy<R: Rng>(
    env: &ExplicitGraph,
    reward: &RewardSpec,
    rng: &mut R,
) -> TabularBackwardPolicy {
    let rows = env
        .states()
        .map(|s| {
            if s == env.initial_state() {
                return Vec::new();
            }
            dirichlet_row(env.parents(s).len(), rng)
        })
        .collect();
    TabularBackwardPolicy {
        terminal: reward.matched_terminal(),
        rows,
    }
}

/// Reward-matched backward policy supported only on shortest-path edges but
/// with random mixtures where several parents sit one layer closer. Every
/// such policy is length-minimal.
pub fn random_shortest_backward_policy<R: Rng>(
    env: &ExplicitGraph,
    distances: &DistanceTable,
    reward: &RewardSpec,
    rng: &mut R,
) -> TabularBackwardPolicy {
    let rows = env
        .states()
        .map(|s| {
            if s == env.initial_state() {
                return Vec::new();
            }
            let parents = env.parents(s);
            let on_layer: Vec<bool> = parents
                .iter()
                .map(|p| distances.dist[p.index()] + 1 == distances.dist[s.index()])
                .collect();
            let count = on_layer.iter().filter(|&&b| b).count();
            assert!(count > 0, "valid environment has a closer parent");
            let weights = dirichlet_row(count, rng);
            let mut wi = 0;
            on_layer
                .iter()
                .map(|&b| {
                    if b {
                        let w = weights[wi];
                        wi += 1;
                        w
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    TabularBackwardPolicy {
        terminal: reward.matched_terminal(),
        rows,
    }
}

fn dirichlet_row<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|_| -(rng.random::<f64>().max(1e-12)).ln())
        .collect();
    let sum: f64 = row.iter().sum();
    for w in &mut row {
        *w /= sum;
    }
    row
}
