//! Environment graphs for goal-directed pathfinding.
//!
//! A pathfinding problem "reach `goal` from anywhere in a directed graph" is
//! turned into a sampling environment by three edits: drop every edge leaving
//! the goal vertex, reverse all remaining edges, and declare the goal vertex
//! the initial state. Every state additionally carries an implicit transition
//! to an absorbing sink, which is modelled in the policies rather than stored
//! here. A backward walk over the reduced environment then moves along
//! original-graph edges, so a backward policy that only ever shortens the
//! distance to the initial state is exactly a shortest-path solver.

use std::collections::VecDeque;
use std::fmt;
use std::hash::Hash;
use std::path::Path;

use thiserror::Error;

/// Dense index of a state within an enumerated environment.
///
/// Ids index flat arrays everywhere (policies, distance tables), so they must
/// stay dense: `0 <= id < n_states`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct StateId(pub u32);

impl StateId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("vertex {vertex} out of range: the graph declares {n_vertices} vertices")]
    InvalidVertex { vertex: u32, n_vertices: u32 },
    #[error("vertex {0} has no path to the goal vertex")]
    UnreachableGoal(u32),
    #[error("edge list is empty but more than one vertex was declared")]
    NoEdges,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A fully enumerated environment produced by [`build_gfn_env`].
///
/// `children` holds the forward transitions (reversed source edges), `parents`
/// the backward ones; the two are mutually consistent by construction. The
/// initial state keeps the id of the source vertex it came from, recorded in
/// `goal_origin`. The sink is implicit: every state has a stop transition that
/// is not part of the adjacency.
#[derive(Clone, Debug)]
pub struct ExplicitGraph {
    n_states: usize,
    children: Vec<Vec<StateId>>,
    parents: Vec<Vec<StateId>>,
    /// For each state and each child slot, the index of this state inside the
    /// child's parent list. Lets a forward step report which backward move
    /// undoes it without a linear scan.
    back_slots: Vec<Vec<u32>>,
    goal_origin: StateId,
    max_moves: usize,
}

impl ExplicitGraph {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// The initial state (the goal vertex of the source problem).
    pub fn initial_state(&self) -> StateId {
        self.goal_origin
    }

    /// Source vertex that became the initial state.
    pub fn goal_origin(&self) -> StateId {
        self.goal_origin
    }

    pub fn children(&self, s: StateId) -> &[StateId] {
        &self.children[s.index()]
    }

    pub fn parents(&self, s: StateId) -> &[StateId] {
        &self.parents[s.index()]
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.n_states as u32).map(StateId)
    }

    /// Directed forward edges `(s, child)`.
    pub fn edges(&self) -> impl Iterator<Item = (StateId, StateId)> + '_ {
        self.states()
            .flat_map(move |s| self.children(s).iter().map(move |&c| (s, c)))
    }

    pub fn n_edges(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    /// Reconstructs the surviving source edges by re-reversal. The goal's
    /// own out-edges were removed during construction and cannot be
    /// recovered; everything else comes back exactly.
    pub fn source_edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self.edges().map(|(s, c)| (c.0, s.0)).collect();
        edges.sort_unstable();
        edges
    }
}

/// Builds the sampling environment for "reach `goal`" on the given digraph.
///
/// Forward transitions are the reversed source edges, with every edge leaving
/// `goal` deleted first (no shortest path to the goal continues past it).
/// Parallel edges collapse to one and self-loops are dropped. Fails with
/// [`EnvError::UnreachableGoal`] if some vertex cannot reach the goal, since
/// such a vertex could never be sampled nor solved.
pub fn build_gfn_env(
    source_edges: &[(u32, u32)],
    n_vertices: usize,
    goal: u32,
) -> Result<ExplicitGraph, EnvError> {
    if goal as usize >= n_vertices {
        return Err(EnvError::InvalidVertex {
            vertex: goal,
            n_vertices: n_vertices as u32,
        });
    }
    let mut children: Vec<Vec<StateId>> = vec![Vec::new(); n_vertices];
    let mut parents: Vec<Vec<StateId>> = vec![Vec::new(); n_vertices];
    for &(u, v) in source_edges {
        for w in [u, v] {
            if w as usize >= n_vertices {
                return Err(EnvError::InvalidVertex {
                    vertex: w,
                    n_vertices: n_vertices as u32,
                });
            }
        }
        if u == goal || u == v {
            continue; // goal out-edges removed; self-loops dropped
        }
        // source edge u -> v becomes the forward transition v -> u
        children[v as usize].push(StateId(u));
        parents[u as usize].push(StateId(v));
    }
    for list in children.iter_mut().chain(parents.iter_mut()) {
        list.sort_unstable();
        list.dedup();
    }
    let back_slots = compute_back_slots(&children, &parents);
    let max_moves = children
        .iter()
        .map(Vec::len)
        .chain(parents.iter().map(Vec::len))
        .max()
        .unwrap_or(0);
    let env = ExplicitGraph {
        n_states: n_vertices,
        children,
        parents,
        back_slots,
        goal_origin: StateId(goal),
        max_moves,
    };
    // Forward reachability from s0 mirrors "every vertex reaches the goal".
    let reach = forward_reachable(&env);
    if let Some(v) = reach.iter().position(|r| !r) {
        return Err(EnvError::UnreachableGoal(v as u32));
    }
    Ok(env)
}

fn compute_back_slots(children: &[Vec<StateId>], parents: &[Vec<StateId>]) -> Vec<Vec<u32>> {
    children
        .iter()
        .enumerate()
        .map(|(s, ch)| {
            ch.iter()
                .map(|c| {
                    parents[c.index()]
                        .iter()
                        .position(|&p| p.index() == s)
                        .expect("children/parents built together") as u32
                })
                .collect()
        })
        .collect()
}

fn forward_reachable(env: &ExplicitGraph) -> Vec<bool> {
    let mut seen = vec![false; env.n_states];
    let mut queue = VecDeque::new();
    seen[env.goal_origin.index()] = true;
    queue.push_back(env.goal_origin);
    while let Some(s) = queue.pop_front() {
        for &c in env.children(s) {
            if !seen[c.index()] {
                seen[c.index()] = true;
                queue.push_back(c);
            }
        }
    }
    seen
}

/// A single structural violation found by [`validate_env`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// The initial state has an incoming edge; its in-edges must all have
    /// been removed by the reduction.
    InitialHasParent { parent: StateId },
    /// State unreachable from the initial state by forward transitions.
    Unreachable(StateId),
    /// `children` and `parents` disagree about this forward edge.
    AdjacencyMismatch { from: StateId, to: StateId },
    SelfLoop(StateId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InitialHasParent { parent } => {
                write!(f, "initial state has parent {parent}")
            }
            Violation::Unreachable(s) => write!(f, "state {s} unreachable from initial state"),
            Violation::AdjacencyMismatch { from, to } => {
                write!(f, "adjacency mismatch on edge {from} -> {to}")
            }
            Violation::SelfLoop(s) => write!(f, "self-loop at {s}"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the structural requirements every sampling environment must meet:
/// the initial state has no parents and every state is forward-reachable from
/// it. (Each state reaches the sink by construction through its implicit stop
/// transition, so that part needs no check.) Violations are reported as data
/// rather than errors so that callers can print all of them at once.
pub fn validate_env(env: &ExplicitGraph) -> ValidationReport {
    let mut violations = Vec::new();
    for &p in env.parents(env.initial_state()) {
        violations.push(Violation::InitialHasParent { parent: p });
    }
    let reach = forward_reachable(env);
    for (i, r) in reach.iter().enumerate() {
        if !r {
            violations.push(Violation::Unreachable(StateId(i as u32)));
        }
    }
    for s in env.states() {
        for &c in env.children(s) {
            if c == s {
                violations.push(Violation::SelfLoop(s));
            }
            if !env.parents(c).contains(&s) {
                violations.push(Violation::AdjacencyMismatch { from: s, to: c });
            }
        }
        for &p in env.parents(s) {
            if !env.children(p).contains(&s) {
                violations.push(Violation::AdjacencyMismatch { from: p, to: s });
            }
        }
    }
    ValidationReport { violations }
}

/// A forward walk through the environment starting at the initial state.
/// `terminated` records whether the final stop transition into the sink was
/// taken; the walk length counts only the non-sink transitions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Trajectory {
    pub states: Vec<StateId>,
    pub terminated: bool,
}

impl Trajectory {
    /// Number of non-sink transitions.
    pub fn length(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Checks that the walk starts at the initial state and every consecutive
    /// pair is a forward edge.
    pub fn validate(&self, env: &ExplicitGraph) -> Result<(), String> {
        match self.states.first() {
            None => return Err("empty trajectory".into()),
            Some(&s) if s != env.initial_state() => {
                return Err(format!("trajectory starts at {s}, not the initial state"))
            }
            _ => {}
        }
        for (i, w) in self.states.windows(2).enumerate() {
            if !env.children(w[0]).contains(&w[1]) {
                return Err(format!("no forward edge {} -> {} at step {i}", w[0], w[1]));
            }
        }
        Ok(())
    }
}

/// Parsed form of the edge-list text format: first line `n_vertices goal`,
/// then one `u v` source edge per line, all 0-indexed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeList {
    pub n_vertices: usize,
    pub goal: u32,
    pub edges: Vec<(u32, u32)>,
}

impl EdgeList {
    pub fn build(&self) -> Result<ExplicitGraph, EnvError> {
        build_gfn_env(&self.edges, self.n_vertices, self.goal)
    }
}

pub fn parse_edge_list(text: &str) -> Result<EdgeList, EnvError> {
    let mut header: Option<(usize, u32)> = None;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>, what: &str| -> Result<u64, EnvError> {
            tok.ok_or_else(|| EnvError::Parse {
                line: idx + 1,
                msg: format!("missing {what}"),
            })?
            .parse::<u64>()
            .map_err(|_| EnvError::Parse {
                line: idx + 1,
                msg: format!("invalid {what}"),
            })
        };
        let a = parse(it.next(), "first field")?;
        let b = parse(it.next(), "second field")?;
        if it.next().is_some() {
            return Err(EnvError::Parse {
                line: idx + 1,
                msg: "expected exactly two fields".into(),
            });
        }
        if header.is_none() {
            header = Some((a as usize, b as u32));
        } else {
            edges.push((a as u32, b as u32));
        }
    }
    let (n_vertices, goal) = header.ok_or(EnvError::NoEdges)?;
    Ok(EdgeList {
        n_vertices,
        goal,
        edges,
    })
}

pub fn read_edge_list(path: &Path) -> Result<EdgeList, EnvError> {
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_edge_list(&text)
}

pub fn format_edge_list(list: &EdgeList) -> String {
    let mut out = format!("{} {}\n", list.n_vertices, list.goal);
    for &(u, v) in &list.edges {
        out.push_str(&format!("{u} {v}\n"));
    }
    out
}

/// Interface every trainable environment exposes, explicit or implicit.
///
/// Policy heads address transitions by move slot: forward slot `mv` at state
/// `s` leads to at most one child, and the matching backward slot at that
/// child leads back to `s`. The initial state has no backward moves (its
/// incoming edges were removed by the reduction) and no forward move ever
/// produces the initial state.
pub trait GfnEnv: Sync {
    type State: Clone + Eq + Hash + Ord + Send + Sync + fmt::Debug;

    /// The initial state, i.e. the goal of the source pathfinding problem.
    fn initial(&self) -> Self::State;

    fn is_initial(&self, s: &Self::State) -> bool {
        *s == self.initial()
    }

    /// Number of move slots addressed by the policy heads.
    fn n_moves(&self) -> usize;

    /// Width of the binary feature encoding.
    fn input_dim(&self) -> usize;

    /// Indices of the active entries of the binary encoding of `s`.
    fn active_features(&self, s: &Self::State, out: &mut Vec<u32>);

    /// Applies forward move `mv`, returning the child together with the
    /// backward slot that recovers `s` from it. `None` when the transition
    /// does not exist (out-of-range slot, or the edge was removed by the
    /// reduction).
    fn forward_step(&self, s: &Self::State, mv: usize) -> Option<(Self::State, usize)>;

    /// Applies backward move `mv` (a move of the original problem). `None` at
    /// the initial state (absorbing for backward walks) or when the slot does
    /// not exist.
    fn backward_step(&self, s: &Self::State, mv: usize) -> Option<Self::State>;

    /// Exact number of non-sink states when it fits into `u128`.
    fn state_count(&self) -> Option<u128>;

    /// Natural log of the number of non-sink states. With uniform unit
    /// rewards this is the exact log-normalizer of the target distribution.
    fn log_state_count(&self) -> f64;
}

impl GfnEnv for ExplicitGraph {
    type State = StateId;

    fn initial(&self) -> StateId {
        self.goal_origin
    }

    fn n_moves(&self) -> usize {
        self.max_moves
    }

    fn input_dim(&self) -> usize {
        self.n_states
    }

    fn active_features(&self, s: &StateId, out: &mut Vec<u32>) {
        out.clear();
        out.push(s.0);
    }

    fn forward_step(&self, s: &StateId, mv: usize) -> Option<(StateId, usize)> {
        let c = *self.children[s.index()].get(mv)?;
        Some((c, self.back_slots[s.index()][mv] as usize))
    }

    fn backward_step(&self, s: &StateId, mv: usize) -> Option<StateId> {
        self.parents[s.index()].get(mv).copied()
    }

    fn state_count(&self) -> Option<u128> {
        Some(self.n_states as u128)
    }

    fn log_state_count(&self) -> f64 {
        (self.n_states as f64).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Path v0 -> v1 -> v2 with goal v2.
    pub(crate) fn path3() -> ExplicitGraph {
        build_gfn_env(&[(0, 1), (1, 2)], 3, 2).unwrap()
    }

    #[test]
    fn reverses_a_path_graph() {
        let env = path3();
        assert_eq!(env.initial_state(), StateId(2));
        assert_eq!(env.children(StateId(2)), &[StateId(1)]);
        assert_eq!(env.children(StateId(1)), &[StateId(0)]);
        assert_eq!(env.children(StateId(0)), &[] as &[StateId]);
        assert_eq!(env.parents(StateId(2)), &[] as &[StateId]);
    }

    #[test]
    fn goal_out_edges_removed_before_reversal() {
        // 2-cycle v0 <-> v1 with goal v0: v0's out-edge disappears, so the
        // only forward transition is s0 -> v1.
        let env = build_gfn_env(&[(0, 1), (1, 0)], 2, 0).unwrap();
        assert_eq!(env.children(StateId(0)), &[StateId(1)]);
        assert_eq!(env.children(StateId(1)), &[] as &[StateId]);
        assert_eq!(env.parents(StateId(0)), &[] as &[StateId]);
        assert_eq!(env.n_edges(), 1);
    }

    #[test]
    fn duplicate_edges_collapse_and_self_loops_drop() {
        let env = build_gfn_env(&[(0, 1), (0, 1), (1, 1), (1, 2)], 3, 2).unwrap();
        assert_eq!(env.children(StateId(1)), &[StateId(0)]);
        let report = validate_env(&env);
        assert!(report.is_ok(), "{:?}", report.violations);
    }

    #[test]
    fn unreachable_goal_is_an_error() {
        // v0 -> v1, v2 isolated, goal v1.
        let err = build_gfn_env(&[(0, 1)], 3, 1).unwrap_err();
        match err {
            EnvError::UnreachableGoal(v) => assert_eq!(v, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn out_of_range_vertex_is_an_error() {
        assert!(matches!(
            build_gfn_env(&[(0, 5)], 3, 2),
            Err(EnvError::InvalidVertex { vertex: 5, .. })
        ));
    }

    #[test]
    fn validate_reports_manual_corruption() {
        let mut env = path3();
        // Give s0 a parent by hand.
        env.parents[2].push(StateId(0));
        env.children[0].push(StateId(2));
        env.back_slots[0].push(0);
        let report = validate_env(&env);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::InitialHasParent { .. })));
    }

    #[test]
    fn validate_reports_unreachable_state() {
        let mut env = build_gfn_env(&[(0, 1), (1, 2), (3, 2)], 4, 2).unwrap();
        // Detach state 3 from the graph.
        env.children[2].retain(|&c| c != StateId(3));
        env.back_slots[2].pop();
        env.parents[3].clear();
        let report = validate_env(&env);
        assert!(report.violations.contains(&Violation::Unreachable(StateId(3))));
    }

    #[test]
    fn round_trip_through_source_edges() {
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 0), (1, 3), (3, 1)];
        let goal = 3u32;
        let env = build_gfn_env(&edges, 4, goal).unwrap();
        // Reversing the forward edges recovers the source edges that survived
        // (everything except the goal's out-edges).
        let mut survived: Vec<(u32, u32)> = edges
            .iter()
            .copied()
            .filter(|&(u, v)| u != goal && u != v)
            .collect();
        survived.sort_unstable();
        survived.dedup();
        assert_eq!(env.source_edges(), survived);
    }

    #[test]
    fn every_non_initial_state_has_a_parent() {
        let env = build_gfn_env(&[(0, 1), (1, 2), (2, 0), (2, 1)], 3, 0).unwrap();
        for s in env.states() {
            if s != env.initial_state() {
                assert!(!env.parents(s).is_empty(), "state {s} has no parents");
            }
        }
    }

    #[test]
    fn forward_and_backward_steps_agree() {
        let env = build_gfn_env(&[(0, 1), (1, 2), (2, 0), (1, 0), (0, 2)], 3, 2).unwrap();
        for s in env.states() {
            for mv in 0..env.n_moves() {
                if let Some((child, back)) = env.forward_step(&s, mv) {
                    assert_eq!(env.backward_step(&child, back), Some(s));
                    assert_ne!(child, env.initial(), "forward step reached the initial state");
                }
            }
        }
    }

    #[test]
    fn edge_list_parses_and_formats() {
        let text = "4 3\n0 1\n1 2\n2 3\n# comment\n\n3 0\n";
        let list = parse_edge_list(text).unwrap();
        assert_eq!(list.n_vertices, 4);
        assert_eq!(list.goal, 3);
        assert_eq!(list.edges.len(), 4);
        let round = parse_edge_list(&format_edge_list(&list)).unwrap();
        assert_eq!(round, list);
        assert!(list.build().is_ok());
    }

    #[test]
    fn edge_list_error_carries_line_number() {
        let err = parse_edge_list("3 0\n0 x\n").unwrap_err();
        match err {
            EnvError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trajectory_validation() {
        let env = path3();
        let good = Trajectory {
            states: vec![StateId(2), StateId(1), StateId(0)],
            terminated: true,
        };
        assert!(good.validate(&env).is_ok());
        assert_eq!(good.length(), 2);
        let bad = Trajectory {
            states: vec![StateId(2), StateId(0)],
            terminated: false,
        };
        assert!(bad.validate(&env).is_err());
    }
}
