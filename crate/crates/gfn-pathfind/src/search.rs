//! Test-time pathfinding with a learned backward policy.
//!
//! A solver run starts at an arbitrary state and walks backward transitions
//! (moves of the original problem) until it reaches the goal. Three regimes:
//! faithful sampling from the policy, greedy argmax decoding, and beam search
//! over the cumulative log-probability of the walk, with duplicate states
//! dropped per level. Greedy decoding is exactly beam search of width one.

use std::collections::HashMap;

use rand::Rng;

use crate::graph::{ExplicitGraph, GfnEnv};
use crate::nn::{forward, masked_log_softmax, FeatureBatch, ParameterStore, Real};
use crate::tabular::TabularBackwardPolicy;

/// Anything that can score backward moves for a batch of states.
pub trait PolicyModel<E: GfnEnv>: Sync {
    /// Per-state log-probabilities over backward move slots, `-inf` where the
    /// slot is illegal. One entry per input state, each of length
    /// `env.n_moves()`.
    fn backward_log_probs(&self, env: &E, states: &[E::State]) -> Vec<Vec<f64>>;
}

/// The policy network's backward head under a masked log-softmax.
pub struct NeuralPolicy<'a, F: Real> {
    pub params: &'a ParameterStore<F>,
}

impl<'a, F: Real> NeuralPolicy<'a, F> {
    pub fn new(params: &'a ParameterStore<F>) -> Self {
        NeuralPolicy { params }
    }
}

impl<E: GfnEnv, F: Real> PolicyModel<E> for NeuralPolicy<'_, F> {
    fn backward_log_probs(&self, env: &E, states: &[E::State]) -> Vec<Vec<f64>> {
        let mut feats = FeatureBatch::default();
        let mut scratch = Vec::new();
        for s in states {
            env.active_features(s, &mut scratch);
            feats.rows.push(scratch.clone());
        }
        let logits = forward(self.params, &feats);
        let n = env.n_moves();
        states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mask: Vec<bool> = (0..n).map(|mv| env.backward_step(s, mv).is_some()).collect();
                let mut out = vec![0.0f64; n];
                if mask.iter().any(|&m| m) {
                    masked_log_softmax(logits.backward.row(i), &mask, &mut out);
                } else {
                    out.fill(f64::NEG_INFINITY);
                }
                out
            })
            .collect()
    }
}

/// An exact tabular backward policy used in place of a network, mainly to
/// check the search machinery against policies with known behaviour.
pub struct TabularPolicyModel<'a> {
    pub policy: &'a TabularBackwardPolicy,
}

impl PolicyModel<ExplicitGraph> for TabularPolicyModel<'_> {
    fn backward_log_probs(&self, env: &ExplicitGraph, states: &[<ExplicitGraph as GfnEnv>::State]) -> Vec<Vec<f64>> {
        let n = env.n_moves();
        states
            .iter()
            .map(|s| {
                let row = &self.policy.rows[s.index()];
                let mut out = vec![f64::NEG_INFINITY; n];
                for (k, &p) in row.iter().enumerate() {
                    out[k] = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
                }
                out
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Solved,
    BudgetExhausted,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Outcome::Solved => write!(f, "solved"),
            Outcome::BudgetExhausted => write!(f, "budget_exhausted"),
        }
    }
}

/// Result of one solve attempt. `path` runs from the start state to the last
/// state visited and ends at the goal exactly when `outcome` is `Solved`;
/// `length` counts its transitions. `nodes_expanded` counts policy-expanded
/// states (steps for the walk regimes, extended beam entries for beam
/// search).
#[derive(Clone, Debug)]
pub struct SolveResult<S> {
    pub path: Vec<S>,
    pub length: usize,
    pub nodes_expanded: u64,
    pub outcome: Outcome,
}

impl<S> SolveResult<S> {
    pub fn solved(&self) -> bool {
        self.outcome == Outcome::Solved
    }
}

/// Walks backward moves sampled faithfully from the policy until the goal is
/// reached or `max_steps` transitions have been taken.
pub fn sample_path<E: GfnEnv, P: PolicyModel<E>, R: Rng>(
    policy: &P,
    env: &E,
    start: &E::State,
    max_steps: usize,
    rng: &mut R,
) -> SolveResult<E::State> {
    let mut path = vec![start.clone()];
    let mut expanded = 0u64;
    for _ in 0..max_steps {
        if env.is_initial(path.last().unwrap()) {
            break;
        }
        let current = path.last().unwrap().clone();
        let logp = policy
            .backward_log_probs(env, std::slice::from_ref(&current))
            .remove(0);
        expanded += 1;
        let total: f64 = logp.iter().filter(|l| l.is_finite()).map(|l| l.exp()).sum();
        debug_assert!(total > 0.0, "state has no backward moves");
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (mv, &l) in logp.iter().enumerate() {
            if l.is_finite() {
                acc += l.exp();
                if u < acc {
                    chosen = Some(mv);
                    break;
                }
            }
        }
        let chosen = chosen
            .or_else(|| (0..logp.len()).rev().find(|&mv| logp[mv].is_finite()))
            .expect("legal backward move");
        let next = env.backward_step(&current, chosen).expect("legal move");
        path.push(next);
    }
    finish_walk(env, path, expanded)
}

/// Follows the highest-probability backward move at every step, ties broken
/// by the lowest move index.
pub fn greedy_path<E: GfnEnv, P: PolicyModel<E>>(
    policy: &P,
    env: &E,
    start: &E::State,
    max_steps: usize,
) -> SolveResult<E::State> {
    let mut path = vec![start.clone()];
    let mut expanded = 0u64;
    for _ in 0..max_steps {
        if env.is_initial(path.last().unwrap()) {
            break;
        }
        let current = path.last().unwrap().clone();
        let logp = policy
            .backward_log_probs(env, std::slice::from_ref(&current))
            .remove(0);
        expanded += 1;
        let mut best = f64::NEG_INFINITY;
        let mut chosen = None;
        for (mv, &l) in logp.iter().enumerate() {
            if l > best {
                best = l;
                chosen = Some(mv);
            }
        }
        let chosen = chosen.expect("legal backward move");
        let next = env.backward_step(&current, chosen).expect("legal move");
        path.push(next);
    }
    finish_walk(env, path, expanded)
}

fn finish_walk<E: GfnEnv>(env: &E, path: Vec<E::State>, expanded: u64) -> SolveResult<E::State> {
    let solved = env.is_initial(path.last().unwrap());
    SolveResult {
        length: path.len() - 1,
        outcome: if solved {
            Outcome::Solved
        } else {
            Outcome::BudgetExhausted
        },
        nodes_expanded: expanded,
        path,
    }
}

#[derive(Clone, Debug)]
struct BeamEntry<S> {
    state: S,
    /// Cumulative log-probability of the walk from the start.
    score: f64,
    /// Index into the previous level's entries.
    parent: usize,
}

struct BeamLane<S> {
    levels: Vec<Vec<BeamEntry<S>>>,
    result: Option<SolveResult<S>>,
    expanded: u64,
}

/// Level-synchronous beam search over backward walks for a batch of starts.
///
/// Every live beam entry is extended by all legal backward moves, scored by
/// the cumulative log-probability, duplicates of the same state keep the best
/// copy (earlier entry on ties), and the best `width` candidates survive.
/// A lane stops as soon as some candidate reaches the goal, returning that
/// candidate's walk. All lanes share one policy evaluation per level, with
/// identical states across lanes evaluated once; results do not depend on
/// that batching.
pub fn beam_search<E: GfnEnv, P: PolicyModel<E>>(
    policy: &P,
    env: &E,
    starts: &[E::State],
    width: usize,
    max_steps: usize,
) -> Vec<SolveResult<E::State>> {
    assert!(width >= 1, "beam width must be at least 1");
    let mut lanes: Vec<BeamLane<E::State>> = starts
        .iter()
        .map(|s| {
            let mut lane = BeamLane {
                levels: vec![vec![BeamEntry {
                    state: s.clone(),
                    score: 0.0,
                    parent: usize::MAX,
                }]],
                result: None,
                expanded: 0,
            };
            if env.is_initial(s) {
                lane.result = Some(SolveResult {
                    path: vec![s.clone()],
                    length: 0,
                    nodes_expanded: 0,
                    outcome: Outcome::Solved,
                });
            }
            lane
        })
        .collect();
    for _level in 0..max_steps {
        // shared policy evaluation over the distinct live states
        let mut row_of: HashMap<E::State, usize> = HashMap::new();
        let mut batch: Vec<E::State> = Vec::new();
        for lane in lanes.iter().filter(|l| l.result.is_none()) {
            for entry in lane.levels.last().unwrap() {
                row_of.entry(entry.state.clone()).or_insert_with(|| {
                    batch.push(entry.state.clone());
                    batch.len() - 1
                });
            }
        }
        if batch.is_empty() {
            break;
        }
        let logp = policy.backward_log_probs(env, &batch);
        for lane in lanes.iter_mut().filter(|l| l.result.is_none()) {
            let entries = lane.levels.last().unwrap().clone();
            // expand, dropping duplicate states (best score wins, earlier
            // entry on ties)
            let mut next: Vec<BeamEntry<E::State>> = Vec::new();
            let mut seen: HashMap<E::State, usize> = HashMap::new();
            for (idx, entry) in entries.iter().enumerate() {
                lane.expanded += 1;
                let row = &logp[row_of[&entry.state]];
                for (mv, &l) in row.iter().enumerate() {
                    if !l.is_finite() {
                        continue;
                    }
                    let child = env.backward_step(&entry.state, mv).expect("legal move");
                    let score = entry.score + l;
                    match seen.get(&child) {
                        Some(&at) if next[at].score >= score => {}
                        Some(&at) => {
                            next[at] = BeamEntry {
                                state: child,
                                score,
                                parent: idx,
                            };
                        }
                        None => {
                            seen.insert(child.clone(), next.len());
                            next.push(BeamEntry {
                                state: child,
                                score,
                                parent: idx,
                            });
                        }
                    }
                }
            }
            // keep the top `width` by score; insertion order breaks ties, so
            // width one reproduces greedy decoding exactly
            let mut order: Vec<usize> = (0..next.len()).collect();
            order.sort_by(|&a, &b| next[b].score.total_cmp(&next[a].score).then(a.cmp(&b)));
            order.truncate(width);
            let survivors: Vec<BeamEntry<E::State>> =
                order.into_iter().map(|i| next[i].clone()).collect();
            // a retained candidate reaching the goal ends this lane
            if let Some(goal_entry) = survivors.iter().find(|e| env.is_initial(&e.state)) {
                let mut rev = vec![goal_entry.state.clone()];
                let mut parent = goal_entry.parent;
                for level in lane.levels.iter().rev() {
                    rev.push(level[parent].state.clone());
                    parent = level[parent].parent;
                    if parent == usize::MAX {
                        break;
                    }
                }
                rev.reverse();
                lane.result = Some(SolveResult {
                    length: rev.len() - 1,
                    nodes_expanded: lane.expanded,
                    outcome: Outcome::Solved,
                    path: rev,
                });
                continue;
            }
            lane.levels.push(survivors);
        }
    }
    lanes
        .into_iter()
        .map(|lane| {
            lane.result.unwrap_or_else(|| {
                // report the best surviving candidate's walk so far
                let mut rev = Vec::new();
                let mut level = lane.levels.len() - 1;
                let mut idx = 0usize; // entries are sorted best-first
                loop {
                    let entry = &lane.levels[level][idx];
                    rev.push(entry.state.clone());
                    if entry.parent == usize::MAX {
                        break;
                    }
                    idx = entry.parent;
                    level -= 1;
                }
                rev.reverse();
                SolveResult {
                    length: rev.len() - 1,
                    nodes_expanded: lane.expanded,
                    outcome: Outcome::BudgetExhausted,
                    path: rev,
                }
            })
        })
        .collect()
}

/// One per-start line of a solve report.
#[derive(Clone, Debug)]
pub struct SolveReportRow {
    pub start_id: usize,
    pub outcome: Outcome,
    /// Path length, `-1` when unsolved.
    pub length: i64,
    /// Oracle shortest-path length, `-1` when no oracle is available.
    pub optimal_length: i64,
    pub nodes_expanded: u64,
    pub wall_ms: u64,
}

pub const REPORT_HEADER: &str = "start_id,outcome,length,optimal_length,nodes_expanded,wall_ms";

pub fn format_report_csv(rows: &[SolveReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.start_id, r.outcome, r.length, r.optimal_length, r.nodes_expanded, r.wall_ms
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cayley::{swap_env, TestSetMode};
    use crate::graph::build_gfn_env;
    use crate::nn::init_params;
    use crate::oracle::{bfs_distances, explicit_from_cayley, inversion_count, validate_path};
    use crate::rng::{domain, substream};
    use crate::tabular::{optimal_backward_policy, ParentChoice, RewardSpec};
    use crate::trainer::TrainConfig;

    fn net_for<E: GfnEnv>(env: &E, seed: u64) -> ParameterStore<f64> {
        let cfg = TrainConfig {
            hidden: 24,
            n_blocks: 2,
            ..TrainConfig::default()
        };
        init_params(&cfg.network_config(env), seed).unwrap()
    }

    #[test]
    fn start_at_goal_solves_immediately() {
        let env = swap_env(4).unwrap();
        let params = net_for(&env, 1);
        let policy = NeuralPolicy::new(&params);
        let goal = env.initial();
        let mut rng = substream(0, domain::SEARCH, 0);
        for result in [
            sample_path(&policy, &env, &goal, 100, &mut rng),
            greedy_path(&policy, &env, &goal, 100),
            beam_search(&policy, &env, &[goal.clone()], 4, 100).remove(0),
        ] {
            assert!(result.solved());
            assert_eq!(result.length, 0);
            assert_eq!(result.path, vec![goal.clone()]);
        }
    }

    #[test]
    fn deterministic_path_graph_solves_in_two_steps() {
        // initial 2 -> 1 -> 0; from state 0 the only backward walk is 0,1,2
        let env = build_gfn_env(&[(0, 1), (1, 2)], 3, 2).unwrap();
        let params = net_for(&env, 2);
        let policy = NeuralPolicy::new(&params);
        let start = crate::graph::StateId(0);
        let mut rng = substream(1, domain::SEARCH, 0);
        for result in [
            sample_path(&policy, &env, &start, 100, &mut rng),
            greedy_path(&policy, &env, &start, 100),
            beam_search(&policy, &env, &[start], 3, 100).remove(0),
        ] {
            assert!(result.solved());
            assert_eq!(result.length, 2);
            assert_eq!(validate_path(&env, &result.path), Ok(2));
        }
    }

    #[test]
    fn budget_exhaustion_is_an_outcome() {
        let env = build_gfn_env(&[(0, 1), (1, 2)], 3, 2).unwrap();
        let params = net_for(&env, 3);
        let policy = NeuralPolicy::new(&params);
        let start = crate::graph::StateId(0);
        let result = greedy_path(&policy, &env, &start, 1);
        assert_eq!(result.outcome, Outcome::BudgetExhausted);
        let result = beam_search(&policy, &env, &[start], 2, 1).remove(0);
        assert_eq!(result.outcome, Outcome::BudgetExhausted);
    }

    #[test]
    fn beam_width_one_equals_greedy_exactly() {
        let env = swap_env(5).unwrap();
        let params = net_for(&env, 4);
        let policy = NeuralPolicy::new(&params);
        let starts =
            crate::cayley::sample_test_set(&env, 40, 9, &TestSetMode::UniformPermutation).unwrap();
        let beams = beam_search(&policy, &env, &starts, 1, 100);
        for (start, beam) in starts.iter().zip(beams) {
            let greedy = greedy_path(&policy, &env, start, 100);
            assert_eq!(greedy.outcome, beam.outcome);
            assert_eq!(greedy.path, beam.path, "paths diverge for {start:?}");
        }
    }

    #[test]
    fn batched_beam_equals_per_start_beam() {
        let env = swap_env(4).unwrap();
        let params = net_for(&env, 5);
        let policy = NeuralPolicy::new(&params);
        let starts =
            crate::cayley::sample_test_set(&env, 12, 11, &TestSetMode::UniformPermutation).unwrap();
        let together = beam_search(&policy, &env, &starts, 3, 100);
        for (start, batch_result) in starts.iter().zip(&together) {
            let alone = beam_search(&policy, &env, &[start.clone()], 3, 100).remove(0);
            assert_eq!(alone.path, batch_result.path);
            assert_eq!(alone.outcome, batch_result.outcome);
        }
    }

    #[test]
    fn solved_paths_validate_and_wider_beams_dominate() {
        let env = swap_env(5).unwrap();
        let params = net_for(&env, 6);
        let policy = NeuralPolicy::new(&params);
        let starts =
            crate::cayley::sample_test_set(&env, 25, 13, &TestSetMode::UniformPermutation).unwrap();
        let mut solved_by_width = Vec::new();
        for width in [1usize, 4, 16] {
            let results = beam_search(&policy, &env, &starts, width, 100);
            let mut solved = 0;
            for r in &results {
                if r.solved() {
                    solved += 1;
                    assert_eq!(validate_path(&env, &r.path), Ok(r.length));
                }
            }
            solved_by_width.push(solved);
        }
        // solve counts per width are reported rather than asserted monotone
        // (beam search is a heuristic); an untrained width-16 beam must still
        // stumble into the goal for at least some starts
        println!("solved by width 1/4/16: {solved_by_width:?}");
        assert!(*solved_by_width.last().unwrap() >= 1);
    }

    #[test]
    fn transplanted_optimal_policy_walks_shortest_paths() {
        let cayley = swap_env(4).unwrap();
        let (graph, _) = explicit_from_cayley(&cayley, 100).unwrap();
        let dist = bfs_distances(&graph);
        let reward = RewardSpec::uniform(graph.n_states());
        let pb = optimal_backward_policy(&graph, &dist, &reward, ParentChoice::LexicographicMin);
        let policy = TabularPolicyModel { policy: &pb };
        for s in graph.states() {
            let result = greedy_path(&policy, &graph, &s, 100);
            assert!(result.solved());
            assert_eq!(result.length as u16, dist.dist[s.index()]);
            // sampling also never leaves shortest paths for this policy
            let mut rng = substream(2, domain::SEARCH, s.0 as u64);
            let sampled = sample_path(&policy, &graph, &s, 100, &mut rng);
            assert_eq!(sampled.length as u16, dist.dist[s.index()]);
        }
    }

    #[test]
    fn greedy_on_trained_free_inversion_oracle() {
        // with random weights greedy rarely solves the 5-element puzzle, but
        // every solved path must at least respect the inversion lower bound
        let env = swap_env(5).unwrap();
        let params = net_for(&env, 7);
        let policy = NeuralPolicy::new(&params);
        let starts =
            crate::cayley::sample_test_set(&env, 10, 17, &TestSetMode::UniformPermutation).unwrap();
        for start in &starts {
            let r = greedy_path(&policy, &env, start, 60);
            if r.solved() {
                assert!(r.length >= inversion_count(start));
            }
        }
    }

    #[test]
    fn report_csv_format() {
        let rows = vec![SolveReportRow {
            start_id: 3,
            outcome: Outcome::Solved,
            length: 7,
            optimal_length: 7,
            nodes_expanded: 21,
            wall_ms: 0,
        }];
        let text = format_report_csv(&rows);
        assert!(text.starts_with(REPORT_HEADER));
        assert!(text.contains("3,solved,7,7,21,0"));
    }
}
