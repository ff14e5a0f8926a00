//! Ground truth: breadth-first distance tables, inversion counts and path
//! validation. Everything the learned components claim is checked against
//! this module, so it stays deliberately simple and independent of them.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::cayley::{CayleyEnvironment, Permutation};
use crate::graph::{build_gfn_env, ExplicitGraph, GfnEnv};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration exceeded the budget after visiting {visited} states")]
    BudgetExceeded { visited: usize },
    #[error("distance file is malformed: {0}")]
    BadFormat(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Cayley(#[from] crate::cayley::CayleyError),
    #[error(transparent)]
    Env(#[from] crate::graph::EnvError),
}

/// Why a proposed path is not a valid solution.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathError {
    #[error("step {0} is not a legal move of the original problem")]
    IllegalMove(usize),
    #[error("path does not end at the goal state")]
    WrongEndpoint,
}

/// Exact shortest-path distances from the initial state, indexed by
/// [`StateId`].
#[derive(Clone, Debug)]
pub struct DistanceTable {
    pub dist: Vec<u16>,
}

impl DistanceTable {
    pub fn max(&self) -> u16 {
        self.dist.iter().copied().max().unwrap_or(0)
    }

    /// Number of states in each distance layer.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.max() as usize + 1];
        for &d in &self.dist {
            sizes[d as usize] += 1;
        }
        sizes
    }
}

/// Breadth-first distances over the forward transitions of an explicit
/// environment. Forward distance from the initial state equals the original
/// problem's distance to the goal by the edge-reversal construction.
pub fn bfs_distances(env: &ExplicitGraph) -> DistanceTable {
    let mut dist = vec![u16::MAX; env.n_states()];
    let s0 = env.initial_state();
    dist[s0.index()] = 0;
    let mut queue = VecDeque::new();
    queue.push_back(s0);
    while let Some(s) = queue.pop_front() {
        let d = dist[s.index()];
        for &c in env.children(s) {
            if dist[c.index()] == u16::MAX {
                dist[c.index()] = d + 1;
                queue.push_back(c);
            }
        }
    }
    DistanceTable { dist }
}

/// Breadth-first enumeration of an implicit puzzle environment, recording
/// states in discovery order along with their distances.
#[derive(Clone, Debug)]
pub struct CayleyDistances {
    /// States in discovery order; entry 0 is the goal.
    pub states: Vec<Permutation>,
    /// Distance of `states[i]` from the goal.
    pub dist: Vec<u16>,
    index: HashMap<Permutation, u32>,
}

impl CayleyDistances {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn distance_of(&self, s: &Permutation) -> Option<u16> {
        self.index.get(s).map(|&i| self.dist[i as usize])
    }

    pub fn max(&self) -> u16 {
        self.dist.iter().copied().max().unwrap_or(0)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.max() as usize + 1];
        for &d in &self.dist {
            sizes[d as usize] += 1;
        }
        sizes
    }
}

pub fn bfs_distances_cayley(
    env: &CayleyEnvironment,
    budget: usize,
) -> Result<CayleyDistances, OracleError> {
    let goal = env.goal();
    let mut states = vec![goal.clone()];
    let mut dist = vec![0u16];
    let mut index = HashMap::new();
    index.insert(goal.clone(), 0u32);
    let mut queue = VecDeque::new();
    queue.push_back(0u32);
    while let Some(id) = queue.pop_front() {
        let s = states[id as usize].clone();
        let d = dist[id as usize];
        for mv in 0..env.n_moves() {
            if let Some((child, _)) = env.forward_step(&s, mv) {
                if !index.contains_key(&child) {
                    if states.len() >= budget {
                        return Err(OracleError::BudgetExceeded {
                            visited: states.len(),
                        });
                    }
                    let cid = states.len() as u32;
                    index.insert(child.clone(), cid);
                    states.push(child);
                    dist.push(d + 1);
                    queue.push_back(cid);
                }
            }
        }
    }
    Ok(CayleyDistances {
        states,
        dist,
        index,
    })
}

/// Materializes an implicit puzzle environment as an [`ExplicitGraph`] over
/// its breadth-first enumeration. State `i` of the graph is `states[i]`; the
/// goal becomes state 0.
pub fn explicit_from_cayley(
    env: &CayleyEnvironment,
    budget: usize,
) -> Result<(ExplicitGraph, Vec<Permutation>), OracleError> {
    let table = bfs_distances_cayley(env, budget)?;
    let n = table.n_states();
    let mut source_edges = Vec::new();
    for (id, s) in table.states.iter().enumerate() {
        for mv in 0..env.n_moves() {
            if let Some((child, _)) = env.forward_step(s, mv) {
                let cid = table.index[&child];
                // forward transition id -> cid came from source edge cid -> id
                source_edges.push((cid, id as u32));
            }
        }
    }
    let graph = build_gfn_env(&source_edges, n, 0)?;
    Ok((graph, table.states))
}

/// Number of pairs `i < j` with `state[i] > state[j]`. For the adjacent-swap
/// puzzle this is exactly the distance to the identity.
pub fn inversion_count(state: &Permutation) -> usize {
    let v = state.values();
    let mut count = 0;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            if v[i] > v[j] {
                count += 1;
            }
        }
    }
    count
}

/// Checks that `path` is a valid solution: consecutive states are joined by a
/// legal move of the original problem (a backward transition of the reduced
/// environment) and the final state is the goal. Returns the length.
pub fn validate_path<E: GfnEnv>(env: &E, path: &[E::State]) -> Result<usize, PathError> {
    if path.is_empty() {
        return Err(PathError::WrongEndpoint);
    }
    for (k, w) in path.windows(2).enumerate() {
        let legal = (0..env.n_moves()).any(|mv| env.backward_step(&w[0], mv).as_ref() == Some(&w[1]));
        if !legal {
            return Err(PathError::IllegalMove(k));
        }
    }
    if !env.is_initial(path.last().unwrap()) {
        return Err(PathError::WrongEndpoint);
    }
    Ok(path.len() - 1)
}

// --- pocket cube perfect index ----------------------------------------------
//
// The pocket cube is small enough to enumerate completely, but hashing 3.7M
// sticker arrays is wasteful. Each state is determined by which cubie sits in
// each of the seven movable corner slots and which of its three stickers
// faces the slot's first position, so states embed injectively into
// 7! * 3^7 = 11,022,480 integers. The distance table is a flat byte array
// over that product space (about 11 MB; unreachable codes stay at 0xFF).

const CUBE2_PRODUCT: usize = 5040 * 2187;

/// Precomputed slot layout for ranking pocket-cube states.
pub struct Cube2Index {
    /// Sorted sticker positions of each corner slot.
    slots: Vec<[usize; 3]>,
    slot_of_pos: [u8; 24],
    role_of_pos: [u8; 24],
    /// Slot occupied by the fixed cubie; skipped in the rank.
    fixed_slot: usize,
    /// Dense renumbering of movable slots and cubies to 0..7.
    movable_of_slot: [u8; 8],
}

impl Cube2Index {
    pub fn new() -> Self {
        let cells = crate::cayley::cube2_corner_cells();
        assert_eq!(cells.len(), 8);
        let mut slot_of_pos = [0u8; 24];
        let mut role_of_pos = [0u8; 24];
        for (slot, cell) in cells.iter().enumerate() {
            for (role, &pos) in cell.iter().enumerate() {
                slot_of_pos[pos] = slot as u8;
                role_of_pos[pos] = role as u8;
            }
        }
        // The fixed cubie is the one untouched by the three chosen faces;
        // find it from the generators directly.
        let env = crate::cayley::cube2_env();
        let mut moved = [false; 24];
        for mv in env.generators().moves() {
            for (i, &v) in mv.values().iter().enumerate() {
                if i != v as usize {
                    moved[i] = true;
                }
            }
        }
        let fixed_pos = (0..24).find(|&i| !moved[i]).expect("one corner is fixed");
        let fixed_slot = slot_of_pos[fixed_pos] as usize;
        let mut movable_of_slot = [0u8; 8];
        let mut next = 0u8;
        for slot in 0..8 {
            if slot != fixed_slot {
                movable_of_slot[slot] = next;
                next += 1;
            }
        }
        Cube2Index {
            slots: cells,
            slot_of_pos,
            role_of_pos,
            fixed_slot,
            movable_of_slot,
        }
    }

    /// Injective code of a reachable state in `0..CUBE2_PRODUCT`.
    pub fn rank(&self, state: &Permutation) -> u32 {
        debug_assert_eq!(state.len(), 24);
        let v = state.values();
        let mut cubies = [0u8; 7];
        let mut oris = [0u8; 7];
        for slot in 0..8 {
            if slot == self.fixed_slot {
                debug_assert_eq!(
                    self.slot_of_pos[v[self.slots[slot][0]] as usize] as usize,
                    slot,
                    "fixed cubie moved"
                );
                continue;
            }
            let label = v[self.slots[slot][0]] as usize;
            let home = self.slot_of_pos[label];
            let k = self.movable_of_slot[slot as usize] as usize;
            cubies[k] = self.movable_of_slot[home as usize];
            oris[k] = self.role_of_pos[label];
        }
        // Lehmer rank of the 7-element cubie arrangement.
        let mut lehmer: u32 = 0;
        for i in 0..7 {
            let mut smaller = 0u32;
            for j in i + 1..7 {
                if cubies[j] < cubies[i] {
                    smaller += 1;
                }
            }
            lehmer = lehmer * (7 - i as u32) + smaller;
        }
        let mut ori_code: u32 = 0;
        for i in 0..7 {
            ori_code = ori_code * 3 + oris[i] as u32;
        }
        lehmer * 2187 + ori_code
    }
}

impl Default for Cube2Index {
    fn default() -> Self {
        Self::new()
    }
}

/// Full breadth-first distance table of the pocket cube.
pub struct Cube2Distances {
    index: Cube2Index,
    /// Distance by rank code; 0xFF marks unreachable codes.
    dist: Vec<u8>,
    /// Rank codes in discovery order (the canonical enumeration order).
    pub order: Vec<u32>,
    pub max_distance: u8,
}

impl Cube2Distances {
    pub fn n_states(&self) -> usize {
        self.order.len()
    }

    pub fn distance_of(&self, state: &Permutation) -> Option<u8> {
        let d = self.dist[self.index.rank(state) as usize];
        (d != u8::MAX).then_some(d)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.max_distance as usize + 1];
        for &d in self.dist.iter().filter(|&&d| d != u8::MAX) {
            sizes[d as usize] += 1;
        }
        sizes
    }

    /// Distances in discovery order, widened for the on-disk format.
    pub fn dists_in_order(&self) -> impl Iterator<Item = u16> + '_ {
        self.order.iter().map(|&r| self.dist[r as usize] as u16)
    }
}

/// Enumerates every pocket-cube state by breadth-first search from the solved
/// state. Touches all 3,674,160 states; takes a few seconds and ~30 MB.
pub fn cube2_distance_table() -> Cube2Distances {
    let env = crate::cayley::cube2_env();
    let index = Cube2Index::new();
    let mut dist = vec![u8::MAX; CUBE2_PRODUCT];
    let mut order = Vec::with_capacity(3_674_160);
    let goal = env.goal();
    let r0 = index.rank(&goal);
    dist[r0 as usize] = 0;
    order.push(r0);
    let mut queue = VecDeque::new();
    queue.push_back(goal);
    let mut max_distance = 0u8;
    while let Some(s) = queue.pop_front() {
        let d = dist[index.rank(&s) as usize];
        for mv in 0..env.n_moves() {
            if let Some((child, _)) = env.forward_step(&s, mv) {
                let r = index.rank(&child) as usize;
                if dist[r] == u8::MAX {
                    dist[r] = d + 1;
                    max_distance = max_distance.max(d + 1);
                    order.push(r as u32);
                    queue.push_back(child);
                }
            }
        }
    }
    Cube2Distances {
        index,
        dist,
        order,
        max_distance,
    }
}

// --- binary distance format ---------------------------------------------------

const DIST_MAGIC: &[u8; 5] = b"GFND1";

/// Writes a distance table: magic `GFND1`, little-endian u32 state count,
/// then one little-endian u16 distance per state in enumeration order.
pub fn write_distance_file(path: &Path, dists: &[u16]) -> Result<(), OracleError> {
    let io_err = |source| OracleError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    let mut buf = Vec::with_capacity(9 + dists.len() * 2);
    buf.extend_from_slice(DIST_MAGIC);
    buf.extend_from_slice(&(dists.len() as u32).to_le_bytes());
    for &d in dists {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    f.write_all(&buf).map_err(io_err)
}

pub fn read_distance_file(path: &Path) -> Result<Vec<u16>, OracleError> {
    let io_err = |source| OracleError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() < 9 || &bytes[0..5] != DIST_MAGIC {
        return Err(OracleError::BadFormat("missing GFND1 magic".into()));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() != 9 + 2 * count {
        return Err(OracleError::BadFormat(format!(
            "expected {} distance entries, file holds {} bytes of payload",
            count,
            bytes.len() - 9
        )));
    }
    Ok(bytes[9..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cayley::{cube2_env, swap_env, TestSetMode};

    #[test]
    fn three_path_distances() {
        let env = build_gfn_env(&[(0, 1), (1, 2)], 3, 2).unwrap();
        let table = bfs_distances(&env);
        assert_eq!(table.dist, vec![2, 1, 0]);
    }

    #[test]
    fn inversion_examples() {
        assert_eq!(inversion_count(&Permutation::identity(5)), 0);
        let one = Permutation::from_values(vec![1, 0, 2]).unwrap();
        assert_eq!(inversion_count(&one), 1);
        let rev = Permutation::from_values(vec![3, 2, 1, 0]).unwrap();
        assert_eq!(inversion_count(&rev), 6);
    }

    #[test]
    fn swap_distances_equal_inversions_up_to_n7() {
        for n in 2..=7usize {
            let env = swap_env(n).unwrap();
            let table = bfs_distances_cayley(&env, 6000).unwrap();
            for (i, s) in table.states.iter().enumerate() {
                assert_eq!(
                    table.dist[i] as usize,
                    inversion_count(s),
                    "distance mismatch at n={n}"
                );
            }
        }
    }

    #[test]
    fn swap4_max_distance_is_six() {
        let env = swap_env(4).unwrap();
        let table = bfs_distances_cayley(&env, 100).unwrap();
        assert_eq!(table.max(), 6);
        assert_eq!(table.n_states(), 24);
    }

    #[test]
    fn swap_layers_match_inversion_histogram() {
        // Independent route: enumerate all permutations recursively, count
        // inversions, and compare the histogram against the BFS layers.
        fn perms(n: usize) -> Vec<Vec<u8>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for slot in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(slot, (n - 1) as u8);
                    out.push(q);
                }
            }
            out
        }
        for n in 2..=6usize {
            let mut hist = vec![0usize; n * (n - 1) / 2 + 1];
            for vals in perms(n) {
                let p = Permutation::from_values(vals).unwrap();
                hist[inversion_count(&p)] += 1;
            }
            let env = swap_env(n).unwrap();
            let table = bfs_distances_cayley(&env, 800).unwrap();
            assert_eq!(table.layer_sizes(), hist, "layer mismatch at n={n}");
        }
    }

    #[test]
    fn distance_table_local_structure() {
        let env = swap_env(5).unwrap();
        let (graph, _) = explicit_from_cayley(&env, 200).unwrap();
        let table = bfs_distances(&graph);
        for s in graph.states() {
            let d = table.dist[s.index()];
            for &c in graph.children(s) {
                let dc = table.dist[c.index()];
                assert!((d as i32 - dc as i32).abs() <= 1);
            }
            if d > 0 {
                assert!(
                    graph
                        .parents(s)
                        .iter()
                        .any(|p| table.dist[p.index()] == d - 1),
                    "no parent one layer closer"
                );
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let env = swap_env(5).unwrap();
        assert!(matches!(
            bfs_distances_cayley(&env, 10),
            Err(OracleError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn path_validation_examples() {
        let env = swap_env(3).unwrap();
        let goal = env.goal();
        assert_eq!(validate_path(&env, &[goal.clone()]), Ok(0));
        let one_off = Permutation::from_values(vec![1, 0, 2]).unwrap();
        assert_eq!(validate_path(&env, &[one_off.clone(), goal.clone()]), Ok(1));
        // skipping two moves at once is illegal
        let two_off = Permutation::from_values(vec![1, 2, 0]).unwrap();
        assert_eq!(
            validate_path(&env, &[two_off.clone(), goal.clone()]),
            Err(PathError::IllegalMove(0))
        );
        // a legal walk that stops short of the goal
        assert_eq!(
            validate_path(&env, &[two_off, one_off]),
            Err(PathError::WrongEndpoint)
        );
    }

    use crate::graph::StateId;

    #[test]
    fn explicit_from_cayley_matches_direct_bfs() {
        let env = swap_env(4).unwrap();
        let (graph, states) = explicit_from_cayley(&env, 100).unwrap();
        assert_eq!(graph.n_states(), 24);
        assert_eq!(graph.initial_state(), StateId(0));
        assert!(states[0].is_identity());
        let report = crate::graph::validate_env(&graph);
        assert!(report.is_ok(), "{:?}", report.violations);
        let gd = bfs_distances(&graph);
        let cd = bfs_distances_cayley(&env, 100).unwrap();
        for (i, s) in states.iter().enumerate() {
            assert_eq!(gd.dist[i], cd.distance_of(s).unwrap());
        }
        // degree structure: every state has n-1 parents except the goal
        for s in graph.states() {
            if s == graph.initial_state() {
                assert!(graph.parents(s).is_empty());
            } else {
                assert_eq!(graph.parents(s).len(), 3);
            }
        }
    }

    #[test]
    fn cube2_rank_agrees_with_hashed_bfs_to_depth_four() {
        // Cross-validate the perfect index against a plain hashed BFS.
        let env = cube2_env();
        let index = Cube2Index::new();
        let mut seen: HashMap<Permutation, u8> = HashMap::new();
        let mut ranks: HashMap<u32, Permutation> = HashMap::new();
        let goal = env.goal();
        seen.insert(goal.clone(), 0);
        ranks.insert(index.rank(&goal), goal.clone());
        let mut frontier = vec![goal];
        let mut layer_sizes = vec![1usize];
        for depth in 1..=4u8 {
            let mut next = Vec::new();
            for s in &frontier {
                for mv in 0..env.n_moves() {
                    if let Some((child, _)) = env.forward_step(s, mv) {
                        if !seen.contains_key(&child) {
                            seen.insert(child.clone(), depth);
                            let r = index.rank(&child);
                            assert!(
                                ranks.insert(r, child.clone()).is_none(),
                                "rank collision at depth {depth}"
                            );
                            next.push(child);
                        }
                    }
                }
            }
            layer_sizes.push(next.len());
            frontier = next;
        }
        assert_eq!(layer_sizes, vec![1, 6, 27, 120, 534]);
    }

    #[test]
    fn cube2_scrambles_have_nonnegative_bounded_distance() {
        // Cheap structural check without the full table: rank stays in range
        // on random scrambles.
        let env = cube2_env();
        let index = Cube2Index::new();
        let states =
            crate::cayley::sample_test_set(&env, 50, 5, &TestSetMode::Scramble(30)).unwrap();
        for s in states {
            assert!((index.rank(&s) as usize) < CUBE2_PRODUCT);
        }
    }

    #[test]
    fn distance_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dists.gfnd");
        let dists: Vec<u16> = vec![0, 1, 1, 2, 3, 9];
        write_distance_file(&path, &dists).unwrap();
        assert_eq!(read_distance_file(&path).unwrap(), dists);
        std::fs::write(&path, b"BOGUS").unwrap();
        assert!(matches!(
            read_distance_file(&path),
            Err(OracleError::BadFormat(_))
        ));
    }
}
