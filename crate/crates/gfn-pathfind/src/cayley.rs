//! Permutation-puzzle environments: the adjacent-swap sorting puzzle and the
//! pocket (2x2x2) and standard (3x3x3) cubes in the quarter-turn metric.
//!
//! States are permutations acting on positions, moves are fixed permutations
//! applied on the right, and the goal is always the identity. The reduction
//! to a sampling environment reverses the move edges: a forward step applies
//! the inverse of a generator (and never lands on the identity, whose
//! incoming edges are removed), a backward step applies the generator itself
//! and is what an actual solver executes.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::graph::GfnEnv;
use crate::rng::substream;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CayleyError {
    #[error("permutation length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("not a permutation: {0}")]
    InvalidPermutation(String),
    #[error("generator {0} is the identity")]
    IdentityGenerator(usize),
    #[error("generator set is empty")]
    EmptyGeneratorSet,
    #[error("swap puzzle needs n >= 2, got {0}")]
    TooFewElements(usize),
    #[error("sampling mode {mode} is not supported for this environment: {why}")]
    ModeUnsupported { mode: String, why: String },
    #[error("state enumeration exceeded the budget of {budget} states")]
    BudgetExceeded { budget: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A permutation of `0..m`, stored as the image array: `map[i]` is the value
/// at position `i`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation {
    map: Vec<u8>,
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Permutation({:?})", self.map)
    }
}

impl Permutation {
    pub fn identity(m: usize) -> Self {
        assert!(m <= 256, "permutation length limited to 256");
        Permutation {
            map: (0..m as u16).map(|v| v as u8).collect(),
        }
    }

    /// Validates bijectivity.
    pub fn from_values(values: Vec<u8>) -> Result<Self, CayleyError> {
        let m = values.len();
        if m > 256 {
            return Err(CayleyError::InvalidPermutation(
                "length exceeds 256".into(),
            ));
        }
        let mut seen = vec![false; m];
        for &v in &values {
            if (v as usize) >= m || seen[v as usize] {
                return Err(CayleyError::InvalidPermutation(format!("{values:?}")));
            }
            seen[v as usize] = true;
        }
        Ok(Permutation { map: values })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &v)| v as usize == i)
    }

    /// Applies `mv` on the right: the entry at position `i` of the result is
    /// the entry of `self` at position `mv[i]`. Rearranges positions, so a
    /// puzzle move is one fixed `mv` regardless of the current state.
    pub fn apply_move(&self, mv: &Permutation) -> Result<Permutation, CayleyError> {
        if self.len() != mv.len() {
            return Err(CayleyError::LengthMismatch(self.len(), mv.len()));
        }
        Ok(self.compose(mv))
    }

    pub(crate) fn compose(&self, mv: &Permutation) -> Permutation {
        debug_assert_eq!(self.len(), mv.len());
        let map = mv.map.iter().map(|&p| self.map[p as usize]).collect();
        Permutation { map }
    }

    pub fn inverse(&self) -> Permutation {
        let mut map = vec![0u8; self.len()];
        for (i, &v) in self.map.iter().enumerate() {
            map[v as usize] = i as u8;
        }
        Permutation { map }
    }
}

/// Dense one-hot encoding of a permutation: a length `m*m` vector whose entry
/// `i*m + state[i]` is one.
pub fn one_hot_encode(state: &Permutation) -> Vec<f64> {
    let m = state.len();
    let mut out = vec![0.0; m * m];
    for (i, &v) in state.values().iter().enumerate() {
        out[i * m + v as usize] = 1.0;
    }
    out
}

/// The moves of a puzzle plus their precomputed inverses.
#[derive(Clone, Debug)]
pub struct GeneratorSet {
    moves: Vec<Permutation>,
    inverses: Vec<Permutation>,
    names: Vec<String>,
}

impl GeneratorSet {
    pub fn new(moves: Vec<Permutation>, names: Vec<String>) -> Result<Self, CayleyError> {
        if moves.is_empty() {
            return Err(CayleyError::EmptyGeneratorSet);
        }
        assert_eq!(moves.len(), names.len(), "one name per move");
        let m = moves[0].len();
        for (i, mv) in moves.iter().enumerate() {
            if mv.len() != m {
                return Err(CayleyError::LengthMismatch(m, mv.len()));
            }
            if mv.is_identity() {
                return Err(CayleyError::IdentityGenerator(i));
            }
        }
        let inverses = moves.iter().map(Permutation::inverse).collect();
        Ok(GeneratorSet {
            moves,
            inverses,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.moves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.moves[0].len()
    }

    pub fn moves(&self) -> &[Permutation] {
        &self.moves
    }

    pub fn inverses(&self) -> &[Permutation] {
        &self.inverses
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// A puzzle environment over a generator set with the identity as goal.
#[derive(Clone, Debug)]
pub struct CayleyEnvironment {
    gens: GeneratorSet,
    degree: usize,
    state_count: Option<u128>,
    log_count: f64,
    /// Set when the generators provably produce the full symmetric group on
    /// `degree` points (the swap puzzle); enables uniform permutation
    /// sampling.
    full_symmetric: bool,
    name: String,
}

impl CayleyEnvironment {
    pub fn new(
        gens: GeneratorSet,
        state_count: Option<u128>,
        log_count: f64,
        name: &str,
    ) -> Self {
        let degree = gens.degree();
        CayleyEnvironment {
            gens,
            degree,
            state_count,
            log_count,
            full_symmetric: false,
            name: name.to_string(),
        }
    }

    pub fn generators(&self) -> &GeneratorSet {
        &self.gens
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn goal(&self) -> Permutation {
        Permutation::identity(self.degree)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_full_symmetric(&self) -> bool {
        self.full_symmetric
    }
}

fn log_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

fn factorial_u128(n: usize) -> Option<u128> {
    let mut acc: u128 = 1;
    for k in 2..=n as u128 {
        acc = acc.checked_mul(k)?;
    }
    Some(acc)
}

/// Sorting puzzle on `n` elements: the `n-1` adjacent transpositions generate
/// the full symmetric group, so there are `n!` states.
pub fn swap_env(n: usize) -> Result<CayleyEnvironment, CayleyError> {
    if n < 2 {
        return Err(CayleyError::TooFewElements(n));
    }
    let mut moves = Vec::with_capacity(n - 1);
    let mut names = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let mut vals: Vec<u8> = (0..n as u16).map(|v| v as u8).collect();
        vals.swap(i, i + 1);
        moves.push(Permutation::from_values(vals).expect("transposition"));
        names.push(format!("t{i}"));
    }
    let gens = GeneratorSet::new(moves, names)?;
    let mut env = CayleyEnvironment::new(
        gens,
        factorial_u128(n),
        log_factorial(n),
        &format!("swap:{n}"),
    );
    env.full_symmetric = true;
    Ok(env)
}

// --- cube move tables -------------------------------------------------------
//
// Stickers live on the surface of a cube spanning [-n, n] per axis, with
// centers at odd in-plane coordinates and the face coordinate at +-n. A face
// turn is a 90-degree rotation of every sticker in the outer layer of that
// face. Generating the tables from geometry avoids hand-transcribed cycles;
// the unit tests pin down order-4 moves, commuting opposite faces and the
// exact sticker counts, and the breadth-first enumeration of the pocket cube
// pins the whole table set to the known state count.

type P3 = [i32; 3];

fn rotate90(p: P3, axis: usize, sign: i32) -> P3 {
    // right-handed rotation by 90 degrees about +axis, mirrored when sign < 0
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut q = p;
    q[a] = -sign * p[b];
    q[b] = sign * p[a];
    q
}

fn cube_sticker_positions(n: i32, skip_centers: bool) -> Vec<P3> {
    let mut pts = Vec::new();
    // faces in a fixed order: +y, -y, +x, -x, +z, -z
    for &(axis, dir) in &[(1, 1), (1, -1), (0, 1), (0, -1), (2, 1), (2, -1)] {
        let mut coords = Vec::new();
        let mut c = -(n - 1);
        while c <= n - 1 {
            coords.push(c);
            c += 2;
        }
        for &u in &coords {
            for &v in &coords {
                if skip_centers && u == 0 && v == 0 {
                    continue;
                }
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut p = [0i32; 3];
                p[axis] = dir * n;
                p[a] = u;
                p[b] = v;
                pts.push(p);
            }
        }
    }
    pts
}

/// Builds the quarter-turn permutation for the face with outward normal along
/// `+-axis`. The layer contains every sticker whose coordinate along the
/// face normal is within one unit of the face plane.
fn face_turn(
    positions: &[P3],
    index: &HashMap<P3, usize>,
    axis: usize,
    dir: i32,
    n: i32,
    ccw: bool,
) -> Permutation {
    let sign = if ccw { -1 } else { 1 } * dir;
    let mut map: Vec<u8> = (0..positions.len() as u16).map(|v| v as u8).collect();
    for (i, &p) in positions.iter().enumerate() {
        if p[axis] * dir >= n - 1 {
            let q = rotate90(p, axis, sign);
            let j = index[&q];
            // sticker at p moves to q: the new occupant of q came from p
            map[j] = i as u8;
        }
    }
    Permutation::from_values(map).expect("rotation permutes stickers")
}

fn cube_generators(n: i32, faces: &[(usize, i32, &str)], skip_centers: bool) -> GeneratorSet {
    let positions = cube_sticker_positions(n, skip_centers);
    let index: HashMap<P3, usize> = positions
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let mut moves = Vec::new();
    let mut names = Vec::new();
    for &(axis, dir, name) in faces {
        moves.push(face_turn(&positions, &index, axis, dir, n, false));
        names.push(name.to_string());
        moves.push(face_turn(&positions, &index, axis, dir, n, true));
        names.push(format!("{name}'"));
    }
    GeneratorSet::new(moves, names).expect("cube generators are valid")
}

/// Groups the 24 pocket-cube sticker positions into the 8 corner cubies by
/// coordinate octant, each triple sorted ascending. Slot order follows the
/// lowest position index. Used by the oracle to build a perfect state index.
pub(crate) fn cube2_corner_cells() -> Vec<[usize; 3]> {
    let positions = cube_sticker_positions(2, false);
    let mut cells: HashMap<(bool, bool, bool), Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        cells
            .entry((p[0] > 0, p[1] > 0, p[2] > 0))
            .or_default()
            .push(i);
    }
    let mut out: Vec<[usize; 3]> = cells
        .into_values()
        .map(|mut v| {
            v.sort_unstable();
            [v[0], v[1], v[2]]
        })
        .collect();
    out.sort_unstable();
    out
}

/// Pocket cube (2x2x2) in the quarter-turn metric.
///
/// States are permutations of the 24 sticker positions. Whole-cube rotations
/// are quotiented out by turning only the three faces that do not touch the
/// corner at (-x, -y, -z); that corner's stickers stay fixed, every other
/// configuration is reachable, and the state count is `7! * 3^6 = 3,674,160`.
pub fn cube2_env() -> CayleyEnvironment {
    let gens = cube_generators(2, &[(1, 1, "U"), (0, 1, "R"), (2, 1, "F")], false);
    CayleyEnvironment::new(
        gens,
        Some(3_674_160),
        (3_674_160f64).ln(),
        "cube2",
    )
}

/// Standard cube (3x3x3) in the quarter-turn metric: permutations of the 48
/// movable stickers (face centers are fixed and excluded), twelve generators.
pub fn cube3_env() -> CayleyEnvironment {
    let gens = cube_generators(
        3,
        &[
            (1, 1, "U"),
            (0, 1, "R"),
            (2, 1, "F"),
            (1, -1, "D"),
            (0, -1, "L"),
            (2, -1, "B"),
        ],
        true,
    );
    const CUBE3_STATES: u128 = 43_252_003_274_489_856_000;
    CayleyEnvironment::new(
        gens,
        Some(CUBE3_STATES),
        (CUBE3_STATES as f64).ln(),
        "cube3",
    )
}

impl GfnEnv for CayleyEnvironment {
    type State = Permutation;

    fn initial(&self) -> Permutation {
        self.goal()
    }

    fn is_initial(&self, s: &Permutation) -> bool {
        s.is_identity()
    }

    fn n_moves(&self) -> usize {
        self.gens.len()
    }

    fn input_dim(&self) -> usize {
        self.degree * self.degree
    }

    fn active_features(&self, s: &Permutation, out: &mut Vec<u32>) {
        out.clear();
        let m = self.degree as u32;
        for (i, &v) in s.values().iter().enumerate() {
            out.push(i as u32 * m + v as u32);
        }
    }

    fn forward_step(&self, s: &Permutation, mv: usize) -> Option<(Permutation, usize)> {
        let inv = self.gens.inverses().get(mv)?;
        let child = s.compose(inv);
        if child.is_identity() {
            None // edges into the goal were removed by the reduction
        } else {
            Some((child, mv))
        }
    }

    fn backward_step(&self, s: &Permutation, mv: usize) -> Option<Permutation> {
        if s.is_identity() {
            return None; // the goal is absorbing for backward walks
        }
        let g = self.gens.moves().get(mv)?;
        Some(s.compose(g))
    }

    fn state_count(&self) -> Option<u128> {
        self.state_count
    }

    fn log_state_count(&self) -> f64 {
        self.log_count
    }
}

/// Enumerates every state reachable from the goal by breadth-first search
/// over forward transitions, in discovery order (goal first, move order
/// within a layer). Errors out once more than `budget` states are found.
pub fn enumerate_states(
    env: &CayleyEnvironment,
    budget: usize,
) -> Result<Vec<Permutation>, CayleyError> {
    let start = env.goal();
    let mut order = vec![start.clone()];
    let mut seen: HashMap<Permutation, ()> = HashMap::new();
    seen.insert(start.clone(), ());
    let mut queue = VecDeque::new();
    queue.push_back(start);
    while let Some(s) = queue.pop_front() {
        for mv in 0..env.n_moves() {
            if let Some((child, _)) = env.forward_step(&s, mv) {
                if !seen.contains_key(&child) {
                    if order.len() >= budget {
                        return Err(CayleyError::BudgetExceeded { budget });
                    }
                    seen.insert(child.clone(), ());
                    order.push(child.clone());
                    queue.push_back(child);
                }
            }
        }
    }
    Ok(order)
}

/// How test-set states are drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TestSetMode {
    /// Uniform over all permutations of the puzzle's degree. Valid only when
    /// the generators produce the full symmetric group.
    UniformPermutation,
    /// Walk `k` uniformly random solvable moves away from the goal.
    Scramble(usize),
    /// Uniform over the breadth-first enumeration of the full state set.
    UniformEnumerated { budget: usize },
}

impl fmt::Display for TestSetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestSetMode::UniformPermutation => write!(f, "uniform"),
            TestSetMode::Scramble(k) => write!(f, "scramble:{k}"),
            TestSetMode::UniformEnumerated { .. } => write!(f, "enumerated"),
        }
    }
}

/// Draws a deterministic test set. The same `(seed, mode, count)` always
/// produces the same list; callers wanting disjoint sets use distinct seeds.
pub fn sample_test_set(
    env: &CayleyEnvironment,
    count: usize,
    seed: u64,
    mode: &TestSetMode,
) -> Result<Vec<Permutation>, CayleyError> {
    let mut rng = substream(seed, crate::rng::domain::TEST_SET, 0);
    let mut out = Vec::with_capacity(count);
    match mode {
        TestSetMode::UniformPermutation => {
            if !env.full_symmetric {
                return Err(CayleyError::ModeUnsupported {
                    mode: mode.to_string(),
                    why: "generators are not known to produce the full symmetric group".into(),
                });
            }
            for _ in 0..count {
                out.push(random_permutation(env.degree, &mut rng));
            }
        }
        TestSetMode::Scramble(k) => {
            // Inverse generators walk away from the goal along reversed
            // problem edges, so every sample is guaranteed solvable even for
            // generator sets that are not closed under inversion.
            let inverses = env.generators().inverses();
            for _ in 0..count {
                let mut s = env.goal();
                for _ in 0..*k {
                    let mv = rng.random_range(0..inverses.len());
                    s = s.compose(&inverses[mv]);
                }
                out.push(s);
            }
        }
        TestSetMode::UniformEnumerated { budget } => {
            let states = enumerate_states(env, *budget)?;
            for _ in 0..count {
                let idx = rng.random_range(0..states.len());
                out.push(states[idx].clone());
            }
        }
    }
    Ok(out)
}

fn random_permutation<R: Rng>(m: usize, rng: &mut R) -> Permutation {
    let mut vals: Vec<u8> = (0..m as u16).map(|v| v as u8).collect();
    // Fisher-Yates
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Permutation::from_values(vals).expect("shuffle of identity")
}

// --- text formats ------------------------------------------------------------

/// One state per line, space-separated values.
pub fn format_states(states: &[Permutation]) -> String {
    let mut out = String::new();
    for s in states {
        let line: Vec<String> = s.values().iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_states(text: &str) -> Result<Vec<Permutation>, CayleyError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<u8>, _> = line.split_whitespace().map(|t| t.parse::<u8>()).collect();
        let vals = vals.map_err(|_| CayleyError::Parse {
            line: idx + 1,
            msg: "invalid permutation entry".into(),
        })?;
        out.push(Permutation::from_values(vals).map_err(|e| CayleyError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_states(path: &Path) -> Result<Vec<Permutation>, CayleyError> {
    let text = std::fs::read_to_string(path).map_err(|source| CayleyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_states(&text)
}

pub fn write_states(path: &Path, states: &[Permutation]) -> Result<(), CayleyError> {
    std::fs::write(path, format_states(states)).map_err(|source| CayleyError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Custom puzzle file: a header line with move names, then one generator
/// permutation per line in the state format.
pub fn parse_generator_set(text: &str) -> Result<GeneratorSet, CayleyError> {
    let mut lines = text.lines().enumerate();
    let names: Vec<String> = loop {
        match lines.next() {
            Some((_, raw)) => {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                break line.split_whitespace().map(str::to_string).collect();
            }
            None => return Err(CayleyError::EmptyGeneratorSet),
        }
    };
    let rest: String = lines.map(|(_, l)| format!("{l}\n")).collect();
    let moves = parse_states(&rest)?;
    if moves.len() != names.len() {
        return Err(CayleyError::Parse {
            line: 1,
            msg: format!(
                "{} move names but {} generator lines",
                names.len(),
                moves.len()
            ),
        });
    }
    GeneratorSet::new(moves, names)
}

pub fn read_generator_set(path: &Path) -> Result<GeneratorSet, CayleyError> {
    let text = std::fs::read_to_string(path).map_err(|source| CayleyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_generator_set(&text)
}

/// Environment for a custom generator set. The state count is unknown, so
/// the caller provides the log-normalizer (or an enumeration budget is used
/// upstream to count states exactly).
pub fn custom_env(gens: GeneratorSet, state_count: Option<u128>) -> CayleyEnvironment {
    let log_count = state_count
        .map(|c| (c as f64).ln())
        .unwrap_or(f64::NAN);
    CayleyEnvironment::new(gens, state_count, log_count, "custom")
}
