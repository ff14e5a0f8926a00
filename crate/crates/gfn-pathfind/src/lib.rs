//! Learning shortest paths on large discrete graphs with flow-regularized
//! stochastic policies.
//!
//! The library turns "find a shortest path to a goal vertex" into a policy
//! learning problem: the graph is reduced to a sampling environment whose
//! backward policy, once the expected trajectory length is driven to its
//! minimum, walks exclusively along shortest paths. It ships:
//!
//! - [`graph`]: the reduction from a digraph with a goal vertex to a sampling
//!   environment, plus validation and the edge-list text format;
//! - [`cayley`]: permutation-puzzle environments (adjacent-swap sorting,
//!   pocket and standard cubes in the quarter-turn metric) and test-set
//!   sampling;
//! - [`oracle`]: breadth-first ground truth (distance tables, inversion
//!   counts, path checking) used to verify everything else;
//! - [`tabular`]: exact policy algebra on enumerated environments: expected
//!   trajectory length via absorbing-chain solves, optimal backward policies,
//!   state flows, and the minimality criterion;
//! - [`nn`]: a residual MLP with layer normalization and two policy heads,
//!   with built-in reverse-mode differentiation;
//! - [`trainer`]: on-policy training with the prefix trajectory-balance loss
//!   plus flow regularization;
//! - [`search`]: faithful sampling, greedy decoding and beam search with the
//!   learned backward policy;
//! - [`harness`]: the `gfn-pathfind` command line: training, evaluation,
//!   oracle construction, theory verification, regularization sweeps, plots.

pub mod cayley;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod search;
pub mod tabular;
pub mod trainer;

pub use cayley::{cube2_env, cube3_env, swap_env, CayleyEnvironment, Permutation};
pub use graph::{build_gfn_env, validate_env, ExplicitGraph, GfnEnv, StateId};

// Keep the book's code samples compiling and running: every fenced Rust block
// in the guide is a doctest of this crate.
#[cfg(doctest)]
pub mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(environments, "../../../book/src/environments.md");
    chapter!(puzzles, "../../../book/src/puzzles.md");
    chapter!(oracles, "../../../book/src/oracles.md");
    chapter!(exact_policies, "../../../book/src/exact-policies.md");
    chapter!(network, "../../../book/src/network.md");
    chapter!(training, "../../../book/src/training.md");
    chapter!(search, "../../../book/src/search.md");
    chapter!(cli, "../../../book/src/cli.md");
}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
pub struct ReadmeDoctests;
