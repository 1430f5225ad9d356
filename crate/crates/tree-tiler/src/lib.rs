//! Tree factors in random d-regular graphs.
//!
//! The pipeline: generate a random d-regular graph, split its vertices into
//! k balanced parts with two-sided degree control along the edges of a
//! pattern tree (iterated Moser-Tardos resampling), extract a perfect
//! matching between every tree-adjacent pair of parts, and assemble the
//! matchings into a T-factor covering every vertex.
//!
//! Modules:
//! - [`rrg`]: random regular graph generation plus the short-cycle
//!   proximity diagnostic.
//! - [`tree`]: pattern trees, Prufer codes, the high-degree vertex set.
//! - [`prob`]: log-space binomial tails, Chernoff-style bounds, the
//!   alpha equation solver, and the star-factor first-moment function.
//! - [`lll`]: a generic Moser-Tardos resampling engine with dependency
//!   tracking and symmetric-difference accounting.
//! - [`partition`]: the five-round balanced partition pipeline and its
//!   single-round small-tree variant.
//! - [`matching`]: Hopcroft-Karp matchings, Hall diagnostics, factor
//!   assembly and verification.
//! - [`cli`]: the experiment harness behind the `tree-tiler` binary.

pub mod cli;
pub mod lll;
pub mod matching;
pub mod partition;
pub mod prob;
pub mod rrg;
pub mod tree;

pub use rrg::RegularGraph;
pub use tree::Tree;
