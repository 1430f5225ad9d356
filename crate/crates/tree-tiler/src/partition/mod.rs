//! The balanced degree-controlled partition pipeline.
//!
//! Large trees (k above the small-tree threshold d/(10 log d)) go through
//! five resampling rounds plus a deterministic final balance:
//!
//! 1. populate the parts for high-degree tree vertices with a slightly
//!    deflated rate, eliminating over-full degrees;
//! 2. sprinkle a reserved set U into those parts to repair under-full
//!    degrees and hit expected size n/k;
//! 3. spread everything else over the remaining parts, controlling upper
//!    degrees, the number of low-degree parts per vertex, and exposure to
//!    bad vertices;
//! 4. reassign the residual bad vertices into their safe part sets;
//! 5. move a random set of good vertices from over-full to under-full
//!    parts, then finish balancing deterministically one vertex at a
//!    time.
//!
//! Small trees need a single round over all k parts and the same final
//! balance.

mod balance;
mod rounds;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lll::{LllCertificate, ResampleLog, TieBreak};
use crate::prob::{solve_alpha, ProbError};
use crate::rrg::RegularGraph;
use crate::tree::{high_degree_set, Tree};

pub use balance::BalanceMove;

/// All tunables of the pipeline. Field defaults are the calibrated desk
/// values; `..Default::default()` is the intended construction style.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Slack in the tree-size bound k <= (1-epsilon) d / log d, and the
    /// 1/epsilon^2 cap on low-degree parts per vertex.
    pub epsilon: f64,
    /// Lower degree-window coefficient (delta log d and its shrinkages).
    pub delta: f64,
    /// Upper degree-window coefficient (C log d and its stretches).
    pub c_big: f64,
    /// High-degree threshold exponent: tree vertices of degree >=
    /// d^(1-beta) get the dedicated first rounds.
    pub beta_exponent: f64,
    /// Fallback/override for the round-1 deflation rate alpha; used when
    /// the alpha equation has no root on its bracket (small d).
    pub alpha_override: Option<f64>,
    /// |U| = alpha * n * u_fraction in the sprinkling round.
    pub u_fraction: f64,
    /// Base seed; attempt t runs with seed + t.
    pub seed: u64,
    /// Extra attempts after a round failure.
    pub retries: u32,
    /// Multiplier in the resampling budget
    /// factor * max(1, ceil(2 |F| beta / (1-beta))), floored at factor * n.
    pub budget_factor: u64,
    /// Residual tolerance handed to the alpha solver.
    pub tol: f64,
    /// Fail the pipeline when the short-cycle proximity diagnostic
    /// rejects the graph.
    pub enforce_gd: bool,
    /// Desk-scale mode: relaxes the k bound to k <= d, substitutes
    /// max(2, ceil(log log d)) for the degenerate log log d threshold,
    /// and rescales out-of-range sprinkling probabilities instead of
    /// failing.
    pub practical_mode: bool,
    /// Overrides the small-tree dispatch threshold d / (10 log d).
    pub small_tree_k_max: Option<usize>,
    pub tie_break: TieBreak,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            epsilon: 0.5,
            delta: 0.25,
            c_big: 4.0,
            beta_exponent: 0.3,
            alpha_override: None,
            u_fraction: 1e-3,
            seed: 1,
            retries: 10,
            budget_factor: 10,
            tol: 1e-12,
            enforce_gd: false,
            practical_mode: false,
            small_tree_k_max: None,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

/// The degree windows derived from (delta, C, d), fixed per run.
#[derive(Debug, Clone, Copy)]
pub struct Thresholds {
    /// delta log d
    pub lo: f64,
    /// C log d
    pub hi: f64,
    /// 2 C log d
    pub hi2: f64,
    /// 3 C log d
    pub hi3: f64,
    /// 4 C log d
    pub hi4: f64,
    /// 5 C log d
    pub hi5: f64,
    /// delta log d / 2
    pub lo2: f64,
    /// delta log d / 3
    pub lo3: f64,
    /// delta log d / 4
    pub lo4: f64,
    /// cap on bad-vertex exposure per part (log log d, or its practical
    /// substitute)
    pub loglog: f64,
    /// cap 1/epsilon^2 on the number of low-degree parts per vertex
    pub eps2_cap: f64,
}

impl Thresholds {
    pub fn new(cfg: &PipelineConfig, d: usize) -> Self {
        let ld = (d as f64).ln();
        let lo = cfg.delta * ld;
        let hi = cfg.c_big * ld;
        let raw_ll = ld.ln();
        let loglog = if cfg.practical_mode {
            raw_ll.ceil().max(2.0)
        } else {
            raw_ll
        };
        Thresholds {
            lo,
            hi,
            hi2: 2.0 * hi,
            hi3: 3.0 * hi,
            hi4: 4.0 * hi,
            hi5: 5.0 * hi,
            lo2: lo / 2.0,
            lo3: lo / 3.0,
            lo4: lo / 4.0,
            loglog,
            eps2_cap: 1.0 / (cfg.epsilon * cfg.epsilon),
        }
    }
}

/// Vertex -> part map with incremental per-vertex, per-part degree
/// counters. Part 0 means unassigned; counters index 0 counts unassigned
/// neighbors, so each counter row sums to d.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartAssignment {
    n: usize,
    k: usize,
    d: usize,
    part_of: Vec<usize>,
    counters: Vec<u32>,
    sizes: Vec<usize>,
}

impl PartAssignment {
    pub fn new(g: &RegularGraph, k: usize) -> Self {
        let n = g.n();
        let mut counters = vec![0u32; (n + 1) * (k + 1)];
        for v in 1..=n {
            counters[v * (k + 1)] = g.d() as u32;
        }
        PartAssignment {
            n,
            k,
            d: g.d(),
            part_of: vec![0; n + 1],
            counters,
            sizes: {
                let mut s = vec![0; k + 1];
                s[0] = n;
                s
            },
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn part_of(&self, v: usize) -> usize {
        self.part_of[v]
    }

    /// d(v, part p); p = 0 counts unassigned neighbors.
    pub fn count(&self, v: usize, p: usize) -> u32 {
        self.counters[v * (self.k + 1) + p]
    }

    pub fn size(&self, p: usize) -> usize {
        self.sizes[p]
    }

    /// Moves v to part p (0 to unassign), updating neighbor counters.
    pub fn assign(&mut self, g: &RegularGraph, v: usize, p: usize) {
        let old = self.part_of[v];
        if old == p {
            return;
        }
        self.part_of[v] = p;
        self.sizes[old] -= 1;
        self.sizes[p] += 1;
        let w_k = self.k + 1;
        for &w in g.neighbors(v) {
            self.counters[w * w_k + old] -= 1;
            self.counters[w * w_k + p] += 1;
        }
    }

    /// Members of part p, ascending.
    pub fn members(&self, p: usize) -> Vec<usize> {
        (1..=self.n).filter(|&v| self.part_of[v] == p).collect()
    }

    /// All parts 1..=k as sorted vertex lists.
    pub fn parts(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for v in 1..=self.n {
            let p = self.part_of[v];
            if p > 0 {
                out[p - 1].push(v);
            }
        }
        out
    }

    pub fn snapshot(&self) -> Vec<usize> {
        self.part_of.clone()
    }

    /// |before_i symdiff now_i| for every part i in 1..=k (index 0 tracks
    /// the unassigned pool).
    pub fn sym_diff(&self, before: &[usize]) -> Vec<usize> {
        let mut diff = vec![0usize; self.k + 1];
        for v in 1..=self.n {
            let (a, b) = (before[v], self.part_of[v]);
            if a != b {
                diff[a] += 1;
                diff[b] += 1;
            }
        }
        diff
    }

    /// Full-recount oracle: recomputes every counter and size from
    /// scratch and compares. Test harness; O(n d).
    pub fn recount_consistent(&self, g: &RegularGraph) -> bool {
        let mut sizes = vec![0usize; self.k + 1];
        for v in 1..=self.n {
            sizes[self.part_of[v]] += 1;
        }
        if sizes != self.sizes {
            return false;
        }
        for v in 1..=self.n {
            let mut row = vec![0u32; self.k + 1];
            for &w in g.neighbors(v) {
                row[self.part_of[w]] += 1;
            }
            for p in 0..=self.k {
                if row[p] != self.count(v, p) {
                    return false;
                }
            }
            if row.iter().sum::<u32>() != self.d as u32 {
                return false;
            }
        }
        true
    }
}

/// Observable summary of one pipeline round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: String,
    pub tau: u64,
    /// Per part 1..=k, symmetric difference against the round's input
    /// configuration: the state right after the round's initial random
    /// draw, so this isolates the resampling drift (internal labels).
    pub sym_diff: Vec<usize>,
    /// Vertices relocated by the round's initial construction itself
    /// (the sprinkle into U, the B5 reassignment, the movers). Zero for
    /// the rounds whose initial draw defines the reference assignment.
    pub initial_moved: usize,
    /// |B2| after round 1, |B5| after round 3, 0 elsewhere.
    pub residual_bad: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<LllCertificate>,
    /// Degree window certified by this round's closing scan.
    pub window_lo: Option<f64>,
    pub window_hi: Option<f64>,
    /// Round 2 only: |U| and the sprinkling rates p_1..p_h.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sprinkle_rates: Option<Vec<f64>>,
    pub moves: u64,
    /// Per part 1..=k, signed size - n/k at round end.
    pub size_dev: Vec<i64>,
    pub success: bool,
}

impl RoundReport {
    fn new(round: &str, k: usize) -> Self {
        RoundReport {
            round: round.to_string(),
            tau: 0,
            sym_diff: vec![0; k],
            initial_moved: 0,
            residual_bad: 0,
            certificate: None,
            window_lo: None,
            window_hi: None,
            u_size: None,
            sprinkle_rates: None,
            moves: 0,
            size_dev: vec![0; k],
            success: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Small,
    Large,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Branch::Small => write!(f, "small"),
            Branch::Large => write!(f, "large"),
        }
    }
}

/// Why a single round gave up; the pipeline retries with the next seed.
#[derive(Debug, Clone, Error)]
#[error("round {round}: {reason}")]
pub struct RoundFailure {
    pub round: &'static str,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("graph fails the short-cycle proximity diagnostic (two cycles of length <= 10 within distance {distance})")]
    NotInGd { distance: usize },
    #[error("all {attempts} attempts failed; last: {last}")]
    Exhausted {
        attempts: u32,
        last: RoundFailure,
        reports: Vec<RoundReport>,
    },
}

/// Result of a successful pipeline run.
#[derive(Debug)]
pub struct PipelineOutcome {
    /// Parts aligned with the caller's tree labels: for every tree edge
    /// {i, j}, parts[i-1] and parts[j-1] satisfy the degree window.
    /// Each part sorted ascending, |part| = n/k exactly.
    pub parts: Vec<Vec<usize>>,
    pub reports: Vec<RoundReport>,
    /// Full resampling traces, parallel to the LLL rounds in `reports`
    /// (labelled by round name).
    pub logs: Vec<(String, ResampleLog)>,
    pub branch: Branch,
    /// Attempts consumed (1 = first seed worked).
    pub attempts: u32,
    /// Per part (caller labels): |S_i symdiff V_i| against the very first
    /// random assignment of the successful attempt.
    pub sym_diff_initial: Vec<usize>,
    /// Internal relabeling used to put high-degree tree vertices first:
    /// perm[original] = internal.
    pub relabel: Vec<usize>,
    pub alpha: Option<f64>,
    pub alpha_fallback: bool,
    /// Deterministic final-balance move log.
    pub moves: Vec<BalanceMove>,
}

impl PipelineOutcome {
    /// max_i |S_i symdiff V_i| / (n/k).
    pub fn sym_diff_ratio_max(&self, n: usize) -> f64 {
        let per_part = n as f64 / self.parts.len() as f64;
        self.sym_diff_initial
            .iter()
            .map(|&x| x as f64 / per_part)
            .fold(0.0, f64::max)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-round seed derivation from the attempt seed.
pub(crate) fn round_seed(attempt_seed: u64, round: u64) -> u64 {
    splitmix64(attempt_seed ^ splitmix64(round))
}

/// State of one pipeline attempt; rounds are exposed as methods so tests
/// can interleave full-recount checks at round boundaries.
pub struct PipelineRun<'a> {
    pub(crate) g: &'a RegularGraph,
    /// Internally relabeled tree: high-degree vertices occupy 1..=h.
    pub(crate) tree: Tree,
    pub(crate) tree_adj: Vec<Vec<usize>>,
    pub(crate) k: usize,
    pub(crate) h: usize,
    pub(crate) cfg: PipelineConfig,
    pub(crate) th: Thresholds,
    pub(crate) seed: u64,
    pub(crate) alpha: f64,
    pub(crate) alpha_fallback: bool,
    pub(crate) state: PartAssignment,
    /// First random assignment: round-1 initial for high parts overlaid
    /// with the round-3 initial for everything else.
    pub(crate) initial_part: Vec<usize>,
    /// The reference configuration of the round in flight (state after
    /// its initial draw), kept for symmetric-difference reporting.
    pub(crate) round_input: Vec<usize>,
    pub reports: Vec<RoundReport>,
    pub logs: Vec<(String, ResampleLog)>,
    pub moves: Vec<BalanceMove>,
}

impl<'a> PipelineRun<'a> {
    /// Prepares one attempt: relabels the tree so the high-degree set is
    /// {1..h} and resolves alpha (solver root or configured fallback).
    pub fn new(
        g: &'a RegularGraph,
        tree: &Tree,
        cfg: &PipelineConfig,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let k = tree.k();
        let d = g.d();
        let hd = high_degree_set(tree, d, cfg.beta_exponent);
        let mut perm = vec![0usize; k + 1];
        let mut next = 1;
        for &v in &hd.members {
            perm[v] = next;
            next += 1;
        }
        for v in 1..=k {
            if perm[v] == 0 {
                perm[v] = next;
                next += 1;
            }
        }
        let tree_internal = tree.relabeled(&perm);
        let h = hd.h;

        let (alpha, alpha_fallback) = if h == 0 {
            (0.0, false)
        } else {
            match solve_alpha(d as u64, k as u64, h as u64, cfg.delta, cfg.epsilon, cfg.tol) {
                Ok(sol) => (sol.alpha, false),
                Err(ProbError::NoRoot { c_lo, c_hi, f_lo, f_hi }) => {
                    let fallback = cfg.alpha_override.unwrap_or(1.0 / d as f64);
                    log::warn!(
                        "alpha equation has no root on c in [{c_lo}, {c_hi}] \
                         (f = {f_lo:e} / {f_hi:e}); falling back to alpha = {fallback}"
                    );
                    (fallback, true)
                }
                Err(e) => return Err(PipelineError::InvalidInput(e.to_string())),
            }
        };

        let tree_adj: Vec<Vec<usize>> = (0..=k)
            .map(|v| if v == 0 { Vec::new() } else { tree_internal.neighbors(v).to_vec() })
            .collect();
        Ok(PipelineRun {
            g,
            tree: tree_internal,
            tree_adj,
            k,
            h,
            cfg: cfg.clone(),
            th: Thresholds::new(cfg, d),
            seed,
            alpha,
            alpha_fallback,
            state: PartAssignment::new(g, k),
            initial_part: vec![0; g.n() + 1],
            round_input: vec![0; g.n() + 1],
            reports: Vec::new(),
            logs: Vec::new(),
            moves: Vec::new(),
        })
    }

    pub fn assignment(&self) -> &PartAssignment {
        &self.state
    }

    /// Reference configuration the last round's `sym_diff` was measured
    /// against.
    pub fn round_input_snapshot(&self) -> &[usize] {
        &self.round_input
    }

    pub fn internal_tree(&self) -> &Tree {
        &self.tree
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn n_over_k(&self) -> usize {
        self.g.n() / self.k
    }

    fn record_sizes(&self, report: &mut RoundReport) {
        let target = self.n_over_k() as i64;
        for p in 1..=self.k {
            report.size_dev[p - 1] = self.state.size(p) as i64 - target;
        }
    }
}

/// The tree-size bound on the large branch; practical mode only requires
/// k <= d.
fn check_k_bound(cfg: &PipelineConfig, d: usize, k: usize) -> Result<(), PipelineError> {
    if cfg.practical_mode {
        if k > d {
            return Err(PipelineError::InvalidInput(format!(
                "k = {k} exceeds d = {d}"
            )));
        }
        return Ok(());
    }
    let bound = (1.0 - cfg.epsilon) * d as f64 / (d as f64).ln();
    if (k as f64) > bound {
        return Err(PipelineError::InvalidInput(format!(
            "k = {k} exceeds (1 - epsilon) d / log d = {bound:.2}; \
             use practical mode to relax"
        )));
    }
    Ok(())
}

/// Dispatch threshold for the single-round variant.
pub fn small_tree_threshold(cfg: &PipelineConfig, d: usize) -> usize {
    cfg.small_tree_k_max
        .unwrap_or_else(|| ((d as f64) / (10.0 * (d as f64).ln())).floor().max(1.0) as usize)
}

/// Runs the partition pipeline end to end: dispatches between the small
/// and large branches, retries failed attempts with consecutive seeds,
/// and returns exact-size parts satisfying the tree-edge degree window.
pub fn run_pipeline(
    g: &RegularGraph,
    tree: &Tree,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    let (n, d, k) = (g.n(), g.d(), tree.k());
    if k == 0 {
        return Err(PipelineError::InvalidInput("tree has no vertices".into()));
    }
    if n % k != 0 {
        return Err(PipelineError::InvalidInput(format!(
            "part count k = {k} must divide n = {n}"
        )));
    }
    check_k_bound(cfg, d, k)?;
    if cfg.enforce_gd {
        let report = crate::rrg::check_gd_membership(g);
        if !report.is_member {
            let distance = report.witness.map(|w| w.distance).unwrap_or(0);
            return Err(PipelineError::NotInGd { distance });
        }
    }

    let small = k <= small_tree_threshold(cfg, d);
    let mut last_failure: Option<(RoundFailure, Vec<RoundReport>)> = None;
    let attempts_max = cfg.retries + 1;
    for attempt in 0..attempts_max {
        let seed = cfg.seed.wrapping_add(attempt as u64);
        let mut run = PipelineRun::new(g, tree, cfg, seed)?;
        let r = if small {
            run.execute_small()
        } else {
            run.execute_large()
        };
        match r {
            Ok(()) => return Ok(run.into_outcome(tree, if small { Branch::Small } else { Branch::Large }, attempt + 1)),
            Err(f) => {
                log::info!("attempt {} (seed {}) failed: {}", attempt + 1, seed, f);
                last_failure = Some((f, run.reports));
            }
        }
    }
    let (last, reports) = last_failure.expect("at least one attempt ran");
    Err(PipelineError::Exhausted {
        attempts: attempts_max,
        last,
        reports,
    })
}

impl<'a> PipelineRun<'a> {
    /// Rounds 1-5 plus the deterministic final balance.
    pub fn execute_large(&mut self) -> Result<(), RoundFailure> {
        self.round1()?;
        self.round2()?;
        self.round3()?;
        self.round4()?;
        self.round5()?;
        self.final_balance()
    }

    /// Single resampling round over all k parts plus the final balance.
    pub fn execute_small(&mut self) -> Result<(), RoundFailure> {
        self.small_round()?;
        self.final_balance_small()
    }

    fn into_outcome(self, tree_orig: &Tree, branch: Branch, attempts: u32) -> PipelineOutcome {
        // perm[original] = internal, reconstructed from the stored trees
        let k = self.k;
        let hd = high_degree_set(tree_orig, self.g.d(), self.cfg.beta_exponent);
        let mut perm = vec![0usize; k + 1];
        let mut next = 1;
        for &v in &hd.members {
            perm[v] = next;
            next += 1;
        }
        for v in 1..=k {
            if perm[v] == 0 {
                perm[v] = next;
                next += 1;
            }
        }
        let internal_parts = self.state.parts();
        let parts: Vec<Vec<usize>> = (1..=k).map(|t| internal_parts[perm[t] - 1].clone()).collect();
        let diff_internal = self.state.sym_diff(&self.initial_part);
        let sym_diff_initial: Vec<usize> = (1..=k).map(|t| diff_internal[perm[t]]).collect();
        PipelineOutcome {
            parts,
            reports: self.reports,
            logs: self.logs,
            branch,
            attempts,
            sym_diff_initial,
            relabel: perm,
            alpha: if self.h > 0 { Some(self.alpha) } else { None },
            alpha_fallback: self.alpha_fallback,
            moves: self.moves,
        }
    }
}

/// The single-round small-tree partition over k parts (no tree needed:
/// the degree window holds between every pair of parts).
pub fn small_tree_partition(
    g: &RegularGraph,
    k: usize,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    if k == 0 {
        return Err(PipelineError::InvalidInput("k must be positive".into()));
    }
    if g.n() % k != 0 {
        return Err(PipelineError::InvalidInput(format!(
            "part count k = {k} must divide n = {}",
            g.n()
        )));
    }
    let star = if k == 1 {
        Tree::from_edges(1, &[]).expect("single vertex tree")
    } else {
        Tree::star(k).expect("k >= 2")
    };
    let mut last_failure: Option<(RoundFailure, Vec<RoundReport>)> = None;
    let attempts_max = cfg.retries + 1;
    for attempt in 0..attempts_max {
        let seed = cfg.seed.wrapping_add(attempt as u64);
        let mut run = PipelineRun::new(g, &star, cfg, seed)?;
        match run.execute_small() {
            Ok(()) => return Ok(run.into_outcome(&star, Branch::Small, attempt + 1)),
            Err(f) => last_failure = Some((f, run.reports)),
        }
    }
    let (last, reports) = last_failure.expect("at least one attempt ran");
    Err(PipelineError::Exhausted {
        attempts: attempts_max,
        last,
        reports,
    })
}

/// Partition file: one line per part, `i: v1 v2 ...`, 1-indexed and
/// ascending.
pub fn write_partition(path: &std::path::Path, parts: &[Vec<usize>]) -> std::io::Result<()> {
    let mut out = String::new();
    for (i, part) in parts.iter().enumerate() {
        out.push_str(&format!("{}:", i + 1));
        for v in part {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn read_partition(path: &std::path::Path) -> std::io::Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    let mut parts = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (_, rest) = line.split_once(':').ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("missing colon: {line:?}"))
        })?;
        let part: Result<Vec<usize>, _> = rest.split_whitespace().map(|t| t.parse()).collect();
        parts.push(part.map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad vertex: {e}"))
        })?);
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rrg::generate_regular;

    fn cycle8() -> RegularGraph {
        let mut adj = vec![Vec::new(); 9];
        for v in 1..=8usize {
            let w = v % 8 + 1;
            adj[v].push(w);
            adj[w].push(v);
        }
        RegularGraph::from_adjacency(8, 2, adj).unwrap()
    }

    #[test]
    fn assignment_counters_track_moves() {
        let g = generate_regular(60, 6, 3).unwrap();
        let mut a = PartAssignment::new(&g, 3);
        assert!(a.recount_consistent(&g));
        for v in 1..=60 {
            a.assign(&g, v, 1 + v % 3);
        }
        assert!(a.recount_consistent(&g));
        a.assign(&g, 1, 2);
        a.assign(&g, 1, 2); // no-op
        a.assign(&g, 5, 0); // unassign
        assert!(a.recount_consistent(&g));
        let sum: usize = (0..=3).map(|p| a.size(p)).sum();
        assert_eq!(sum, 60);
    }

    #[test]
    fn sym_diff_counts_both_sides() {
        let g = cycle8();
        let mut a = PartAssignment::new(&g, 2);
        for v in 1..=8 {
            a.assign(&g, v, 1 + (v - 1) % 2);
        }
        let before = a.snapshot();
        a.assign(&g, 1, 2);
        a.assign(&g, 2, 1);
        let diff = a.sym_diff(&before);
        assert_eq!(diff[1], 2);
        assert_eq!(diff[2], 2);
    }

    #[test]
    fn thresholds_practical_substitutions() {
        let mut cfg = PipelineConfig::default();
        cfg.practical_mode = true;
        let th = Thresholds::new(&cfg, 64);
        assert_eq!(th.loglog, 2.0); // ceil(ln ln 64) = ceil(1.425) = 2
        cfg.practical_mode = false;
        let th = Thresholds::new(&cfg, 64);
        assert!((th.loglog - (64f64).ln().ln()).abs() < 1e-12);
        assert!((th.lo4 - th.lo / 4.0).abs() < 1e-15);
        assert!((th.hi5 - 5.0 * th.hi).abs() < 1e-12);
    }

    #[test]
    fn balance_zero_moves_when_balanced() {
        let g = cycle8();
        let tree = Tree::path(2).unwrap();
        let cfg = PipelineConfig {
            practical_mode: true,
            ..Default::default()
        };
        let mut run = PipelineRun::new(&g, &tree, &cfg, 7).unwrap();
        for v in 1..=8 {
            run.state.assign(&g, v, 1 + (v - 1) % 2);
        }
        run.final_balance_small().unwrap();
        let report = run.reports.last().unwrap();
        assert_eq!(report.moves, 0);
        assert!(report.success);
    }

    #[test]
    fn balance_single_move_for_unit_imbalance() {
        let g = cycle8();
        let tree = Tree::path(2).unwrap();
        let cfg = PipelineConfig {
            practical_mode: true,
            ..Default::default()
        };
        let mut run = PipelineRun::new(&g, &tree, &cfg, 7).unwrap();
        // sizes 5 and 3; one move restores 4/4
        for v in 1..=8 {
            run.state.assign(&g, v, if v <= 5 { 1 } else { 2 });
        }
        run.final_balance_small().unwrap();
        let report = run.reports.last().unwrap();
        assert_eq!(report.moves, 1);
        assert_eq!(run.state.size(1), 4);
        assert_eq!(run.state.size(2), 4);
        assert!(run.state.recount_consistent(&g));
    }

    #[test]
    fn round3_single_bin_assigns_leftovers_deterministically() {
        // force k - h = 1: everything unassigned lands in part k, only
        // the scans run
        let g = generate_regular(128, 16, 4).unwrap();
        let tree = Tree::path(2).unwrap();
        let cfg = PipelineConfig {
            practical_mode: true,
            ..Default::default()
        };
        let mut run = PipelineRun::new(&g, &tree, &cfg, 1).unwrap();
        run.h = 1;
        for v in (1..=128).step_by(2) {
            run.state.assign(&g, v, 1);
        }
        run.round3().unwrap();
        let report = run.reports.last().unwrap();
        assert_eq!(report.round, "r3");
        assert_eq!(report.tau, 0);
        assert!(report.success);
        for v in (2..=128).step_by(2) {
            assert_eq!(run.state.part_of(v), 2);
        }
        assert!(run.state.recount_consistent(&g));
    }

    #[test]
    fn round2_strict_mode_rejects_out_of_range_rates() {
        // part 1 overfull makes the sprinkling rate negative; strict mode
        // must refuse rather than rescale
        let g = cycle8();
        let tree = Tree::path(2).unwrap();
        let cfg = PipelineConfig {
            practical_mode: false,
            u_fraction: 0.75,
            ..Default::default()
        };
        let mut run = PipelineRun::new(&g, &tree, &cfg, 1).unwrap();
        run.h = 1;
        run.alpha = 0.5;
        for v in 1..=5 {
            run.state.assign(&g, v, 1);
        }
        let err = run.round2().unwrap_err();
        assert_eq!(err.round, "r2");
        assert!(err.reason.contains("sprinkling rates out of range"), "{}", err.reason);
    }

    #[test]
    fn partition_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("parts.txt");
        let parts = vec![vec![1, 3, 5], vec![2, 4, 6]];
        write_partition(&p, &parts).unwrap();
        assert_eq!(read_partition(&p).unwrap(), parts);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "1: 1 3 5\n2: 2 4 6\n");
    }

    #[test]
    fn config_json_roundtrip_with_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"delta": 0.3, "seed": 9}"#).unwrap();
        assert_eq!(cfg.delta, 0.3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.c_big, PipelineConfig::default().c_big);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.delta, 0.3);
    }
}
