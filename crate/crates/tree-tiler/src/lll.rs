//! Generic Moser-Tardos resampling engine.
//!
//! The engine drives any [`LllProblem`]: it draws the initial sample,
//! repeatedly picks a currently-true event (deterministic tie-breaking),
//! redraws exactly the variables in that event's scope, and re-evaluates
//! only the events sharing a variable with the redrawn set. Randomness is
//! a pure function of (seed, step, variable), so one run is reproducible
//! without storing the infinite table of resampling copies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::prob::LogProb;

/// Word budget each (step, variable) slot owns inside the ChaCha stream;
/// a single discrete draw uses a handful of 32-bit words, far below this.
const WORDS_PER_SLOT: u128 = 128;

/// A resamplable constraint system. Implementations own the current
/// assignment and any incremental context (degree counters etc.), so an
/// event evaluation costs O(scope), not O(n).
pub trait LllProblem {
    fn num_vars(&self) -> usize;
    fn num_events(&self) -> usize;

    /// Redraws variable `var` from its sampling distribution and applies
    /// it to the internal state. The rng is pre-positioned on the
    /// (seed, step, var) slot.
    fn resample_var(&mut self, var: usize, rng: &mut ChaCha8Rng);

    /// Evaluates event `event` against the current assignment.
    fn event_true(&self, event: usize) -> bool;

    /// Feeds the variables event `event` depends on into `sink`
    /// (duplicates allowed; the engine dedups).
    fn event_scope(&self, event: usize, sink: &mut dyn FnMut(usize));

    /// Feeds every event whose value may change when `var` changes into
    /// `sink` (duplicates allowed).
    fn events_touching_var(&self, var: usize, sink: &mut dyn FnMut(usize));
}

/// Which currently-true event to resample next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TieBreak {
    /// Lowest event index first (the reproducible default).
    #[default]
    LowestIndex,
    /// Highest event index first.
    HighestIndex,
}

/// One resampling step: the chosen event and the variables redrawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogStep {
    pub event: usize,
    pub vars: Vec<usize>,
}

/// Complete trace of a run.
#[derive(Debug, Clone, Default)]
pub struct ResampleLog {
    pub steps: Vec<LogStep>,
    pub per_var_resamples: Vec<u32>,
}

impl ResampleLog {
    /// Total number of resampling steps.
    pub fn tau(&self) -> u64 {
        self.steps.len() as u64
    }

    /// Sum of scope sizes over all steps: an upper bound on the number of
    /// assignment entries that changed.
    pub fn total_vars_resampled(&self) -> u64 {
        self.steps.iter().map(|s| s.vars.len() as u64).sum()
    }
}

/// Upper bound Delta_1 * tau on how many variables can differ between the
/// initial sample and the final assignment; compare against
/// 2 * Delta_1 * |F| * beta / (1 - beta).
pub fn symmetric_difference_bound(log: &ResampleLog, delta1: u64) -> u64 {
    delta1 * log.tau()
}

/// Why a run stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    /// No event is true; the assignment in the problem is a valid
    /// evaluation.
    Success,
    /// Step budget exhausted; the problem holds the partial assignment.
    BudgetExceeded,
    /// A true event has an empty scope and can never be repaired.
    Stuck { event: usize },
}

#[derive(Debug)]
pub struct RunResult {
    pub outcome: Outcome,
    pub log: ResampleLog,
}

impl RunResult {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

/// Default step budget: 10 * max(1, ceil(2 |F| beta / (1 - beta))),
/// floored at 10 n.
pub fn default_budget(num_events: usize, beta: f64, n: usize) -> u64 {
    let expect = 2.0 * num_events as f64 * beta / (1.0 - beta);
    let from_bound = 10 * (expect.ceil() as u64).max(1);
    from_bound.max(10 * n as u64)
}

fn draw<P: LllProblem>(problem: &mut P, step: u64, var: usize, rng: &mut ChaCha8Rng) {
    rng.set_stream(var as u64 + 1);
    rng.set_word_pos(step as u128 * WORDS_PER_SLOT);
    problem.resample_var(var, rng);
}

/// Step 0 of a run: draws every variable fresh from its distribution.
/// [`resume`] afterwards continues the run deterministically; callers that
/// need the initial assignment (symmetric-difference accounting) snapshot
/// the problem state between the two calls.
pub fn initial_sample<P: LllProblem>(problem: &mut P, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for var in 0..problem.num_vars() {
        draw(problem, 0, var, &mut rng);
    }
}

/// Runs the resampling process to completion or budget exhaustion.
///
/// Step 0 is the initial sample (every variable drawn fresh); steps
/// 1..=budget each redraw one event's scope. Identical
/// (problem, seed, budget, tie_break) yield identical logs and final
/// assignments.
pub fn run<P: LllProblem>(
    problem: &mut P,
    seed: u64,
    budget: u64,
    tie_break: TieBreak,
) -> RunResult {
    initial_sample(problem, seed);
    resume(problem, seed, budget, tie_break)
}

/// Continues after [`initial_sample`]: evaluates every event, then
/// resamples until no event holds, the budget runs out, or a true event
/// turns out unfixable.
pub fn resume<P: LllProblem>(
    problem: &mut P,
    seed: u64,
    budget: u64,
    tie_break: TieBreak,
) -> RunResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_vars = problem.num_vars();
    let num_events = problem.num_events();

    // Active set of true events, kept sorted for deterministic tie-breaks.
    let mut active = std::collections::BTreeSet::new();
    for ev in 0..num_events {
        if problem.event_true(ev) {
            active.insert(ev);
        }
    }

    let mut log = ResampleLog {
        steps: Vec::new(),
        per_var_resamples: vec![0; num_vars],
    };
    let mut scope: Vec<usize> = Vec::new();
    let mut in_scope = vec![false; num_vars];
    let mut touched: Vec<usize> = Vec::new();
    let mut touched_mark = vec![false; num_events];

    let mut step: u64 = 0;
    loop {
        let event = match tie_break {
            TieBreak::LowestIndex => active.iter().next().copied(),
            TieBreak::HighestIndex => active.iter().next_back().copied(),
        };
        let event = match event {
            None => return RunResult { outcome: Outcome::Success, log },
            Some(ev) => ev,
        };
        if step >= budget {
            return RunResult { outcome: Outcome::BudgetExceeded, log };
        }
        step += 1;

        scope.clear();
        problem.event_scope(event, &mut |v| {
            if !in_scope[v] {
                in_scope[v] = true;
                scope.push(v);
            }
        });
        if scope.is_empty() {
            return RunResult { outcome: Outcome::Stuck { event }, log };
        }
        scope.sort_unstable();
        for &v in &scope {
            in_scope[v] = false;
            draw(problem, step, v, &mut rng);
            log.per_var_resamples[v] += 1;
        }

        touched.clear();
        for &v in &scope {
            problem.events_touching_var(v, &mut |ev| {
                if !touched_mark[ev] {
                    touched_mark[ev] = true;
                    touched.push(ev);
                }
            });
        }
        for &ev in &touched {
            touched_mark[ev] = false;
            if problem.event_true(ev) {
                active.insert(ev);
            } else {
                active.remove(&ev);
            }
        }

        log.steps.push(LogStep {
            event,
            vars: scope.clone(),
        });
    }
}

/// The Moser-Tardos applicability certificate: does
/// q <= beta (1 - beta)^Delta_2 hold, compared exactly in log space.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LllCertificate {
    /// Max event probability, natural log.
    pub q_log: f64,
    pub beta: f64,
    pub delta2: u64,
    pub condition_holds: bool,
}

pub fn check_condition(q_log: LogProb, beta: f64, delta2: u64) -> LllCertificate {
    assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0, 1)");
    let rhs = beta.ln() + delta2 as f64 * (-beta).ln_1p();
    LllCertificate {
        q_log: q_log.value(),
        beta,
        delta2,
        condition_holds: q_log.value() <= rhs,
    }
}

/// A table-driven problem: variables with explicit discrete
/// distributions, events given as predicates over the full assignment
/// restricted to a declared scope. The workhorse for engine tests and
/// small instances.
pub struct DiscreteProblem {
    /// Per-variable cumulative distributions over 0..domain_size.
    dists: Vec<Vec<f64>>,
    events: Vec<DiscreteEvent>,
    var_events: Vec<Vec<usize>>,
    assignment: Vec<usize>,
}

pub struct DiscreteEvent {
    pub scope: Vec<usize>,
    pub pred: Box<dyn Fn(&[usize]) -> bool + Send + Sync>,
}

impl DiscreteProblem {
    /// `weights[v]` are the unnormalized outcome weights of variable v.
    pub fn new(weights: Vec<Vec<f64>>, events: Vec<DiscreteEvent>) -> Self {
        let dists: Vec<Vec<f64>> = weights
            .into_iter()
            .map(|w| {
                let total: f64 = w.iter().sum();
                assert!(total > 0.0, "variable needs positive total weight");
                let mut acc = 0.0;
                w.iter()
                    .map(|x| {
                        acc += x / total;
                        acc
                    })
                    .collect()
            })
            .collect();
        let mut var_events = vec![Vec::new(); dists.len()];
        for (idx, ev) in events.iter().enumerate() {
            for &v in &ev.scope {
                var_events[v].push(idx);
            }
        }
        let n = dists.len();
        DiscreteProblem {
            dists,
            events,
            var_events,
            assignment: vec![0; n],
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }
}

impl LllProblem for DiscreteProblem {
    fn num_vars(&self) -> usize {
        self.dists.len()
    }

    fn num_events(&self) -> usize {
        self.events.len()
    }

    fn resample_var(&mut self, var: usize, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        let u: f64 = rng.gen();
        let cdf = &self.dists[var];
        let idx = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
        self.assignment[var] = idx;
    }

    fn event_true(&self, event: usize) -> bool {
        (self.events[event].pred)(&self.assignment)
    }

    fn event_scope(&self, event: usize, sink: &mut dyn FnMut(usize)) {
        for &v in &self.events[event].scope {
            sink(v);
        }
    }

    fn events_touching_var(&self, var: usize, sink: &mut dyn FnMut(usize)) {
        for &ev in &self.var_events[var] {
            sink(ev);
        }
    }
}
