//! The resampling rounds of the partition pipeline.
//!
//! Every round follows the same shape: draw the round's random
//! construction as the engine's initial sample, resample bad events until
//! none holds, then certify the round's degree guarantees by a full scan.
//! Counters live in [`PartAssignment`], so evaluating an event costs
//! O(d k) at worst and never touches the whole graph.

use rand_chacha::ChaCha8Rng;

use crate::lll::{
    self, check_condition, LllCertificate, LllProblem, Outcome, RunResult,
};
use crate::prob::{binom_cdf_log, binom_upper_log, LogProb};
use crate::rrg::RegularGraph;

use super::{round_seed, PartAssignment, PipelineRun, RoundFailure, RoundReport};

fn uniform_index(rng: &mut ChaCha8Rng, len: usize) -> usize {
    use rand::Rng;
    let u: f64 = rng.gen();
    ((u * len as f64) as usize).min(len - 1)
}

/// Budget factor * max(1, ceil(2 |F| beta / (1 - beta))), floored at
/// factor * n.
fn scaled_budget(events: usize, beta: f64, n: usize, factor: u64) -> u64 {
    let expect = 2.0 * events as f64 * beta / (1.0 - beta);
    let from_bound = factor * (expect.ceil() as u64).max(1);
    from_bound.max(factor * n as u64)
}

/// Smallest integer count c with c >= t (counts are nonnegative).
fn count_at_least(t: f64) -> u64 {
    t.ceil().max(0.0) as u64
}

/// Largest integer count c with c <= t; None when no count qualifies.
fn count_at_most(t: f64) -> Option<u64> {
    if t < 0.0 {
        None
    } else {
        Some(t.floor() as u64)
    }
}

fn beta_for(q_log: f64) -> f64 {
    (4.0 * q_log.exp()).clamp(1e-300, 0.5)
}

/// Gamma_v: the low parts minus the under-full index set I_v and the tree
/// neighborhood of I_v. A vertex resampled into Gamma_v cannot land in a
/// part with an under-full tree neighbor.
pub(crate) fn safe_parts(
    k: usize,
    h: usize,
    tree_adj: &[Vec<usize>],
    under_full: &[usize],
) -> Vec<usize> {
    let mut blocked = vec![false; k + 1];
    for &j in under_full {
        blocked[j] = true;
        for &t in &tree_adj[j] {
            blocked[t] = true;
        }
    }
    (h + 1..=k).filter(|&j| !blocked[j]).collect()
}

fn lse2(a: LogProb, b: LogProb) -> LogProb {
    let (x, y) = (a.value(), b.value());
    if x == f64::NEG_INFINITY {
        return b;
    }
    if y == f64::NEG_INFINITY {
        return a;
    }
    let m = x.max(y);
    LogProb(m + ((x - m).exp() + (y - m).exp()).ln())
}

// ---------------------------------------------------------------------------
// Round 1: populate the high-degree parts with rate (1 - alpha)/k and
// resample away over-full degrees.
// ---------------------------------------------------------------------------

struct Round1<'c> {
    g: &'c RegularGraph,
    state: &'c mut PartAssignment,
    h: usize,
    per_part: f64, // (1 - alpha)/k
    hi: f64,
}

impl LllProblem for Round1<'_> {
    fn num_vars(&self) -> usize {
        self.g.n()
    }

    fn num_events(&self) -> usize {
        self.g.n()
    }

    fn resample_var(&mut self, var: usize, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        let v = var + 1;
        let u: f64 = rng.gen();
        let cum = self.h as f64 * self.per_part;
        let part = if u < cum {
            1 + ((u / self.per_part) as usize).min(self.h - 1)
        } else {
            0
        };
        self.state.assign(self.g, v, part);
    }

    fn event_true(&self, event: usize) -> bool {
        let v = event + 1;
        (1..=self.h).any(|i| self.state.count(v, i) as f64 >= self.hi)
    }

    fn event_scope(&self, event: usize, sink: &mut dyn FnMut(usize)) {
        for &w in self.g.neighbors(event + 1) {
            sink(w - 1);
        }
    }

    fn events_touching_var(&self, var: usize, sink: &mut dyn FnMut(usize)) {
        for &w in self.g.neighbors(var + 1) {
            sink(w - 1);
        }
    }
}

impl PipelineRun<'_> {
    /// Round 1: high-degree parts only. Eliminates degrees >= C log d into
    /// parts 1..=h; the under-full side (B2) is measured and left for
    /// round 2.
    pub fn round1(&mut self) -> Result<(), RoundFailure> {
        let mut report = RoundReport::new("r1", self.k);
        if self.h == 0 {
            self.round_input = self.state.snapshot();
            report.success = true;
            self.record_sizes(&mut report);
            self.reports.push(report);
            return Ok(());
        }
        let (n, d) = (self.g.n(), self.g.d());
        let seed = round_seed(self.seed, 1);
        let per_part = (1.0 - self.alpha) / self.k as f64;

        let q_log = LogProb(
            (self.h as f64).ln()
                + binom_upper_log(d as u64, per_part, count_at_least(self.th.hi))
                    .expect("rate in [0,1]")
                    .value(),
        );
        let beta = beta_for(q_log.value());
        let cert = check_condition(q_log, beta, (d * d) as u64);
        let budget = scaled_budget(n, beta, n, self.cfg.budget_factor);

        {
            let mut prob = Round1 {
                g: self.g,
                state: &mut self.state,
                h: self.h,
                per_part,
                hi: self.th.hi,
            };
            lll::initial_sample(&mut prob, seed);
        }
        for v in 1..=n {
            self.initial_part[v] = self.state.part_of(v);
        }
        self.round_input = self.initial_part.clone();
        let res = {
            let mut prob = Round1 {
                g: self.g,
                state: &mut self.state,
                h: self.h,
                per_part,
                hi: self.th.hi,
            };
            lll::resume(&mut prob, seed, budget, self.cfg.tie_break)
        };
        self.finish_lll_round(&mut report, res, Some(cert))?;

        // closing scan: the W side is gone; B2 is only measured here
        for v in 1..=n {
            for i in 1..=self.h {
                if self.state.count(v, i) as f64 >= self.th.hi {
                    return Err(self.fail(report, "post-scan: degree at or above C log d survived"));
                }
            }
        }
        report.residual_bad = (1..=n)
            .filter(|&v| (1..=self.h).any(|i| self.state.count(v, i) as f64 <= self.th.lo))
            .count();
        report.window_hi = Some(self.th.hi);
        report.success = true;
        self.record_sizes(&mut report);
        self.reports.push(report);
        Ok(())
    }

    pub(super) fn fail(&mut self, mut report: RoundReport, reason: &str) -> RoundFailure {
        report.success = false;
        let round: &'static str = match report.round.as_str() {
            "r1" => "r1",
            "r2" => "r2",
            "r3" => "r3",
            "r4" => "r4",
            "r5" => "r5",
            "small" => "small",
            _ => "final",
        };
        self.record_sizes(&mut report);
        self.reports.push(report);
        RoundFailure {
            round,
            reason: reason.to_string(),
        }
    }

    /// Common tail of an LLL round: records tau, the trace, and the
    /// symmetric difference against the round's initial configuration;
    /// converts engine failures into round failures.
    fn finish_lll_round(
        &mut self,
        report: &mut RoundReport,
        res: RunResult,
        cert: Option<LllCertificate>,
    ) -> Result<(), RoundFailure> {
        report.tau = res.log.tau();
        report.certificate = cert;
        let diff = self.state.sym_diff(&self.round_input);
        report.sym_diff = diff[1..].to_vec();
        self.logs.push((report.round.clone(), res.log));
        match res.outcome {
            Outcome::Success => Ok(()),
            Outcome::BudgetExceeded => {
                let r = self.fail(report.clone(), "resampling budget exceeded");
                Err(r)
            }
            Outcome::Stuck { event } => {
                let r = self.fail(
                    report.clone(),
                    &format!("event {event} is true but has empty scope"),
                );
                Err(r)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Round 2: sprinkle the reserved set U into the high-degree parts.
// ---------------------------------------------------------------------------

struct Round2<'c> {
    g: &'c RegularGraph,
    state: &'c mut PartAssignment,
    h: usize,
    lo: f64,
    hi2: f64,
    u_vertices: &'c [usize],
    var_of: &'c [usize],
    /// Cumulative probabilities over parts 1..=h; leftover mass stays
    /// unassigned.
    p_cum: &'c [f64],
}

impl LllProblem for Round2<'_> {
    fn num_vars(&self) -> usize {
        self.u_vertices.len()
    }

    fn num_events(&self) -> usize {
        self.g.n()
    }

    fn resample_var(&mut self, var: usize, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        let v = self.u_vertices[var];
        let u: f64 = rng.gen();
        let part = match self.p_cum.iter().position(|&c| u < c) {
            Some(i) => i + 1,
            None => 0,
        };
        self.state.assign(self.g, v, part);
    }

    fn event_true(&self, event: usize) -> bool {
        let v = event + 1;
        (1..=self.h).any(|i| {
            let c = self.state.count(v, i) as f64;
            c <= self.lo || c >= self.hi2
        })
    }

    fn event_scope(&self, event: usize, sink: &mut dyn FnMut(usize)) {
        for &w in self.g.neighbors(event + 1) {
            if self.var_of[w] != usize::MAX {
                sink(self.var_of[w]);
            }
        }
    }

    fn events_touching_var(&self, var: usize, sink: &mut dyn FnMut(usize)) {
        for &w in self.g.neighbors(self.u_vertices[var]) {
            sink(w - 1);
        }
    }
}

impl PipelineRun<'_> {
    /// Round 2: builds U from the neighborhood of the under-full vertices
    /// (padded with the lowest-index unassigned vertices to size
    /// alpha n u_fraction), sprinkles it into parts 1..=h with the exact
    /// rates hitting expected size n/k, and resamples until every vertex
    /// sees each high part within (delta log d, 2C log d).
    pub fn round2(&mut self) -> Result<(), RoundFailure> {
        let mut report = RoundReport::new("r2", self.k);
        if self.h == 0 {
            self.round_input = self.state.snapshot();
            report.success = true;
            self.record_sizes(&mut report);
            self.reports.push(report);
            return Ok(());
        }
        let (n, d) = (self.g.n(), self.g.d());
        let seed = round_seed(self.seed, 2);

        // B2 and its outside neighborhood, from the live state.
        let b2: Vec<usize> = (1..=n)
            .filter(|&v| (1..=self.h).any(|i| self.state.count(v, i) as f64 <= self.th.lo))
            .collect();
        let mut in_u = vec![false; n + 1];
        let mut u_vertices: Vec<usize> = Vec::new();
        for &b in &b2 {
            for &w in self.g.neighbors(b) {
                if self.state.part_of(w) == 0 && !in_u[w] {
                    in_u[w] = true;
                    u_vertices.push(w);
                }
            }
        }
        let core_len = u_vertices.len();
        let u_target = (self.alpha * n as f64 * self.cfg.u_fraction).floor() as usize;
        if core_len > u_target {
            return Err(self.fail(
                report,
                &format!("N(B2) outside the high parts has {core_len} vertices, exceeding |U| = {u_target}"),
            ));
        }
        for v in 1..=n {
            if u_vertices.len() >= u_target {
                break;
            }
            if self.state.part_of(v) == 0 && !in_u[v] {
                in_u[v] = true;
                u_vertices.push(v);
            }
        }
        u_vertices.sort_unstable();
        if u_vertices.len() < u_target {
            return Err(self.fail(
                report,
                &format!(
                    "only {} unassigned vertices available for |U| = {u_target}",
                    u_vertices.len()
                ),
            ));
        }

        // Sprinkling rates p_i = (n/k - |A_i|) / |U|.
        let target = self.n_over_k() as f64;
        let u_len = u_vertices.len();
        let mut p: Vec<f64> = (1..=self.h)
            .map(|i| (target - self.state.size(i) as f64) / u_len.max(1) as f64)
            .collect();
        let needs_fix = u_len == 0 && p.iter().any(|&x| x != 0.0);
        if needs_fix {
            return Err(self.fail(report, "U is empty but the high parts are off target"));
        }
        let psum: f64 = p.iter().sum();
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || psum > 1.0 {
            if self.cfg.practical_mode {
                log::warn!(
                    "sprinkling rates out of range (sum {psum:.4}); rescaling in practical mode"
                );
                for x in p.iter_mut() {
                    *x = x.max(0.0);
                }
                let s: f64 = p.iter().sum();
                if s > 1.0 {
                    for x in p.iter_mut() {
                        *x *= (1.0 - 1e-9) / s;
                    }
                }
            } else {
                return Err(self.fail(
                    report,
                    &format!("sprinkling rates out of range: {p:?} (sum {psum:.4})"),
                ));
            }
        }
        report.u_size = Some(u_len);
        report.sprinkle_rates = Some(p.clone());
        let p_cum: Vec<f64> = p
            .iter()
            .scan(0.0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect();

        let mut var_of = vec![usize::MAX; n + 1];
        for (idx, &v) in u_vertices.iter().enumerate() {
            var_of[v] = idx;
        }

        // Certificate: upper side needs C log d new neighbors inside one
        // part of U; lower side only threatens B2 members, whose outside
        // neighborhood is entirely inside U.
        let p_max = p.iter().cloned().fold(0.0, f64::max);
        let p_min = p.iter().cloned().fold(1.0, f64::min);
        let up = if p_max > 0.0 {
            binom_upper_log(d as u64, p_max, count_at_least(self.th.hi)).expect("rate in [0,1]")
        } else {
            LogProb::ZERO
        };
        let low = b2
            .iter()
            .map(|&v| {
                self.g
                    .neighbors(v)
                    .iter()
                    .filter(|&&w| in_u[w])
                    .count() as u64
            })
            .min()
            .map(|min_u| match count_at_most(self.th.lo) {
                Some(m) => binom_cdf_log(min_u, p_min, m).expect("rate in [0,1]"),
                None => LogProb::ZERO,
            })
            .unwrap_or(LogProb::ZERO);
        let q_log = LogProb((self.h as f64).ln() + lse2(up, low).value());
        let beta = beta_for(q_log.value());
        let cert = check_condition(q_log, beta, (d * d) as u64);
        let budget = scaled_budget(n, beta, n, self.cfg.budget_factor);

        let pre = self.state.snapshot();
        {
            let mut prob = Round2 {
                g: self.g,
                state: &mut self.state,
                h: self.h,
                lo: self.th.lo,
                hi2: self.th.hi2,
                u_vertices: &u_vertices,
                var_of: &var_of,
                p_cum: &p_cum,
            };
            lll::initial_sample(&mut prob, seed);
        }
        report.initial_moved = u_vertices
            .iter()
            .filter(|&&v| self.state.part_of(v) != pre[v])
            .count();
        self.round_input = self.state.snapshot();
        let res = {
            let mut prob = Round2 {
                g: self.g,
                state: &mut self.state,
                h: self.h,
                lo: self.th.lo,
                hi2: self.th.hi2,
                u_vertices: &u_vertices,
                var_of: &var_of,
                p_cum: &p_cum,
            };
            lll::resume(&mut prob, seed, budget, self.cfg.tie_break)
        };
        self.finish_lll_round(&mut report, res, Some(cert))?;

        for v in 1..=n {
            for i in 1..=self.h {
                let c = self.state.count(v, i) as f64;
                if c <= self.th.lo || c >= self.th.hi2 {
                    return Err(self.fail(
                        report,
                        &format!("post-scan: d({v}, part {i}) = {c} outside (delta log d, 2C log d)"),
                    ));
                }
            }
        }
        report.window_lo = Some(self.th.lo);
        report.window_hi = Some(self.th.hi2);
        report.success = true;
        self.record_sizes(&mut report);
        self.reports.push(report);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Round 3: distribute everything else over the low-degree parts.
// ---------------------------------------------------------------------------

struct Round3<'c> {
    g: &'c RegularGraph,
    state: &'c mut PartAssignment,
    k: usize,
    h: usize,
    lo: f64,
    hi2: f64,
    loglog: f64,
    eps2_cap: f64,
    tree_adj: &'c [Vec<usize>],
    u_vertices: &'c [usize],
    var_of: &'c [usize],
}

impl Round3<'_> {
    /// Bad vertex: some low tree-neighbor part of its own part sees it
    /// with at most delta log d edges.
    fn is_bad(&self, u: usize) -> bool {
        let p = self.state.part_of(u);
        self.tree_adj[p]
            .iter()
            .any(|&j| j > self.h && self.state.count(u, j) as f64 <= self.lo)
    }
}

impl LllProblem for Round3<'_> {
    fn num_vars(&self) -> usize {
        self.u_vertices.len()
    }

    fn num_events(&self) -> usize {
        self.g.n()
    }

    fn resample_var(&mut self, var: usize, rng: &mut ChaCha8Rng) {
        let v = self.u_vertices[var];
        let span = self.k - self.h;
        let part = self.h + 1 + uniform_index(rng, span);
        self.state.assign(self.g, v, part);
    }

    fn event_true(&self, event: usize) -> bool {
        let v = event + 1;
        for i in 1..=self.k {
            if self.state.count(v, i) as f64 >= self.hi2 {
                return true;
            }
        }
        let low_parts = (self.h + 1..=self.k)
            .filter(|&i| (self.state.count(v, i) as f64) < self.lo)
            .count();
        if low_parts as f64 > self.eps2_cap {
            return true;
        }
        // exposure to bad vertices, per part
        let mut per_part = vec![0u32; self.k + 1];
        for &u in self.g.neighbors(v) {
            if self.is_bad(u) {
                let p = self.state.part_of(u);
                per_part[p] += 1;
                if per_part[p] as f64 > self.loglog {
                    return true;
                }
            }
        }
        false
    }

    fn event_scope(&self, event: usize, sink: &mut dyn FnMut(usize)) {
        let v = event + 1;
        if self.var_of[v] != usize::MAX {
            sink(self.var_of[v]);
        }
        for &u in self.g.neighbors(v) {
            if self.var_of[u] != usize::MAX {
                sink(self.var_of[u]);
            }
            for &w in self.g.neighbors(u) {
                if self.var_of[w] != usize::MAX {
                    sink(self.var_of[w]);
                }
            }
        }
    }

    fn events_touching_var(&self, var: usize, sink: &mut dyn FnMut(usize)) {
        let v = self.u_vertices[var];
        sink(v - 1);
        for &u in self.g.neighbors(v) {
            sink(u - 1);
            for &w in self.g.neighbors(u) {
                sink(w - 1);
            }
        }
    }
}

impl PipelineRun<'_> {
    /// Round 3: uniform distribution of every unassigned vertex over
    /// parts h+1..=k, resampling until no vertex has an over-full part,
    /// more than 1/epsilon^2 under-full low parts, or too much exposure
    /// to bad vertices. The surviving bad set B5 is measured and handed
    /// to round 4.
    pub fn round3(&mut self) -> Result<(), RoundFailure> {
        let mut report = RoundReport::new("r3", self.k);
        let (n, d) = (self.g.n(), self.g.d());
        let seed = round_seed(self.seed, 3);
        let u_vertices: Vec<usize> = (1..=n).filter(|&v| self.state.part_of(v) == 0).collect();
        let mut var_of = vec![usize::MAX; n + 1];
        for (idx, &v) in u_vertices.iter().enumerate() {
            var_of[v] = idx;
        }
        let span = self.k - self.h;

        if span == 1 {
            // single bin: deterministic assignment, then only the scans run
            for &v in &u_vertices {
                self.state.assign(self.g, v, self.k);
                self.initial_part[v] = self.k;
            }
            self.round_input = self.state.snapshot();
            let scan = self.round3_scan(&u_vertices, &var_of);
            if let Err(reason) = scan {
                return Err(self.fail(report, &reason));
            }
        } else {
            let q_log = self.round3_q(d, span);
            let beta = beta_for(q_log.value());
            let cert = check_condition(q_log, beta, (d as u64).pow(4));
            let budget = scaled_budget(n, beta, n, self.cfg.budget_factor);

            {
                let mut prob = Round3 {
                    g: self.g,
                    state: &mut self.state,
                    k: self.k,
                    h: self.h,
                    lo: self.th.lo,
                    hi2: self.th.hi2,
                    loglog: self.th.loglog,
                    eps2_cap: self.th.eps2_cap,
                    tree_adj: &self.tree_adj,
                    u_vertices: &u_vertices,
                    var_of: &var_of,
                };
                lll::initial_sample(&mut prob, seed);
            }
            for &v in &u_vertices {
                self.initial_part[v] = self.state.part_of(v);
            }
            self.round_input = self.state.snapshot();
            let res = {
                let mut prob = Round3 {
                    g: self.g,
                    state: &mut self.state,
                    k: self.k,
                    h: self.h,
                    lo: self.th.lo,
                    hi2: self.th.hi2,
                    loglog: self.th.loglog,
                    eps2_cap: self.th.eps2_cap,
                    tree_adj: &self.tree_adj,
                    u_vertices: &u_vertices,
                    var_of: &var_of,
                };
                lll::resume(&mut prob, seed, budget, self.cfg.tie_break)
            };
            self.finish_lll_round(&mut report, res, Some(cert))?;
            if let Err(reason) = self.round3_scan(&u_vertices, &var_of) {
                return Err(self.fail(report, &reason));
            }
        }

        report.residual_bad = self.b5().len();
        report.window_hi = Some(self.th.hi2);
        report.success = true;
        self.record_sizes(&mut report);
        self.reports.push(report);
        Ok(())
    }

    /// Union bound over the three event families, with the desk-scale
    /// parameters plugged into the same shapes the analysis uses.
    fn round3_q(&self, d: usize, span: usize) -> LogProb {
        let p1 = 1.0 / span as f64;
        let item1 = LogProb(
            (self.k as f64).ln()
                + binom_upper_log(d as u64, p1, count_at_least(self.th.hi2))
                    .expect("rate in [0,1]")
                    .value(),
        );
        let item2 = if (span as f64) <= self.th.eps2_cap {
            LogProb::ZERO
        } else {
            let r = self.th.eps2_cap.floor() as u64 + 1;
            let joint = count_at_most(r as f64 * self.th.lo)
                .map(|m| {
                    binom_cdf_log(d as u64, r as f64 * p1, m)
                        .expect("rate in [0,1]")
                        .value()
                })
                .unwrap_or(f64::NEG_INFINITY);
            let ln_choose: f64 = (0..r)
                .map(|i| ((span as u64 - i) as f64).ln() - ((i + 1) as f64).ln())
                .sum();
            LogProb(ln_choose + joint)
        };
        let pb = count_at_most(self.th.lo)
            .map(|m| {
                (2.0 * span as f64
                    * binom_cdf_log(d as u64 - 1, p1, m)
                        .expect("rate in [0,1]")
                        .prob())
                .min(1.0)
            })
            .unwrap_or(0.0);
        let item3 = if pb > 0.0 && self.th.loglog >= 1.0 {
            LogProb(
                (self.k as f64).ln()
                    + binom_upper_log(d as u64, pb, count_at_least(self.th.loglog))
                        .expect("rate in [0,1]")
                        .value(),
            )
        } else if pb > 0.0 {
            LogProb::ONE
        } else {
            LogProb::ZERO
        };
        lse2(lse2(item1, item2), item3)
    }

    fn round3_scan(&self, u_vertices: &[usize], var_of: &[usize]) -> Result<(), String> {
        let prob = Round3Scan {
            g: self.g,
            state: &self.state,
            k: self.k,
            h: self.h,
            lo: self.th.lo,
            hi2: self.th.hi2,
            loglog: self.th.loglog,
            eps2_cap: self.th.eps2_cap,
            tree_adj: &self.tree_adj,
            u_vertices,
            var_of,
        };
        for v in 1..=self.g.n() {
            if prob.event_true_at(v) {
                return Err(format!("post-scan: vertex {v} still violates a W condition"));
            }
        }
        Ok(())
    }

    /// Vertices with an under-full low tree-neighbor part.
    pub(crate) fn b5(&self) -> Vec<usize> {
        (1..=self.g.n())
            .filter(|&v| {
                let p = self.state.part_of(v);
                self.tree_adj[p]
                    .iter()
                    .any(|&j| j > self.h && self.state.count(v, j) as f64 <= self.th.lo)
            })
            .collect()
    }
}

/// Read-only twin of [`Round3`] for the closing scan.
struct Round3Scan<'c> {
    g: &'c RegularGraph,
    state: &'c PartAssignment,
    k: usize,
    h: usize,
    lo: f64,
    hi2: f64,
    loglog: f64,
    eps2_cap: f64,
    tree_adj: &'c [Vec<usize>],
    #[allow(dead_code)]
    u_vertices: &'c [usize],
    #[allow(dead_code)]
    var_of: &'c [usize],
}

impl Round3Scan<'_> {
    fn is_bad(&self, u: usize) -> bool {
        let p = self.state.part_of(u);
        self.tree_adj[p]
            .iter()
            .any(|&j| j > self.h && self.state.count(u, j) as f64 <= self.lo)
    }

    fn event_true_at(&self, v: usize) -> bool {
        for i in 1..=self.k {
            if self.state.count(v, i) as f64 >= self.hi2 {
                return true;
            }
        }
        let low_parts = (self.h + 1..=self.k)
            .filter(|&i| (self.state.count(v, i) as f64) < self.lo)
            .count();
        if low_parts as f64 > self.eps2_cap {
            return true;
        }
        let mut per_part = vec![0u32; self.k + 1];
        for &u in self.g.neighbors(v) {
            if self.is_bad(u) {
                let p = self.state.part_of(u);
                per_part[p] += 1;
                if per_part[p] as f64 > self.loglog {
                    return true;
                }
            }
        }
        false
    }
}

// ---------------------------------------------------------------------------
// Round 4: move the residual bad vertices into their safe part sets.
// ---------------------------------------------------------------------------

struct Round4<'c> {
    g: &'c RegularGraph,
    state: &'c mut PartAssignment,
    k: usize,
    hi3: f64,
    b5: &'c [usize],
    var_of: &'c [usize],
    gammas: &'c [Vec<usize>],
}

impl LllProblem for Round4<'_> {
    fn num_vars(&self) -> usize {
        self.b5.len()
    }

    fn num_events(&self) -> usize {
        self.g.n()
    }

    fn resample_var(&mut self, var: usize, rng: &mut ChaCha8Rng) {
        let v = self.b5[var];
        let gamma = &self.gammas[var];
        let part = gamma[uniform_index(rng, gamma.len())];
        self.state.assign(self.g, v, part);
    }

    fn event_true(&self, event: usize) -> bool {
        let v = event + 1;
        (1..=self.k).any(|i| self.state.count(v, i) as f64 >= self.hi3)
    }

    fn event_scope(&self, event: usize, sink: &mut dyn FnMut(usize)) {
        for &w in self.g.neighbors(event + 1) {
            if self.var_of[w] != usize::MAX {
                sink(self.var_of[w]);
            }
        }
    }

    fn events_touching_var(&self, var: usize, sink: &mut dyn FnMut(usize)) {
        for &w in self.g.neighbors(self.b5[var]) {
            sink(w - 1);
        }
    }
}

impl PipelineRun<'_> {
    /// Round 4: every vertex of B5 is redrawn uniformly over its safe
    /// part set Gamma_v = low parts minus I_v and its tree neighborhood;
    /// resampling then clears degrees >= 3C log d, and the closing scan
    /// certifies the two-sided guarantee on tree edges.
    pub fn round4(&mut self) -> Result<(), RoundFailure> {
        let mut report = RoundReport::new("r4", self.k);
        let (n, d) = (self.g.n(), self.g.d());
        let seed = round_seed(self.seed, 4);
        let b5 = self.b5();
        report.residual_bad = 0;
        if b5.is_empty() {
            self.round_input = self.state.snapshot();
            if let Err(reason) = self.round4_scan() {
                return Err(self.fail(report, &reason));
            }
            report.window_lo = Some(self.th.lo2);
            report.window_hi = Some(self.th.hi3);
            report.success = true;
            self.record_sizes(&mut report);
            self.reports.push(report);
            return Ok(());
        }

        // Safe part sets, fixed from the round-3 output.
        let mut gammas: Vec<Vec<usize>> = Vec::with_capacity(b5.len());
        for &v in &b5 {
            let under_full: Vec<usize> = (self.h + 1..=self.k)
                .filter(|&j| self.state.count(v, j) as f64 <= self.th.lo)
                .collect();
            let gamma = safe_parts(self.k, self.h, &self.tree_adj, &under_full);
            if gamma.is_empty() {
                return Err(self.fail(
                    report,
                    &format!("vertex {v} has an empty safe part set Gamma_v"),
                ));
            }
            gammas.push(gamma);
        }
        let mut var_of = vec![usize::MAX; n + 1];
        for (idx, &v) in b5.iter().enumerate() {
            var_of[v] = idx;
        }

        let gamma_min = gammas.iter().map(|g| g.len()).min().unwrap_or(1);
        let q_log = LogProb(
            (self.k as f64).ln()
                + binom_upper_log(d as u64, 1.0 / gamma_min as f64, count_at_least(self.th.hi))
                    .expect("rate in [0,1]")
                    .value(),
        );
        let beta = beta_for(q_log.value());
        let cert = check_condition(q_log, beta, (d as u64).pow(4));
        let budget = scaled_budget(n, beta, n, self.cfg.budget_factor);

        let pre = self.state.snapshot();
        {
            let mut prob = Round4 {
                g: self.g,
                state: &mut self.state,
                k: self.k,
                hi3: self.th.hi3,
                b5: &b5,
                var_of: &var_of,
                gammas: &gammas,
            };
            lll::initial_sample(&mut prob, seed);
        }
        report.initial_moved = b5.iter().filter(|&&v| self.state.part_of(v) != pre[v]).count();
        self.round_input = self.state.snapshot();
        let res = {
            let mut prob = Round4 {
                g: self.g,
                state: &mut self.state,
                k: self.k,
                hi3: self.th.hi3,
                b5: &b5,
                var_of: &var_of,
                gammas: &gammas,
            };
            lll::resume(&mut prob, seed, budget, self.cfg.tie_break)
        };
        self.finish_lll_round(&mut report, res, Some(cert))?;
        if let Err(reason) = self.round4_scan() {
            return Err(self.fail(report, &reason));
        }
        report.window_lo = Some(self.th.lo2);
        report.window_hi = Some(self.th.hi3);
        report.success = true;
        self.record_sizes(&mut report);
        self.reports.push(report);
        Ok(())
    }

    /// Certifies d(v, A_j) > delta log d / 2 on tree edges and
    /// d(v, A_j) < 3C log d everywhere.
    fn round4_scan(&self) -> Result<(), String> {
        for v in 1..=self.g.n() {
            let p = self.state.part_of(v);
            for &j in &self.tree_adj[p] {
                if self.state.count(v, j) as f64 <= self.th.lo2 {
                    return Err(format!(
                        "post-scan: d({v}, part {j}) = {} at or below delta log d / 2",
                        self.state.count(v, j)
                    ));
                }
            }
            for j in 1..=self.k {
                if self.state.count(v, j) as f64 >= self.th.hi3 {
                    return Err(format!(
                        "post-scan: d({v}, part {j}) = {} at or above 3C log d",
                        self.state.count(v, j)
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Round 5: randomized size balancing by movers from over-full parts.
// ---------------------------------------------------------------------------

struct Round5<'c> {
    g: &'c RegularGraph,
    state: &'c mut PartAssignment,
    k: usize,
    lo2: f64,
    lo3: f64,
    hi4: f64,
    tree_adj: &'c [Vec<usize>],
    q_vertices: &'c [usize],
    var_of: &'c [usize],
    /// Per variable: the surplus part it belongs to and its move rate.
    home: &'c [usize],
    p_move: &'c [f64],
    deficit_parts: &'c [usize],
    deficit_cum: &'c [f64],
    /// Pre-move counters (flattened like PartAssignment's).
    c4: &'c [u32],
}

impl Round5<'_> {
    fn c4(&self, v: usize, p: usize) -> u32 {
        self.c4[v * (self.k + 1) + p]
    }
}

impl LllProblem for Round5<'_> {
    fn num_vars(&self) -> usize {
        self.q_vertices.len()
    }

    fn num_events(&self) -> usize {
        self.g.n()
    }

    fn resample_var(&mut self, var: usize, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        let v = self.q_vertices[var];
        let m: f64 = rng.gen();
        if m >= self.p_move[var] {
            self.state.assign(self.g, v, self.home[var]);
            return;
        }
        let z: f64 = rng.gen();
        let idx = self
            .deficit_cum
            .iter()
            .position(|&c| z < c)
            .unwrap_or(self.deficit_parts.len() - 1);
        self.state.assign(self.g, v, self.deficit_parts[idx]);
    }

    fn event_true(&self, event: usize) -> bool {
        let v = event + 1;
        let p = self.state.part_of(v);
        for &j in &self.tree_adj[p] {
            let c = self.state.count(v, j) as f64;
            if c < self.lo3 || c > self.hi4 {
                return true;
            }
        }
        // keep the pool of good vertices good: a vertex comfortable on
        // every part before the move must not drop to the new floor
        let all_good_before = (1..=self.k).all(|i| self.c4(v, i) as f64 > self.lo2);
        if all_good_before {
            return (1..=self.k).any(|i| self.state.count(v, i) as f64 <= self.lo3);
        }
        false
    }

    fn event_scope(&self, event: usize, sink: &mut dyn FnMut(usize)) {
        let v = event + 1;
        if self.var_of[v] != usize::MAX {
            sink(self.var_of[v]);
        }
        for &w in self.g.neighbors(v) {
            if self.var_of[w] != usize::MAX {
                sink(self.var_of[w]);
            }
        }
    }

    fn events_touching_var(&self, var: usize, sink: &mut dyn FnMut(usize)) {
        let v = self.q_vertices[var];
        sink(v - 1);
        for &w in self.g.neighbors(v) {
            sink(w - 1);
        }
    }
}

impl PipelineRun<'_> {
    /// Round 5: picks exactly floor(n/5k) good movers per over-full part,
    /// shifts each to an under-full part with the exact rates that equal
    /// the expected deficits, and resamples until the tree-edge window
    /// [delta log d / 3, 4C log d] holds and the good pool survives.
    pub fn round5(&mut self) -> Result<(), RoundFailure> {
        let mut report = RoundReport::new("r5", self.k);
        let (n, d) = (self.g.n(), self.g.d());
        let seed = round_seed(self.seed, 5);
        let target = self.n_over_k() as i64;

        let deltas: Vec<i64> = (0..=self.k)
            .map(|p| if p == 0 { 0 } else { self.state.size(p) as i64 - target })
            .collect();
        let surplus: Vec<usize> = (1..=self.k).filter(|&p| deltas[p] > 0).collect();
        let deficit_parts: Vec<usize> = (1..=self.k).filter(|&p| deltas[p] < 0).collect();
        let total_surplus: i64 = surplus.iter().map(|&p| deltas[p]).sum();
        let total_deficit: i64 = deficit_parts.iter().map(|&p| -deltas[p]).sum();
        debug_assert_eq!(total_surplus, total_deficit + deltas[0]);

        if surplus.is_empty() {
            self.round_input = self.state.snapshot();
            report.window_lo = Some(self.th.lo3);
            report.window_hi = Some(self.th.hi4);
            report.success = true;
            self.record_sizes(&mut report);
            self.reports.push(report);
            return Ok(());
        }

        let q_size = (n / (5 * self.k)).max(1);
        let mut q_vertices: Vec<usize> = Vec::new();
        let mut home: Vec<usize> = Vec::new();
        let mut p_move: Vec<f64> = Vec::new();
        for &p in &surplus {
            let mut pool: Vec<usize> = Vec::with_capacity(q_size);
            for v in 1..=n {
                if self.state.part_of(v) == p
                    && (1..=self.k).all(|i| {
                        let c = self.state.count(v, i) as f64;
                        c >= self.th.lo2 && c <= self.th.hi3
                    })
                {
                    pool.push(v);
                    if pool.len() == q_size {
                        break;
                    }
                }
            }
            if pool.len() < q_size {
                return Err(self.fail(
                    report,
                    &format!(
                        "surplus part {p} has only {} eligible movers, needs {q_size}",
                        pool.len()
                    ),
                ));
            }
            let rate = deltas[p] as f64 / q_size as f64;
            if rate > 1.0 {
                return Err(self.fail(
                    report,
                    &format!("part {p} is over target by {} > floor(n/5k) = {q_size}", deltas[p]),
                ));
            }
            for v in pool {
                q_vertices.push(v);
                home.push(p);
                p_move.push(rate);
            }
        }
        let mut order: Vec<usize> = (0..q_vertices.len()).collect();
        order.sort_unstable_by_key(|&i| q_vertices[i]);
        let q_vertices: Vec<usize> = order.iter().map(|&i| q_vertices[i]).collect();
        let home: Vec<usize> = order.iter().map(|&i| home[i]).collect();
        let p_move: Vec<f64> = order.iter().map(|&i| p_move[i]).collect();

        let mut var_of = vec![usize::MAX; n + 1];
        for (idx, &v) in q_vertices.iter().enumerate() {
            var_of[v] = idx;
        }
        let deficit_cum: Vec<f64> = deficit_parts
            .iter()
            .scan(0.0, |acc, &p| {
                *acc += -deltas[p] as f64 / total_deficit.max(1) as f64;
                Some(*acc)
            })
            .collect();
        let c4 = self.state.counters.clone();

        let p_max = p_move.iter().cloned().fold(0.0, f64::max);
        let q_log = if p_max > 0.0 {
            LogProb(
                (2.0 * self.k as f64).ln()
                    + binom_upper_log(
                        count_at_least(self.th.hi3),
                        p_max,
                        count_at_least(self.th.loglog),
                    )
                    .expect("rate in [0,1]")
                    .value(),
            )
        } else {
            LogProb::ZERO
        };
        let beta = beta_for(q_log.value());
        let cert = check_condition(q_log, beta, 2 * (d as u64).pow(4));
        let budget = scaled_budget(n, beta, n, self.cfg.budget_factor);

        let pre = self.state.snapshot();
        {
            let mut prob = Round5 {
                g: self.g,
                state: &mut self.state,
                k: self.k,
                lo2: self.th.lo2,
                lo3: self.th.lo3,
                hi4: self.th.hi4,
                tree_adj: &self.tree_adj,
                q_vertices: &q_vertices,
                var_of: &var_of,
                home: &home,
                p_move: &p_move,
                deficit_parts: &deficit_parts,
                deficit_cum: &deficit_cum,
                c4: &c4,
            };
            lll::initial_sample(&mut prob, seed);
        }
        report.initial_moved = q_vertices
            .iter()
            .filter(|&&v| self.state.part_of(v) != pre[v])
            .count();
        self.round_input = self.state.snapshot();
        let res = {
            let mut prob = Round5 {
                g: self.g,
                state: &mut self.state,
                k: self.k,
                lo2: self.th.lo2,
                lo3: self.th.lo3,
                hi4: self.th.hi4,
                tree_adj: &self.tree_adj,
                q_vertices: &q_vertices,
                var_of: &var_of,
                home: &home,
                p_move: &p_move,
                deficit_parts: &deficit_parts,
                deficit_cum: &deficit_cum,
                c4: &c4,
            };
            lll::resume(&mut prob, seed, budget, self.cfg.tie_break)
        };
        self.finish_lll_round(&mut report, res, Some(cert))?;

        for v in 1..=n {
            let p = self.state.part_of(v);
            for &j in &self.tree_adj[p] {
                let c = self.state.count(v, j) as f64;
                if c < self.th.lo3 || c > self.th.hi4 {
                    return Err(self.fail(
                        report,
                        &format!("post-scan: d({v}, part {j}) = {c} outside [delta log d/3, 4C log d]"),
                    ));
                }
            }
        }
        report.window_lo = Some(self.th.lo3);
        report.window_hi = Some(self.th.hi4);
        report.success = true;
        self.record_sizes(&mut report);
        self.reports.push(report);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Small-tree branch: one round over all k parts.
// ---------------------------------------------------------------------------

struct SmallRound<'c> {
    g: &'c RegularGraph,
    state: &'c mut PartAssignment,
    k: usize,
    lo_s: f64,
    hi_s: f64,
}

impl LllProblem for SmallRound<'_> {
    fn num_vars(&self) -> usize {
        self.g.n()
    }

    fn num_events(&self) -> usize {
        self.g.n()
    }

    fn resample_var(&mut self, var: usize, rng: &mut ChaCha8Rng) {
        let part = 1 + uniform_index(rng, self.k);
        self.state.assign(self.g, var + 1, part);
    }

    fn event_true(&self, event: usize) -> bool {
        let v = event + 1;
        (1..=self.k).any(|i| {
            let c = self.state.count(v, i) as f64;
            c < self.lo_s || c > self.hi_s
        })
    }

    fn event_scope(&self, event: usize, sink: &mut dyn FnMut(usize)) {
        for &w in self.g.neighbors(event + 1) {
            sink(w - 1);
        }
    }

    fn events_touching_var(&self, var: usize, sink: &mut dyn FnMut(usize)) {
        for &w in self.g.neighbors(var + 1) {
            sink(w - 1);
        }
    }
}

impl PipelineRun<'_> {
    /// The single round of the small-tree branch: uniform assignment over
    /// [k], events demand d(v, S_i) within [delta d/k, C d/k] for every
    /// part at once (no tree needed at this size).
    pub fn small_round(&mut self) -> Result<(), RoundFailure> {
        let mut report = RoundReport::new("small", self.k);
        let (n, d) = (self.g.n(), self.g.d());
        let seed = round_seed(self.seed, 6);
        let lo_s = self.cfg.delta * d as f64 / self.k as f64;
        let hi_s = self.cfg.c_big * d as f64 / self.k as f64;

        if self.k == 1 {
            // everything lands in the single part; no events possible
            for v in 1..=n {
                self.state.assign(self.g, v, 1);
                self.initial_part[v] = 1;
            }
            self.round_input = self.state.snapshot();
            report.success = true;
            report.window_lo = Some(lo_s);
            report.window_hi = Some(hi_s);
            self.record_sizes(&mut report);
            self.reports.push(report);
            return Ok(());
        }

        let p1 = 1.0 / self.k as f64;
        let low = match lo_s.ceil() as i64 - 1 {
            m if m < 0 => LogProb::ZERO,
            m => binom_cdf_log(d as u64, p1, m as u64).expect("rate in [0,1]"),
        };
        let up = binom_upper_log(d as u64, p1, (hi_s.floor() as u64) + 1).expect("rate in [0,1]");
        let q_log = LogProb((self.k as f64).ln() + lse2(low, up).value());
        let beta = 4.0 * (d as f64).powi(-4);
        let cert = check_condition(q_log, beta, (d * d) as u64);
        let budget = scaled_budget(n, beta, n, self.cfg.budget_factor);

        {
            let mut prob = SmallRound {
                g: self.g,
                state: &mut self.state,
                k: self.k,
                lo_s,
                hi_s,
            };
            lll::initial_sample(&mut prob, seed);
        }
        for v in 1..=n {
            self.initial_part[v] = self.state.part_of(v);
        }
        self.round_input = self.initial_part.clone();
        let res = {
            let mut prob = SmallRound {
                g: self.g,
                state: &mut self.state,
                k: self.k,
                lo_s,
                hi_s,
            };
            lll::resume(&mut prob, seed, budget, self.cfg.tie_break)
        };
        self.finish_lll_round(&mut report, res, Some(cert))?;

        for v in 1..=n {
            for i in 1..=self.k {
                let c = self.state.count(v, i) as f64;
                if c < lo_s || c > hi_s {
                    return Err(self.fail(
                        report,
                        &format!("post-scan: d({v}, part {i}) = {c} outside [delta d/k, C d/k]"),
                    ));
                }
            }
        }
        report.window_lo = Some(lo_s);
        report.window_hi = Some(hi_s);
        report.success = true;
        self.record_sizes(&mut report);
        self.reports.push(report);
        Ok(())
    }
}
