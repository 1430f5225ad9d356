//! Deterministic final balancing: one vertex at a time from over-full to
//! under-full parts, each move checked to keep every affected degree
//! inside the final window. A single move changes any vertex's count into
//! any part by at most one, so the window can only degrade move by move,
//! never silently.

use serde::{Deserialize, Serialize};

use super::{PipelineRun, RoundFailure, RoundReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceMove {
    pub vertex: usize,
    pub from: usize,
    pub to: usize,
}

/// Window discipline for one balancing pass.
#[derive(Debug, Clone, Copy)]
struct BalanceRules {
    /// Mover's own counts must sit inside this window on every part.
    mover_lo: f64,
    mover_hi: f64,
    /// Final window enforced on affected degrees.
    lo: f64,
    hi: f64,
    /// Constrain only tree-adjacent part pairs; false checks every pair
    /// (the small-tree regime).
    tree_edges_only: bool,
}

impl PipelineRun<'_> {
    /// Large-branch final balance: exact sizes n/k while the tree-edge
    /// window [delta log d / 4, 5C log d] holds.
    pub fn final_balance(&mut self) -> Result<(), RoundFailure> {
        self.balance_with(BalanceRules {
            mover_lo: self.th.lo3,
            mover_hi: self.th.hi5,
            lo: self.th.lo4,
            hi: self.th.hi5,
            tree_edges_only: true,
        })
    }

    /// Small-branch final balance: the all-pairs window widens by one on
    /// each side, [delta d/k - 1, C d/k + 1].
    pub fn final_balance_small(&mut self) -> Result<(), RoundFailure> {
        let d = self.g.d() as f64;
        let lo_s = self.cfg.delta * d / self.k as f64;
        let hi_s = self.cfg.c_big * d / self.k as f64;
        self.balance_with(BalanceRules {
            mover_lo: lo_s - 1.0,
            mover_hi: hi_s + 1.0,
            lo: lo_s - 1.0,
            hi: hi_s + 1.0,
            tree_edges_only: false,
        })
    }

    fn balance_with(&mut self, rules: BalanceRules) -> Result<(), RoundFailure> {
        let mut report = RoundReport::new("final", self.k);
        let before = self.state.snapshot();
        self.round_input = before.clone();
        let target = self.n_over_k();
        let n = self.g.n();
        let mut moves: Vec<BalanceMove> = Vec::new();

        loop {
            // biggest surplus first, lowest index on ties
            let from = (1..=self.k)
                .filter(|&p| self.state.size(p) > target)
                .max_by_key(|&p| (self.state.size(p), std::cmp::Reverse(p)));
            let from = match from {
                None => break,
                Some(p) => p,
            };
            let mut deficits: Vec<usize> = (1..=self.k)
                .filter(|&p| self.state.size(p) < target)
                .collect();
            deficits.sort_unstable_by_key(|&p| (self.state.size(p), p));

            let mut done = false;
            'search: for &to in &deficits {
                for v in 1..=n {
                    if self.state.part_of(v) != from {
                        continue;
                    }
                    if self.move_is_safe(v, from, to, rules) {
                        self.state.assign(self.g, v, to);
                        moves.push(BalanceMove { vertex: v, from, to });
                        done = true;
                        break 'search;
                    }
                }
            }
            if !done {
                let sizes: Vec<usize> = (1..=self.k).map(|p| self.state.size(p)).collect();
                return Err(self.fail(
                    report,
                    &format!(
                        "no eligible mover out of surplus part {from} (candidates exhausted); sizes {sizes:?}"
                    ),
                ));
            }
        }

        report.moves = moves.len() as u64;
        report.sym_diff = self.state.sym_diff(&before)[1..].to_vec();
        self.record_sizes(&mut report);

        // closing certification: exact sizes and the final degree window
        for p in 1..=self.k {
            if self.state.size(p) != target {
                return Err(self.fail(
                    report,
                    &format!(
                        "part {p} has size {} after balancing, want {target}",
                        self.state.size(p)
                    ),
                ));
            }
        }
        for v in 1..=n {
            let p = self.state.part_of(v);
            let violated = if rules.tree_edges_only {
                self.tree_adj[p].iter().copied().find(|&j| {
                    let c = self.state.count(v, j) as f64;
                    c < rules.lo || c > rules.hi
                })
            } else {
                (1..=self.k).find(|&j| {
                    let c = self.state.count(v, j) as f64;
                    c < rules.lo || c > rules.hi
                })
            };
            if let Some(j) = violated {
                let c = self.state.count(v, j);
                return Err(self.fail(
                    report,
                    &format!("post-scan: d({v}, part {j}) = {c} outside the final window"),
                ));
            }
        }

        report.window_lo = Some(rules.lo);
        report.window_hi = Some(rules.hi);
        report.success = true;
        self.reports.push(report);
        self.moves.extend(moves);
        Ok(())
    }

    /// A move is safe when the mover's own counts pass the mover window
    /// and no affected neighbor degree leaves the final window.
    fn move_is_safe(&self, v: usize, from: usize, to: usize, rules: BalanceRules) -> bool {
        for i in 1..=self.k {
            let c = self.state.count(v, i) as f64;
            if c < rules.mover_lo || c > rules.mover_hi {
                return false;
            }
        }
        for &u in self.g.neighbors(v) {
            let pu = self.state.part_of(u);
            let (watch_from, watch_to) = if rules.tree_edges_only {
                (
                    self.tree_adj[pu].binary_search(&from).is_ok(),
                    self.tree_adj[pu].binary_search(&to).is_ok(),
                )
            } else {
                (true, true)
            };
            if watch_from && (self.state.count(u, from) as f64 - 1.0) < rules.lo {
                return false;
            }
            if watch_to && (self.state.count(u, to) as f64 + 1.0) > rules.hi {
                return false;
            }
        }
        true
    }
}
