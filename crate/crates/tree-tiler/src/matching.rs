//! Perfect matchings between tree-adjacent parts, Hall diagnostics, and
//! T-factor assembly plus verification.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rrg::RegularGraph;
use crate::tree::Tree;

/// The bipartite restriction of the host graph to two parts. Vertices are
/// referred to by local index into `left_vertices` / `right_vertices`.
#[derive(Debug, Clone)]
pub struct BipartitePair {
    pub left_part: usize,
    pub right_part: usize,
    pub left_vertices: Vec<usize>,
    pub right_vertices: Vec<usize>,
    /// adj[l] = right-local indices adjacent to left-local l.
    pub adj: Vec<Vec<usize>>,
}

impl BipartitePair {
    /// Restricts `g` to the edges between parts `i` and `j`.
    pub fn from_parts(g: &RegularGraph, parts: &[Vec<usize>], i: usize, j: usize) -> Self {
        let left_vertices = parts[i - 1].clone();
        let right_vertices = parts[j - 1].clone();
        let mut right_index = vec![usize::MAX; g.n() + 1];
        for (idx, &v) in right_vertices.iter().enumerate() {
            right_index[v] = idx;
        }
        let adj = left_vertices
            .iter()
            .map(|&v| {
                g.neighbors(v)
                    .iter()
                    .filter_map(|&w| (right_index[w] != usize::MAX).then(|| right_index[w]))
                    .collect()
            })
            .collect();
        BipartitePair {
            left_part: i,
            right_part: j,
            left_vertices,
            right_vertices,
            adj,
        }
    }

    /// Builds a pair directly from local adjacency (test harness entry).
    pub fn from_adj(left_n: usize, right_n: usize, adj: Vec<Vec<usize>>) -> Self {
        assert_eq!(adj.len(), left_n);
        BipartitePair {
            left_part: 1,
            right_part: 2,
            left_vertices: (1..=left_n).collect(),
            right_vertices: (left_n + 1..=left_n + right_n).collect(),
            adj,
        }
    }
}

/// Either a perfect matching (left-local -> right-local) or a Hall
/// violator: left vertices W with |N(W)| < |W|.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchingResult {
    Perfect(Vec<usize>),
    Violator(Vec<usize>),
}

/// Maximum matching by Hopcroft-Karp; on a non-perfect outcome the left
/// vertices reachable from an unmatched left vertex by alternating paths
/// form the returned Hall violator.
pub fn perfect_matching(pair: &BipartitePair) -> MatchingResult {
    let (match_l, dist, size) = hopcroft_karp(pair);
    let (ln, rn) = (pair.left_vertices.len(), pair.right_vertices.len());
    if size == ln && ln == rn {
        return MatchingResult::Perfect(match_l);
    }

    // Alternating reachability from the unmatched left vertices; dist
    // already marks exactly the left side of that structure after the
    // final (failed) BFS phase.
    let violator: Vec<usize> = (0..ln).filter(|&l| dist[l] != u32::MAX).collect();
    MatchingResult::Violator(violator)
}

/// The maximum matching itself, as (left-local, right-local) pairs.
pub fn maximum_matching(pair: &BipartitePair) -> Vec<(usize, usize)> {
    let (match_l, _, _) = hopcroft_karp(pair);
    match_l
        .iter()
        .enumerate()
        .filter(|&(_, &r)| r != usize::MAX)
        .map(|(l, &r)| (l, r))
        .collect()
}

/// Core alternating BFS/DFS phases. Returns the left matching array, the
/// final layered-distance array (u32::MAX off the alternating structure),
/// and the matching size.
fn hopcroft_karp(pair: &BipartitePair) -> (Vec<usize>, Vec<u32>, usize) {
    let (ln, rn) = (pair.left_vertices.len(), pair.right_vertices.len());
    let adj = &pair.adj;
    let mut match_l = vec![usize::MAX; ln];
    let mut match_r = vec![usize::MAX; rn];
    let mut dist = vec![u32::MAX; ln];
    let mut size = 0usize;

    loop {
        // BFS phase: layered distances from unmatched left vertices.
        let mut queue = VecDeque::new();
        for l in 0..ln {
            if match_l[l] == usize::MAX {
                dist[l] = 0;
                queue.push_back(l);
            } else {
                dist[l] = u32::MAX;
            }
        }
        let mut found_free = false;
        while let Some(l) = queue.pop_front() {
            for &r in &adj[l] {
                let l2 = match_r[r];
                if l2 == usize::MAX {
                    found_free = true;
                } else if dist[l2] == u32::MAX {
                    dist[l2] = dist[l] + 1;
                    queue.push_back(l2);
                }
            }
        }
        if !found_free {
            break;
        }
        // DFS phase along layered edges.
        for l in 0..ln {
            if match_l[l] == usize::MAX && augment(adj, &mut match_l, &mut match_r, &mut dist, l) {
                size += 1;
            }
        }
    }
    (match_l, dist, size)
}

fn augment(
    adj: &[Vec<usize>],
    match_l: &mut [usize],
    match_r: &mut [usize],
    dist: &mut [u32],
    l: usize,
) -> bool {
    let d = dist[l];
    dist[l] = u32::MAX;
    for &r in &adj[l] {
        let l2 = match_r[r];
        if l2 == usize::MAX || (dist[l2] == d + 1 && augment(adj, match_l, match_r, dist, l2)) {
            match_l[l] = r;
            match_r[r] = l;
            return true;
        }
    }
    false
}

/// Empirical Hall diagnostic: minimum |N(W)| - |W| over left subsets,
/// exhaustive when the left side fits in `max_subset` (<= 20), sampled
/// otherwise.
#[derive(Debug, Clone)]
pub struct HallScanReport {
    pub min_slack: i64,
    pub witness: Vec<usize>,
    pub exhaustive: bool,
    pub subsets_checked: u64,
}

pub fn hall_scan(pair: &BipartitePair, max_subset: usize, seed: u64) -> HallScanReport {
    assert!(max_subset <= 20, "exhaustive subset scans cap at 20");
    let ln = pair.left_vertices.len();
    let rn = pair.right_vertices.len();
    let mut best = i64::MAX;
    let mut witness = Vec::new();
    let mut checked = 0u64;
    let mut neigh = vec![false; rn];

    let consider = |subset: &[usize], neigh: &mut Vec<bool>, best: &mut i64, witness: &mut Vec<usize>| {
        neigh.iter_mut().for_each(|x| *x = false);
        let mut count = 0i64;
        for &l in subset {
            for &r in &pair.adj[l] {
                if !neigh[r] {
                    neigh[r] = true;
                    count += 1;
                }
            }
        }
        let slack = count - subset.len() as i64;
        if slack < *best {
            *best = slack;
            *witness = subset.to_vec();
        }
    };

    if ln <= max_subset {
        let exhaustive = true;
        for mask in 1u32..(1 << ln) {
            let subset: Vec<usize> = (0..ln).filter(|&l| mask >> l & 1 == 1).collect();
            consider(&subset, &mut neigh, &mut best, &mut witness);
            checked += 1;
        }
        return HallScanReport {
            min_slack: best,
            witness,
            exhaustive,
            subsets_checked: checked,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let size = rng.gen_range(1..=max_subset.min(ln));
        let mut subset: Vec<usize> = Vec::with_capacity(size);
        while subset.len() < size {
            let l = rng.gen_range(0..ln);
            if !subset.contains(&l) {
                subset.push(l);
            }
        }
        consider(&subset, &mut neigh, &mut best, &mut witness);
        checked += 1;
    }
    HallScanReport {
        min_slack: best,
        witness,
        exhaustive: false,
        subsets_checked: checked,
    }
}

/// A T-factor: n/k embeddings of the pattern tree, `copies[c][t-1]` being
/// the graph vertex playing tree vertex t in copy c.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub copies: Vec<Vec<usize>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("no matching supplied for tree edge ({i}, {j})")]
    MissingMatching { i: usize, j: usize },
    #[error("matching for tree edge ({i}, {j}) is not perfect")]
    NotPerfect { i: usize, j: usize },
}

/// Grows the factor by leaf induction: tree vertices are peeled
/// highest-index-leaf first, then reattached in reverse, each copy
/// following the matched partner across the peeled edge.
///
/// `matchings` maps each tree edge (u, v), u < v, to its MatchingResult
/// over `BipartitePair::from_parts(g, parts, u, v)`.
pub fn assemble_factor(
    g: &RegularGraph,
    tree: &Tree,
    parts: &[Vec<usize>],
    matchings: &std::collections::BTreeMap<(usize, usize), MatchingResult>,
) -> Result<Factor, AssemblyError> {
    let k = tree.k();
    for &(u, v) in tree.edges() {
        match matchings.get(&(u, v)) {
            None => return Err(AssemblyError::MissingMatching { i: u, j: v }),
            Some(MatchingResult::Violator(_)) => {
                return Err(AssemblyError::NotPerfect { i: u, j: v })
            }
            Some(MatchingResult::Perfect(_)) => {}
        }
    }

    // Peel order: repeatedly remove the highest-index leaf.
    let mut degree: Vec<usize> = (0..=k).map(|v| if v == 0 { 0 } else { tree.degree(v) }).collect();
    let mut removed = vec![false; k + 1];
    let mut peel: Vec<(usize, usize)> = Vec::with_capacity(k.saturating_sub(1)); // (leaf, anchor)
    for _ in 0..k.saturating_sub(1) {
        let leaf = (1..=k)
            .rev()
            .find(|&v| !removed[v] && degree[v] <= 1)
            .expect("a tree always has a leaf");
        let anchor = *tree
            .neighbors(leaf)
            .iter()
            .find(|&&w| !removed[w])
            .expect("non-final leaf has a live neighbor");
        removed[leaf] = true;
        degree[anchor] -= 1;
        peel.push((leaf, anchor));
    }
    let root = (1..=k).find(|&v| !removed[v]).expect("one vertex remains");

    // vertex -> local index inside its part, for matching lookups
    let mut local = vec![usize::MAX; g.n() + 1];
    for part in parts {
        for (idx, &v) in part.iter().enumerate() {
            local[v] = idx;
        }
    }

    let copies_n = parts[root - 1].len();
    let mut copies: Vec<Vec<usize>> = vec![vec![0; k]; copies_n];
    for (c, &v) in parts[root - 1].iter().enumerate() {
        copies[c][root - 1] = v;
    }
    for &(leaf, anchor) in peel.iter().rev() {
        let key = (leaf.min(anchor), leaf.max(anchor));
        let pairs = match matchings.get(&key) {
            Some(MatchingResult::Perfect(p)) => p,
            _ => unreachable!("validated above"),
        };
        for copy in copies.iter_mut() {
            let av = copy[anchor - 1];
            let gv = if anchor < leaf {
                // pairs maps anchor-part local -> leaf-part local
                parts[leaf - 1][pairs[local[av]]]
            } else {
                // pairs maps leaf-part local -> anchor-part local; invert
                let target = local[av];
                let l = pairs
                    .iter()
                    .position(|&r| r == target)
                    .expect("perfect matching covers the anchor vertex");
                parts[leaf - 1][l]
            };
            copy[leaf - 1] = gv;
        }
    }
    Ok(Factor { copies })
}

/// First violation reported by the factor verifier.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FactorViolation {
    #[error("expected {expected} copies of size {k}, found copy {copy} with {found} entries")]
    Shape {
        copy: usize,
        expected: usize,
        k: usize,
        found: usize,
    },
    #[error("copy {copy} maps tree vertex {tree_vertex} to out-of-range graph vertex {vertex}")]
    Range {
        copy: usize,
        tree_vertex: usize,
        vertex: usize,
    },
    #[error("vertex {vertex} appears in copies {first} and {second}")]
    Overlap {
        vertex: usize,
        first: usize,
        second: usize,
    },
    #[error("vertex {vertex} is not covered by any copy")]
    Coverage { vertex: usize },
    #[error("copy {copy}: tree edge ({ti}, {tj}) maps to non-edge ({gi}, {gj})")]
    EdgeBroken {
        copy: usize,
        ti: usize,
        tj: usize,
        gi: usize,
        gj: usize,
    },
}

/// Checks disjointness, full coverage, and tree-edge preservation;
/// reports the first violation found.
pub fn verify_factor(g: &RegularGraph, tree: &Tree, factor: &Factor) -> Result<(), FactorViolation> {
    let k = tree.k();
    let expected = g.n() / k;
    let mut seen: Vec<usize> = vec![usize::MAX; g.n() + 1];
    if factor.copies.len() != expected {
        return Err(FactorViolation::Shape {
            copy: factor.copies.len(),
            expected,
            k,
            found: 0,
        });
    }
    for (c, copy) in factor.copies.iter().enumerate() {
        if copy.len() != k {
            return Err(FactorViolation::Shape {
                copy: c,
                expected,
                k,
                found: copy.len(),
            });
        }
        for (t, &v) in copy.iter().enumerate() {
            if v == 0 || v > g.n() {
                return Err(FactorViolation::Range {
                    copy: c,
                    tree_vertex: t + 1,
                    vertex: v,
                });
            }
            if seen[v] != usize::MAX {
                return Err(FactorViolation::Overlap {
                    vertex: v,
                    first: seen[v],
                    second: c,
                });
            }
            seen[v] = c;
        }
        for &(ti, tj) in tree.edges() {
            let (gi, gj) = (copy[ti - 1], copy[tj - 1]);
            if !g.has_edge(gi, gj) {
                return Err(FactorViolation::EdgeBroken {
                    copy: c,
                    ti,
                    tj,
                    gi,
                    gj,
                });
            }
        }
    }
    if let Some(v) = (1..=g.n()).find(|&v| seen[v] == usize::MAX) {
        return Err(FactorViolation::Coverage { vertex: v });
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum FactorIoError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Factor file: one line per copy, entries `t->g` separated by spaces.
pub fn write_factor(path: &Path, factor: &Factor) -> Result<(), FactorIoError> {
    let mut out = String::new();
    for copy in &factor.copies {
        let line: Vec<String> = copy
            .iter()
            .enumerate()
            .map(|(t, &v)| format!("{}->{}", t + 1, v))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| FactorIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_factor(path: &Path) -> Result<Factor, FactorIoError> {
    let text = fs::read_to_string(path).map_err(|source| FactorIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let pstr = path.display().to_string();
    let mut copies = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut entries: Vec<(usize, usize)> = Vec::new();
        for tok in line.split_whitespace() {
            let (t, v) = tok.split_once("->").ok_or_else(|| FactorIoError::Parse {
                path: pstr.clone(),
                line: idx + 1,
                msg: format!("expected t->g, got {tok:?}"),
            })?;
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| FactorIoError::Parse {
                    path: pstr.clone(),
                    line: idx + 1,
                    msg: format!("bad number {s:?}"),
                })
            };
            entries.push((parse(t)?, parse(v)?));
        }
        let k = entries.len();
        let mut copy = vec![0usize; k];
        for (t, v) in entries {
            if t == 0 || t > k {
                return Err(FactorIoError::Parse {
                    path: pstr.clone(),
                    line: idx + 1,
                    msg: format!("tree label {t} out of range [1, {k}]"),
                });
            }
            copy[t - 1] = v;
        }
        copies.push(copy);
    }
    Ok(Factor { copies })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn two_disjoint_edges() {
        let pair = BipartitePair::from_adj(2, 2, vec![vec![0], vec![1]]);
        assert_eq!(perfect_matching(&pair), MatchingResult::Perfect(vec![0, 1]));
    }

    #[test]
    fn complete_3x3_is_perfect() {
        let pair = BipartitePair::from_adj(3, 3, vec![vec![0, 1, 2]; 3]);
        match perfect_matching(&pair) {
            MatchingResult::Perfect(m) => {
                let mut sorted = m.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, vec![0, 1, 2]);
            }
            other => panic!("expected perfect, got {other:?}"),
        }
    }

    #[test]
    fn shared_neighbor_violator() {
        // a1-b1, a2-b1 only: maximum matching has size 1
        let pair = BipartitePair::from_adj(2, 2, vec![vec![0], vec![0]]);
        match perfect_matching(&pair) {
            MatchingResult::Violator(w) => {
                assert_eq!(w, vec![0, 1]);
                // violator validity under recount
                let mut neigh: Vec<usize> = w.iter().flat_map(|&l| pair.adj[l].clone()).collect();
                neigh.sort_unstable();
                neigh.dedup();
                assert!(neigh.len() < w.len());
            }
            other => panic!("expected violator, got {other:?}"),
        }
    }

    #[test]
    fn hall_scan_reports() {
        let complete = BipartitePair::from_adj(3, 3, vec![vec![0, 1, 2]; 3]);
        let r = hall_scan(&complete, 10, 0);
        assert!(r.exhaustive);
        assert_eq!(r.min_slack, 3 - 3); // the full subset is tight
        assert!(r.min_slack >= 0);

        let bad = BipartitePair::from_adj(2, 2, vec![vec![0], vec![0]]);
        let r = hall_scan(&bad, 10, 0);
        assert_eq!(r.min_slack, -1);
        assert_eq!(r.witness, vec![0, 1]);
    }

    #[test]
    fn hall_scan_samples_large_matching_pair() {
        // 40 disjoint edges plus ring edges: a perfect matching exists,
        // so every sampled subset has nonnegative slack
        let n = 40;
        let adj: Vec<Vec<usize>> = (0..n).map(|l| vec![l, (l + 1) % n]).collect();
        let pair = BipartitePair::from_adj(n, n, adj);
        assert!(matches!(perfect_matching(&pair), MatchingResult::Perfect(_)));
        let r = hall_scan(&pair, 12, 5);
        assert!(!r.exhaustive);
        assert_eq!(r.subsets_checked, 1000);
        assert!(r.min_slack >= 0, "slack {} at {:?}", r.min_slack, r.witness);
    }

    fn cycle_graph(n: usize) -> RegularGraph {
        let mut adj = vec![Vec::new(); n + 1];
        for v in 1..=n {
            let w = v % n + 1;
            adj[v].push(w);
            adj[w].push(v);
        }
        RegularGraph::from_adjacency(n, 2, adj).unwrap()
    }

    #[test]
    fn assemble_edge_tree_is_the_matching() {
        let g = cycle_graph(6);
        let tree = Tree::path(2).unwrap();
        let parts = vec![vec![1, 3, 5], vec![2, 4, 6]];
        let pair = BipartitePair::from_parts(&g, &parts, 1, 2);
        let m = perfect_matching(&pair);
        let mut matchings = BTreeMap::new();
        matchings.insert((1, 2), m.clone());
        let factor = assemble_factor(&g, &tree, &parts, &matchings).unwrap();
        verify_factor(&g, &tree, &factor).unwrap();
        if let MatchingResult::Perfect(p) = m {
            for copy in &factor.copies {
                let l = parts[0].iter().position(|&v| v == copy[0]).unwrap();
                assert_eq!(parts[1][p[l]], copy[1]);
            }
        }
    }

    #[test]
    fn assemble_path3_composes_matchings() {
        let g = cycle_graph(6);
        let tree = Tree::path(3).unwrap();
        let parts = vec![vec![1, 4], vec![2, 5], vec![3, 6]];
        let mut matchings = BTreeMap::new();
        for &(i, j) in tree.edges() {
            let pair = BipartitePair::from_parts(&g, &parts, i, j);
            matchings.insert((i, j), perfect_matching(&pair));
        }
        let factor = assemble_factor(&g, &tree, &parts, &matchings).unwrap();
        verify_factor(&g, &tree, &factor).unwrap();
        // each copy is (a, m1(a), m2(m1(a))) along consecutive ring vertices
        for copy in &factor.copies {
            assert!(g.has_edge(copy[0], copy[1]));
            assert!(g.has_edge(copy[1], copy[2]));
        }
    }

    #[test]
    fn assemble_star4_on_crafted_graph() {
        // 12 vertices: three K4 blocks, each one star(4) copy
        let mut adj = vec![Vec::new(); 13];
        for b in 0..3 {
            let base = 4 * b;
            for u in 1..=4usize {
                for v in (u + 1)..=4 {
                    adj[base + u].push(base + v);
                    adj[base + v].push(base + u);
                }
            }
        }
        let g = RegularGraph::from_adjacency(12, 3, adj).unwrap();
        let tree = Tree::star(4).unwrap();
        let parts = vec![
            vec![1, 5, 9],
            vec![2, 6, 10],
            vec![3, 7, 11],
            vec![4, 8, 12],
        ];
        let mut matchings = BTreeMap::new();
        for &(i, j) in tree.edges() {
            let pair = BipartitePair::from_parts(&g, &parts, i, j);
            matchings.insert((i, j), perfect_matching(&pair));
        }
        let factor = assemble_factor(&g, &tree, &parts, &matchings).unwrap();
        verify_factor(&g, &tree, &factor).unwrap();
        assert_eq!(factor.copies.len(), 3);
    }

    #[test]
    fn assembly_errors() {
        let g = cycle_graph(6);
        let tree = Tree::path(3).unwrap();
        let parts = vec![vec![1, 4], vec![2, 5], vec![3, 6]];
        let mut matchings = BTreeMap::new();
        matchings.insert(
            (1, 2),
            perfect_matching(&BipartitePair::from_parts(&g, &parts, 1, 2)),
        );
        assert_eq!(
            assemble_factor(&g, &tree, &parts, &matchings).unwrap_err(),
            AssemblyError::MissingMatching { i: 2, j: 3 }
        );
        matchings.insert((2, 3), MatchingResult::Violator(vec![0]));
        assert_eq!(
            assemble_factor(&g, &tree, &parts, &matchings).unwrap_err(),
            AssemblyError::NotPerfect { i: 2, j: 3 }
        );
    }

    #[test]
    fn verifier_detects_mutations() {
        let g = cycle_graph(8);
        let tree = Tree::path(2).unwrap();
        let factor = Factor {
            copies: (0..4).map(|i| vec![2 * i + 1, 2 * i + 2]).collect(),
        };
        verify_factor(&g, &tree, &factor).unwrap();

        let mut overlap = factor.clone();
        overlap.copies[1][0] = 1; // vertex 1 already used by copy 0
        assert!(matches!(
            verify_factor(&g, &tree, &overlap),
            Err(FactorViolation::Overlap { vertex: 1, .. })
        ));

        let mut broken = factor.clone();
        broken.copies[0] = vec![1, 4]; // 1-4 is not an edge of the 8-cycle
        assert!(matches!(
            verify_factor(&g, &tree, &broken),
            Err(FactorViolation::EdgeBroken { .. })
        ));
    }

    #[test]
    fn factor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("factor.txt");
        let factor = Factor {
            copies: vec![vec![3, 1, 2], vec![4, 6, 5]],
        };
        write_factor(&p, &factor).unwrap();
        assert_eq!(read_factor(&p).unwrap(), factor);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "1->3 2->1 3->2\n1->4 2->6 3->5\n");
    }
}
