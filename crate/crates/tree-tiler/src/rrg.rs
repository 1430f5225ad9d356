//! Random d-regular graphs: pairing-model generation with switch-based
//! repair, the short-cycle proximity diagnostic, and the graph file
//! format.
//!
//! Vertices are 1-indexed everywhere, in memory and on disk.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("n*d must be even, got n = {n}, d = {d}")]
    InvalidParity { n: usize, d: usize },
    #[error("degree d = {d} infeasible for n = {n} vertices")]
    InfeasibleDegree { n: usize, d: usize },
    #[error("vertex {v} out of range [1, {n}]")]
    VertexOutOfRange { v: usize, n: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid graph: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// An immutable simple d-regular graph with sorted per-vertex neighbor
/// lists. `adj[0]` is an unused slot so vertex v indexes `adj[v]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegularGraph {
    n: usize,
    d: usize,
    adj: Vec<Vec<usize>>,
}

impl RegularGraph {
    /// Validates and adopts an adjacency structure (`adj[0]` ignored,
    /// may be empty): exactly d distinct neighbors per vertex, no loops,
    /// symmetric.
    pub fn from_adjacency(n: usize, d: usize, mut adj: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        if n * d % 2 != 0 {
            return Err(GraphError::InvalidParity { n, d });
        }
        if d >= n || d == 0 || n == 0 {
            return Err(GraphError::InfeasibleDegree { n, d });
        }
        if adj.len() != n + 1 {
            return Err(GraphError::Validation(format!(
                "adjacency has {} slots, expected {}",
                adj.len(),
                n + 1
            )));
        }
        for v in 1..=n {
            adj[v].sort_unstable();
            if adj[v].len() != d {
                return Err(GraphError::Validation(format!(
                    "vertex {v} has degree {}, expected {d}",
                    adj[v].len()
                )));
            }
            if adj[v].windows(2).any(|w| w[0] == w[1]) {
                return Err(GraphError::Validation(format!("duplicate neighbor at vertex {v}")));
            }
            if adj[v].iter().any(|&w| w == v) {
                return Err(GraphError::Validation(format!("self-loop at vertex {v}")));
            }
            if adj[v].iter().any(|&w| w == 0 || w > n) {
                return Err(GraphError::Validation(format!("neighbor out of range at vertex {v}")));
            }
        }
        for v in 1..=n {
            for &w in &adj[v] {
                if adj[w].binary_search(&v).is_err() {
                    return Err(GraphError::Validation(format!(
                        "asymmetric edge: {v} lists {w} but not vice versa"
                    )));
                }
            }
        }
        Ok(RegularGraph { n, d, adj })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn edge_count(&self) -> usize {
        self.n * self.d / 2
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].binary_search(&v).is_ok()
    }

    pub fn vertices(&self) -> impl Iterator<Item = usize> {
        1..=self.n
    }

    /// Edges as (u, v) with u < v in ascending lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for u in 1..=self.n {
            for &v in &self.adj[u] {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }
}

/// |N(v) ∩ S| where S is given as a 1-indexed membership mask of length
/// n + 1.
pub fn degree_into(g: &RegularGraph, v: usize, set: &[bool]) -> Result<usize, GraphError> {
    if v == 0 || v > g.n() {
        return Err(GraphError::VertexOutOfRange { v, n: g.n() });
    }
    Ok(g.neighbors(v).iter().filter(|&&w| set[w]).count())
}

/// Generates a random d-regular graph by the pairing model: nd half-edge
/// stubs are shuffled and paired consecutively; loops and multi-edges are
/// then repaired by uniformly random degree-preserving double-edge
/// switches. Deterministic for a fixed (n, d, seed).
pub fn generate_regular(n: usize, d: usize, seed: u64) -> Result<RegularGraph, GraphError> {
    if n == 0 || d == 0 || d >= n {
        return Err(GraphError::InfeasibleDegree { n, d });
    }
    if n * d % 2 != 0 {
        return Err(GraphError::InvalidParity { n, d });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stubs: Vec<usize> = (1..=n).flat_map(|v| std::iter::repeat(v).take(d)).collect();
    let m = stubs.len() / 2;

    'attempt: loop {
        stubs.shuffle(&mut rng);
        let mut edges: Vec<(usize, usize)> = (0..m)
            .map(|i| {
                let (u, v) = (stubs[2 * i], stubs[2 * i + 1]);
                (u.min(v), u.max(v))
            })
            .collect();
        let mut counts: HashMap<(usize, usize), u32> = HashMap::with_capacity(m * 2);
        for &e in &edges {
            *counts.entry(e).or_insert(0) += 1;
        }
        let is_bad = |e: (usize, usize), counts: &HashMap<(usize, usize), u32>| {
            e.0 == e.1 || counts[&e] >= 2
        };
        let mut work: Vec<usize> = (0..m).filter(|&i| is_bad(edges[i], &counts)).collect();

        // Each switch proposal draws a uniform partner pair; a bounded
        // number of rejections per attempt guards against rare stuck
        // configurations, after which we reshuffle from scratch.
        let mut proposals_left = 400usize * m + 10_000;
        while let Some(&i) = work.last() {
            if !is_bad(edges[i], &counts) {
                work.pop();
                continue;
            }
            if proposals_left == 0 {
                continue 'attempt;
            }
            proposals_left -= 1;
            let j = rng.gen_range(0..m);
            if j == i {
                continue;
            }
            let (u, v) = edges[i];
            let (x, y) = edges[j];
            // Random orientation of the rewiring.
            let (a, b) = if rng.gen::<bool>() { (x, y) } else { (y, x) };
            let e1 = (u.min(a), u.max(a));
            let e2 = (v.min(b), v.max(b));
            if e1.0 == e1.1 || e2.0 == e2.1 || e1 == e2 {
                continue;
            }
            // Test candidate edges against the multiset with i and j removed.
            let occupied = |e: (usize, usize)| {
                let mut c = *counts.get(&e).unwrap_or(&0);
                if e == edges[i] {
                    c -= 1;
                }
                if e == edges[j] {
                    c -= 1;
                }
                c > 0
            };
            if occupied(e1) || occupied(e2) {
                continue;
            }
            for old in [edges[i], edges[j]] {
                let c = counts.get_mut(&old).unwrap();
                *c -= 1;
                if *c == 0 {
                    counts.remove(&old);
                }
            }
            *counts.entry(e1).or_insert(0) += 1;
            *counts.entry(e2).or_insert(0) += 1;
            edges[i] = e1;
            edges[j] = e2;
            if is_bad(e2, &counts) {
                work.push(j);
            }
        }

        let mut adj = vec![Vec::with_capacity(d); n + 1];
        for &(u, v) in &edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        return RegularGraph::from_adjacency(n, d, adj);
    }
}

/// A cycle as its vertex sequence (closing edge implied).
pub type Cycle = Vec<usize>;

/// Witness that two short cycles sit close together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleWitness {
    pub cycle_a: Cycle,
    pub cycle_b: Cycle,
    pub distance: usize,
}

/// Outcome of the short-cycle proximity diagnostic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleProximityReport {
    pub is_member: bool,
    pub witness: Option<CycleWitness>,
}

const CYCLE_LEN_MAX: usize = 10;
const CYCLE_DIST_MIN: usize = 10;

/// Checks whether no two distinct cycles of length <= 10 lie at distance
/// < 10 from each other (the graph class the partition analysis assumes).
///
/// When membership fails a concrete witness pair is returned; the search
/// short-circuits on the first close pair, so graphs teeming with short
/// cycles fail fast. Proving membership requires visiting every short
/// cycle, which costs up to O(n * (d-1)^(L/2)) on cycle-free
/// neighborhoods.
pub fn check_gd_membership(g: &RegularGraph) -> CycleProximityReport {
    cycle_proximity(g.n(), &g.adj)
}

/// Same diagnostic over a raw 1-indexed adjacency structure (not
/// necessarily regular); used by test harnesses on crafted graphs.
pub fn cycle_proximity(n: usize, adj: &[Vec<usize>]) -> CycleProximityReport {
    let mut owner: Vec<Option<u32>> = vec![None; n + 1];
    let mut found: Vec<Cycle> = Vec::new();
    let mut dist = vec![usize::MAX; n + 1];
    let mut dist_touched: Vec<usize> = Vec::new();
    let mut parent = vec![0usize; n + 1];
    let mut on_path = vec![false; n + 1];

    for root in 1..=n {
        // Distances from the root, capped just past the ball that can hold
        // a short cycle; a ball with no non-tree edge holds no short cycle
        // through the root.
        for &v in &dist_touched {
            dist[v] = usize::MAX;
        }
        dist_touched.clear();
        dist[root] = 0;
        dist_touched.push(root);
        parent[root] = 0;
        let mut queue = VecDeque::from([root]);
        let mut tree_like = true;
        while let Some(u) = queue.pop_front() {
            for &w in &adj[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    parent[w] = u;
                    dist_touched.push(w);
                    if dist[w] <= CYCLE_LEN_MAX / 2 {
                        queue.push_back(w);
                    }
                } else if w != parent[u]
                    && dist[u] + dist[w] + 1 <= CYCLE_LEN_MAX
                    && dist[u] <= CYCLE_LEN_MAX / 2
                    && dist[w] <= CYCLE_LEN_MAX / 2
                {
                    tree_like = false;
                }
            }
        }
        if tree_like {
            continue;
        }

        // Enumerate simple cycles whose minimum vertex is the root: DFS
        // over paths through vertices > root, pruned by the return
        // distance. Staged by exact target length so shorter cycles are
        // found (and paired) first.
        for target in 3..=CYCLE_LEN_MAX {
            let mut path = vec![root];
            on_path[root] = true;
            // stack of neighbor cursors
            let mut cursors = vec![0usize];
            while !path.is_empty() {
                let u = *path.last().unwrap();
                let cur = *cursors.last().unwrap();
                if cur >= adj[u].len() {
                    path.pop();
                    cursors.pop();
                    on_path[u] = false;
                    if let Some(c) = cursors.last_mut() {
                        *c += 1;
                    }
                    continue;
                }
                let w = adj[u][cur];
                let depth = path.len(); // edges from root to the candidate w
                if w == root && depth == target && path[1] < u {
                    // canonical closing: second vertex below last breaks
                    // the two traversal directions
                    if let Some(report) = register_cycle(&path, n, adj, &mut owner, &mut found) {
                        return report;
                    }
                    *cursors.last_mut().unwrap() += 1;
                    continue;
                }
                let ret = dist[w];
                if w <= root
                    || on_path[w]
                    || depth >= target
                    || ret == usize::MAX
                    || depth + ret > target
                {
                    *cursors.last_mut().unwrap() += 1;
                    continue;
                }
                path.push(w);
                on_path[w] = true;
                cursors.push(0);
            }
        }
    }
    CycleProximityReport {
        is_member: true,
        witness: None,
    }
}

/// Records a newly found cycle and tests its distance to every earlier
/// one via a bounded multi-source BFS over the ownership map. Returns the
/// failure report on the first close pair.
fn register_cycle(
    cycle: &[usize],
    n: usize,
    adj: &[Vec<usize>],
    owner: &mut [Option<u32>],
    found: &mut Vec<Cycle>,
) -> Option<CycleProximityReport> {
    let id = found.len() as u32;
    found.push(cycle.to_vec());

    let mut level = vec![usize::MAX; n + 1];
    let mut queue = VecDeque::new();
    for &v in cycle {
        if let Some(other) = owner[v] {
            return Some(close_pair_report(found, other, id, 0));
        }
        level[v] = 0;
        queue.push_back(v);
    }
    while let Some(u) = queue.pop_front() {
        if level[u] + 1 >= CYCLE_DIST_MIN {
            continue;
        }
        for &w in &adj[u] {
            if level[w] == usize::MAX {
                level[w] = level[u] + 1;
                if let Some(other) = owner[w] {
                    return Some(close_pair_report(found, other, id, level[w]));
                }
                queue.push_back(w);
            }
        }
    }
    for &v in cycle {
        owner[v] = Some(id);
    }
    None
}

fn close_pair_report(found: &[Cycle], a: u32, b: u32, distance: usize) -> CycleProximityReport {
    CycleProximityReport {
        is_member: false,
        witness: Some(CycleWitness {
            cycle_a: found[a as usize].clone(),
            cycle_b: found[b as usize].clone(),
            distance,
        }),
    }
}

/// Writes the graph file: first line `n d`, then one `u v` line per edge
/// with u < v, ascending lexicographic order.
pub fn write_graph(path: &Path, g: &RegularGraph) -> Result<(), GraphError> {
    let mut out = String::with_capacity(16 * g.edge_count() + 16);
    out.push_str(&format!("{} {}\n", g.n(), g.d()));
    for (u, v) in g.edges() {
        out.push_str(&format!("{u} {v}\n"));
    }
    fs::write(path, out).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses a graph file, then re-validates all regularity invariants.
pub fn read_graph(path: &Path) -> Result<RegularGraph, GraphError> {
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let pstr = path.display().to_string();
    let perr = |line: usize, msg: String| GraphError::Parse {
        path: pstr.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let mut it = header.split_whitespace();
    let (n, d) = match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => {
            let n: usize = a
                .parse()
                .map_err(|_| perr(1, format!("bad vertex count {a:?}")))?;
            let d: usize = b
                .parse()
                .map_err(|_| perr(1, format!("bad degree {b:?}")))?;
            (n, d)
        }
        _ => return Err(perr(1, format!("expected `n d`, got {header:?}"))),
    };
    let mut adj = vec![Vec::new(); n + 1];
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (u, v) = match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => {
                let u: usize = a
                    .parse()
                    .map_err(|_| perr(idx + 1, format!("bad vertex {a:?}")))?;
                let v: usize = b
                    .parse()
                    .map_err(|_| perr(idx + 1, format!("bad vertex {b:?}")))?;
                (u, v)
            }
            _ => return Err(perr(idx + 1, format!("expected `u v`, got {line:?}"))),
        };
        if u == 0 || v == 0 || u > n || v > n {
            return Err(perr(idx + 1, format!("edge ({u}, {v}) out of range [1, {n}]")));
        }
        if u >= v {
            return Err(perr(idx + 1, format!("edges must satisfy u < v, got ({u}, {v})")));
        }
        adj[u].push(v);
        adj[v].push(u);
    }
    RegularGraph::from_adjacency(n, d, adj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_vertices_single_edge() {
        for seed in [0u64, 1, 42] {
            let g = generate_regular(2, 1, seed).unwrap();
            assert_eq!(g.neighbors(1), &[2]);
            assert_eq!(g.neighbors(2), &[1]);
        }
    }

    #[test]
    fn k4_is_forced() {
        for seed in 0..5u64 {
            let g = generate_regular(4, 3, seed).unwrap();
            for v in 1..=4 {
                let expect: Vec<usize> = (1..=4).filter(|&w| w != v).collect();
                assert_eq!(g.neighbors(v), expect.as_slice(), "seed {seed}");
            }
        }
    }

    #[test]
    fn degree_histogram_full_scan() {
        let g = generate_regular(100, 6, 1).unwrap();
        for v in g.vertices() {
            assert_eq!(g.neighbors(v).len(), 6);
        }
        // symmetry is rechecked by the constructor; spot-check anyway
        for v in g.vertices() {
            for &w in g.neighbors(v) {
                assert!(g.has_edge(w, v));
            }
        }
    }

    #[test]
    fn parameter_errors() {
        assert!(matches!(
            generate_regular(5, 3, 0),
            Err(GraphError::InvalidParity { .. })
        ));
        assert!(matches!(
            generate_regular(4, 4, 0),
            Err(GraphError::InfeasibleDegree { .. })
        ));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_regular(50, 4, 7).unwrap();
        let b = generate_regular(50, 4, 7).unwrap();
        assert_eq!(a, b);
        let mut distinct = 0;
        let mut total = 0;
        for s1 in 0..10u64 {
            for s2 in (s1 + 1)..10 {
                total += 1;
                if generate_regular(50, 4, s1).unwrap() != generate_regular(50, 4, s2).unwrap() {
                    distinct += 1;
                }
            }
        }
        assert!(distinct as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn degree_into_cases() {
        let g = generate_regular(4, 3, 0).unwrap(); // K4
        let mut set = vec![false; 5];
        for v in 2..=4 {
            set[v] = true;
        }
        assert_eq!(degree_into(&g, 1, &set).unwrap(), 3);
        let empty = vec![false; 5];
        assert_eq!(degree_into(&g, 2, &empty).unwrap(), 0);
        assert!(matches!(
            degree_into(&g, 9, &empty),
            Err(GraphError::VertexOutOfRange { v: 9, .. })
        ));

        let g = generate_regular(100, 6, 1).unwrap();
        let mut half = vec![false; 101];
        for v in 1..=50 {
            half[v] = true;
        }
        let brute = g.neighbors(1).iter().filter(|&&w| w <= 50).count();
        assert_eq!(degree_into(&g, 1, &half).unwrap(), brute);
    }

    #[test]
    fn matching_graph_is_member() {
        // 1-regular graphs have no cycles at all
        let g = generate_regular(12, 1, 3).unwrap();
        let report = check_gd_membership(&g);
        assert!(report.is_member);
        assert!(report.witness.is_none());
    }

    #[test]
    fn k4_two_close_triangles() {
        let g = generate_regular(4, 3, 0).unwrap();
        let report = check_gd_membership(&g);
        assert!(!report.is_member);
        let w = report.witness.unwrap();
        assert_eq!(w.cycle_a.len(), 3);
        assert_eq!(w.cycle_b.len(), 3);
        assert!(w.distance < 10);
    }

    #[test]
    fn far_triangles_are_member() {
        // two triangles joined by a path of 12 edges
        let mut edges = vec![(1, 2), (2, 3), (1, 3), (4, 5), (5, 6), (4, 6)];
        let chain = [3, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 4];
        edges.extend(chain.windows(2).map(|w| (w[0], w[1])));
        let n = 17;
        let mut adj = vec![Vec::new(); n + 1];
        for (u, v) in edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let report = cycle_proximity(n, &adj);
        assert!(report.is_member, "witness: {:?}", report.witness);

        // shortening the path below distance 10 flips the verdict
        let mut edges = vec![(1, 2), (2, 3), (1, 3), (4, 5), (5, 6), (4, 6)];
        let chain = [3, 7, 8, 9, 10, 4];
        edges.extend(chain.windows(2).map(|w| (w[0], w[1])));
        let mut adj = vec![Vec::new(); 11];
        for (u, v) in edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let report = cycle_proximity(10, &adj);
        assert!(!report.is_member);
        assert_eq!(report.witness.unwrap().distance, 5);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k4.txt");
        let g = generate_regular(4, 3, 0).unwrap();
        write_graph(&p, &g).unwrap();
        let h = read_graph(&p).unwrap();
        assert_eq!(g, h);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "4 3\n1 2\n1 3\n1 4\n2 3\n2 4\n3 4\n");
    }

    #[test]
    fn asymmetric_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        // vertex 1 has degree 2, vertex 4 degree 0: degree validation fails
        std::fs::write(&p, "4 1\n1 2\n1 3\n").unwrap();
        assert!(matches!(read_graph(&p), Err(GraphError::Validation(_))));
        // malformed edge line reports its line number
        std::fs::write(&p, "4 1\n1 2\n3 x\n").unwrap();
        assert!(matches!(read_graph(&p), Err(GraphError::Parse { line: 3, .. })));
        // u >= v violates the canonical form
        std::fs::write(&p, "4 1\n2 1\n3 4\n").unwrap();
        assert!(matches!(read_graph(&p), Err(GraphError::Parse { line: 2, .. })));
    }

    #[test]
    fn generation_grid_passes_full_scans() {
        // the constructor re-validates degrees, simplicity and symmetry;
        // this drives it over the whole grid
        for &n in &[10usize, 50, 100] {
            for &d in &[1usize, 3, 6, 9] {
                if n * d % 2 != 0 {
                    continue;
                }
                for seed in [0u64, 1] {
                    let g = generate_regular(n, d, seed).unwrap();
                    assert_eq!(g.edge_count(), n * d / 2);
                    for v in g.vertices() {
                        assert_eq!(g.neighbors(v).len(), d, "n={n} d={d} seed={seed}");
                    }
                }
            }
        }
    }

    #[test]
    fn megabyte_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_regular(10_000, 22, 5).unwrap();
        let p1 = dir.path().join("g1.txt");
        let p2 = dir.path().join("g2.txt");
        write_graph(&p1, &g).unwrap();
        let h = read_graph(&p1).unwrap();
        write_graph(&p2, &h).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert!(b1.len() > 1_000_000, "file is {} bytes", b1.len());
        assert_eq!(b1, b2);
    }

    proptest::proptest! {
        #[test]
        fn generation_invariants_hold(n in 4usize..40, d in 1usize..8, seed in 0u64..1000) {
            let d = d.min(n - 1);
            proptest::prop_assume!(n * d % 2 == 0);
            let g = generate_regular(n, d, seed).unwrap();
            let h = generate_regular(n, d, seed).unwrap();
            proptest::prop_assert_eq!(&g, &h);
            for v in g.vertices() {
                proptest::prop_assert_eq!(g.neighbors(v).len(), d);
                for &w in g.neighbors(v) {
                    proptest::prop_assert!(w != v);
                    proptest::prop_assert!(g.has_edge(w, v));
                }
            }
        }
    }
}
