//! Pattern trees: construction, Prufer codes, file format, and the
//! high-degree vertex set that routes the partition pipeline.
//!
//! Tree vertices are labeled 1..=k throughout, matching the graph side.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tree needs at least {min} vertices, got {k}")]
    TooSmall { k: usize, min: usize },
    #[error("prufer entry {value} at position {pos} out of range [1, {k}]")]
    PruferRange { pos: usize, value: usize, k: usize },
    #[error("edge list is not a tree: {0}")]
    NotATree(String),
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

/// A labeled tree on vertices 1..=k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    k: usize,
    edges: Vec<(usize, usize)>,
    degree: Vec<usize>,
    adj: Vec<Vec<usize>>,
}

impl Tree {
    /// Builds a tree from an explicit edge list, validating connectivity
    /// and acyclicity (k - 1 edges + connected).
    pub fn from_edges(k: usize, edges: &[(usize, usize)]) -> Result<Self, TreeError> {
        if k < 1 {
            return Err(TreeError::TooSmall { k, min: 1 });
        }
        if edges.len() != k - 1 {
            return Err(TreeError::NotATree(format!(
                "{} edges on {} vertices, expected {}",
                edges.len(),
                k,
                k - 1
            )));
        }
        let mut adj = vec![Vec::new(); k + 1];
        for &(u, v) in edges {
            if u == 0 || v == 0 || u > k || v > k {
                return Err(TreeError::NotATree(format!(
                    "edge ({u}, {v}) out of range [1, {k}]"
                )));
            }
            if u == v {
                return Err(TreeError::NotATree(format!("self-loop at {u}")));
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        // connectivity scan; with exactly k-1 edges this also rules out cycles
        let mut seen = vec![false; k + 1];
        let mut stack = vec![1];
        seen[1] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        if count != k {
            return Err(TreeError::NotATree(format!(
                "only {count} of {k} vertices reachable from 1"
            )));
        }
        for l in adj.iter_mut() {
            l.sort_unstable();
        }
        let degree = (0..=k).map(|v| adj[v].len()).collect();
        let mut edges: Vec<(usize, usize)> =
            edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
        edges.sort_unstable();
        Ok(Tree {
            k,
            edges,
            degree,
            adj,
        })
    }

    /// Decodes a Prufer sequence into the unique tree with that code
    /// (k = len + 2).
    pub fn from_prufer(seq: &[usize]) -> Result<Self, TreeError> {
        let k = seq.len() + 2;
        for (pos, &a) in seq.iter().enumerate() {
            if a == 0 || a > k {
                return Err(TreeError::PruferRange { pos, value: a, k });
            }
        }
        let mut degree = vec![1usize; k + 1];
        degree[0] = 0;
        for &a in seq {
            degree[a] += 1;
        }
        // lowest-label leaf first
        let mut edges = Vec::with_capacity(k - 1);
        let mut ptr = 1;
        while degree[ptr] != 1 {
            ptr += 1;
        }
        let mut leaf = ptr;
        for &a in seq {
            edges.push((leaf, a));
            degree[a] -= 1;
            if degree[a] == 1 && a < ptr {
                leaf = a;
            } else {
                ptr += 1;
                while degree[ptr] != 1 {
                    ptr += 1;
                }
                leaf = ptr;
            }
        }
        let mut last = 0;
        for v in (1..=k).rev() {
            if v != leaf && degree[v] == 1 {
                last = v;
                break;
            }
        }
        edges.push((leaf, last));
        Tree::from_edges(k, &edges)
    }

    /// Prufer code of this tree (empty for k = 2); inverse of
    /// [`Tree::from_prufer`].
    pub fn to_prufer(&self) -> Vec<usize> {
        if self.k <= 2 {
            return Vec::new();
        }
        let mut degree = self.degree.clone();
        let mut removed = vec![false; self.k + 1];
        let mut seq = Vec::with_capacity(self.k - 2);
        let mut ptr = 1;
        while degree[ptr] != 1 {
            ptr += 1;
        }
        let mut leaf = ptr;
        for _ in 0..self.k - 2 {
            removed[leaf] = true;
            let parent = *self.adj[leaf]
                .iter()
                .find(|&&w| !removed[w] && degree[w] > 0)
                .expect("leaf in a tree has a live neighbor");
            seq.push(parent);
            degree[leaf] -= 1;
            degree[parent] -= 1;
            if degree[parent] == 1 && parent < ptr {
                leaf = parent;
            } else {
                ptr += 1;
                while ptr <= self.k && degree[ptr] != 1 {
                    ptr += 1;
                }
                leaf = ptr;
            }
        }
        seq
    }

    /// Star on k vertices: vertex 1 adjacent to all others.
    pub fn star(k: usize) -> Result<Self, TreeError> {
        if k < 2 {
            return Err(TreeError::TooSmall { k, min: 2 });
        }
        let edges: Vec<_> = (2..=k).map(|v| (1, v)).collect();
        Tree::from_edges(k, &edges)
    }

    /// Path 1 - 2 - ... - k.
    pub fn path(k: usize) -> Result<Self, TreeError> {
        if k < 2 {
            return Err(TreeError::TooSmall { k, min: 2 });
        }
        let edges: Vec<_> = (1..k).map(|v| (v, v + 1)).collect();
        Tree::from_edges(k, &edges)
    }

    /// Broom: a path on `handle` vertices with `bristles` extra leaves
    /// attached to its last vertex. k = handle + bristles.
    pub fn broom(handle: usize, bristles: usize) -> Result<Self, TreeError> {
        if handle < 1 || handle + bristles < 2 {
            return Err(TreeError::TooSmall {
                k: handle + bristles,
                min: 2,
            });
        }
        let k = handle + bristles;
        let mut edges: Vec<_> = (1..handle).map(|v| (v, v + 1)).collect();
        edges.extend((handle + 1..=k).map(|v| (handle, v)));
        Tree::from_edges(k, &edges)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Edges as (u, v) with u < v, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, v: usize) -> usize {
        self.degree[v]
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn max_degree(&self) -> usize {
        (1..=self.k).map(|v| self.degree[v]).max().unwrap_or(0)
    }

    /// Applies a relabeling: `perm[old] = new` (1-indexed permutation of
    /// [k]). Used by the pipeline to move the high-degree set onto
    /// {1..h}.
    pub fn relabeled(&self, perm: &[usize]) -> Tree {
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Tree::from_edges(self.k, &edges).expect("relabeling preserves tree structure")
    }
}

/// The tree vertices whose degree reaches d^(1-beta), handled by the
/// dedicated first rounds of the partition pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HighDegreeSet {
    pub h: usize,
    pub members: Vec<usize>,
    pub beta_bits: u64,
}

impl HighDegreeSet {
    pub fn beta(&self) -> f64 {
        f64::from_bits(self.beta_bits)
    }
}

/// Computes { i : d_T(i) >= d^(1-beta) }, ascending.
pub fn high_degree_set(tree: &Tree, d: usize, beta: f64) -> HighDegreeSet {
    let threshold = (d as f64).powf(1.0 - beta);
    let members: Vec<usize> = (1..=tree.k())
        .filter(|&v| tree.degree(v) as f64 >= threshold)
        .collect();
    HighDegreeSet {
        h: members.len(),
        members,
        beta_bits: beta.to_bits(),
    }
}

/// Writes the tree file: first line `k`, then one `u v` line per edge.
pub fn write_tree(path: &Path, tree: &Tree) -> Result<(), TreeError> {
    let mut out = String::new();
    out.push_str(&format!("{}\n", tree.k()));
    for &(u, v) in tree.edges() {
        out.push_str(&format!("{u} {v}\n"));
    }
    fs::write(path, out).map_err(|source| TreeError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a tree file: first line `k`, then either a single
/// `prufer: a b c ...` line or k-1 `u v` lines.
pub fn read_tree(path: &Path) -> Result<Tree, TreeError> {
    let text = fs::read_to_string(path).map_err(|source| TreeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let pstr = path.display().to_string();
    let perr = |line: usize, msg: String| TreeError::Parse {
        path: pstr.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| perr(1, "empty file".into()))?;
    let k: usize = first
        .trim()
        .parse()
        .map_err(|_| perr(1, format!("expected vertex count, got {first:?}")))?;
    let mut rest = lines.peekable();
    if let Some(&(_, line)) = rest.peek() {
        if let Some(seq_str) = line.trim().strip_prefix("prufer:") {
            let mut seq = Vec::new();
            for tok in seq_str.split_whitespace() {
                let v: usize = tok
                    .parse()
                    .map_err(|_| perr(2, format!("bad prufer entry {tok:?}")))?;
                seq.push(v);
            }
            if seq.len() + 2 != k {
                return Err(perr(2, format!("prufer length {} needs k = {}", seq.len(), seq.len() + 2)));
            }
            return Tree::from_prufer(&seq);
        }
    }
    let mut edges = Vec::new();
    for (idx, line) in rest {
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
        edges.push((u, v));
    }
    Tree::from_edges(k, &edges)
}
