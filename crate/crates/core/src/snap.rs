//! Community-labelled subgraphs cut out of a large real network.
//!
//! Inputs are an undirected edge list (two integer ids per line) and a
//! community file (the member ids of one community per line). Lines starting
//! with `#` are comments.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AcdError, Result};
use crate::graph::LabeledGraph;

/// Size and balance limits applied to every pair of communities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnapConstraints {
    /// Exclusive lower bound on the size of a pair's union.
    pub min_union: usize,
    /// Exclusive upper bound on the size of a pair's union.
    pub max_union: usize,
    /// Each community must be smaller than `max_ratio` times the other.
    pub max_ratio: f64,
}

impl Default for SnapConstraints {
    fn default() -> Self {
        Self {
            min_union: 20,
            max_union: 500,
            max_ratio: 20.0,
        }
    }
}

/// How communities are grouped into one graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TupleMode {
    /// Exactly `k` communities whose union induces a connected graph.
    Fixed { k: usize },
    /// Cliques of the compatibility graph with sizes in `min..=max`.
    Cliques { min: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Fractions of communities assigned to train, validation and test.
    pub fractions: [f64; 3],
    /// Maximum number of graphs kept per split.
    pub max_graphs: [usize; 3],
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || total > 1.0 + 1e-9 {
            return Err(invalid(format!("split fractions {:?} must lie in [0, 1] and sum to at most 1", self.fractions)));
        }
        Ok(())
    }
}

fn parse_ids(line: &str, path: &Path, lineno: usize) -> Result<Vec<u64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<u64>().map_err(|e| {
                AcdError::Parse(format!("{}:{}: `{t}`: {e}", path.display(), lineno + 1))
            })
        })
        .collect()
}

fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push((i, t.to_string()));
        }
    }
    Ok(out)
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(u64, u64)>> {
    let mut edges = Vec::new();
    for (i, line) in data_lines(path)? {
        let ids = parse_ids(&line, path, i)?;
        if ids.len() != 2 {
            return Err(AcdError::Parse(format!("{}:{}: expected two ids", path.display(), i + 1)));
        }
        edges.push((ids[0], ids[1]));
    }
    Ok(edges)
}

/// Communities with members sorted and deduplicated.
pub fn read_communities(path: &Path) -> Result<Vec<Vec<u64>>> {
    let mut out = Vec::new();
    for (i, line) in data_lines(path)? {
        let mut ids = parse_ids(&line, path, i)?;
        ids.sort_unstable();
        ids.dedup();
        out.push(ids);
    }
    Ok(out)
}

fn disjoint(a: &[u64], b: &[u64]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return false,
        }
    }
    true
}

/// Whether two communities may appear in the same graph.
pub fn pair_compatible(a: &[u64], b: &[u64], c: &SnapConstraints) -> bool {
    if !disjoint(a, b) {
        return false;
    }
    let union = a.len() + b.len();
    let (la, lb) = (a.len() as f64, b.len() as f64);
    union > c.min_union && union < c.max_union && la < c.max_ratio * lb && lb < c.max_ratio * la
}

/// Adjacency lists over community indices, linking compatible pairs.
pub fn compatibility_graph(communities: &[Vec<u64>], c: &SnapConstraints) -> Vec<Vec<usize>> {
    let n = communities.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if pair_compatible(&communities[i], &communities[j], c) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

/// All cliques with between `min` and `max` vertices, each listed once in
/// increasing vertex order, stopping after `limit` cliques.
pub fn enumerate_cliques(adj: &[Vec<usize>], min: usize, max: usize, limit: usize) -> Vec<Vec<usize>> {
    fn extend(
        adj: &[Vec<usize>],
        current: &mut Vec<usize>,
        candidates: &[usize],
        min: usize,
        max: usize,
        limit: usize,
        out: &mut Vec<Vec<usize>>,
    ) {
        if current.len() >= min {
            out.push(current.clone());
        }
        if current.len() == max {
            return;
        }
        for (idx, &v) in candidates.iter().enumerate() {
            if out.len() >= limit {
                return;
            }
            let next: Vec<usize> = candidates[idx + 1..]
                .iter()
                .copied()
                .filter(|w| adj[v].binary_search(w).is_ok())
                .collect();
            current.push(v);
            extend(adj, current, &next, min, max, limit, out);
            current.pop();
        }
    }
    let mut sorted: Vec<Vec<usize>> = adj.to_vec();
    for nb in &mut sorted {
        nb.sort_unstable();
    }
    let mut out = Vec::new();
    let all: Vec<usize> = (0..adj.len()).collect();
    extend(&sorted, &mut Vec::new(), &all, min.max(1), max, limit, &mut out);
    out.truncate(limit);
    out
}

/// The real network as adjacency lists keyed by original node id.
pub struct Network {
    adj: HashMap<u64, Vec<u64>>,
}

impl Network {
    pub fn from_edges(edges: &[(u64, u64)]) -> Self {
        let mut adj: HashMap<u64, Vec<u64>> = HashMap::new();
        for &(a, b) in edges {
            if a == b {
                continue;
            }
            adj.entry(a).or_default().push(b);
            adj.entry(b).or_default().push(a);
        }
        for nb in adj.values_mut() {
            nb.sort_unstable();
            nb.dedup();
        }
        Self { adj }
    }

    /// Subgraph induced by the union of `members`, labelled by community.
    /// Nodes are ordered by community, then by id.
    pub fn community_subgraph(&self, members: &[&[u64]]) -> LabeledGraph {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (k, m) in members.iter().enumerate() {
            ids.extend_from_slice(m);
            labels.extend(std::iter::repeat_n(k, m.len()));
        }
        let pos: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let adj = ids
            .iter()
            .map(|id| {
                let mut nb: Vec<usize> = self
                    .adj
                    .get(id)
                    .map(|v| v.iter().filter_map(|j| pos.get(j).copied()).collect())
                    .unwrap_or_default();
                nb.sort_unstable();
                nb
            })
            .collect();
        LabeledGraph::from_adjacency(adj)
            .with_labels(&labels)
            .expect("one label per node")
    }
}

/// Graphs for the three splits.
#[derive(Clone, Debug, Default)]
pub struct SnapSplits {
    pub train: Vec<LabeledGraph>,
    pub val: Vec<LabeledGraph>,
    pub test: Vec<LabeledGraph>,
}

/// Upper bound on cliques enumerated per split before sampling.
pub const CLIQUE_ENUMERATION_LIMIT: usize = 2_000_000;

/// Splits communities, groups compatible ones into tuples and cuts out the
/// induced subgraphs.
pub fn extract_snap_subgraphs<R: Rng + ?Sized>(
    edge_file: &Path,
    community_file: &Path,
    split: &SplitSpec,
    constraints: &SnapConstraints,
    mode: &TupleMode,
    rng: &mut R,
) -> Result<SnapSplits> {
    split.validate()?;
    let (lo, hi) = match *mode {
        TupleMode::Fixed { k } => (k, k),
        TupleMode::Cliques { min, max } => (min, max),
    };
    if lo < 1 || lo > hi {
        return Err(invalid(format!("tuple sizes {lo}..={hi} are empty")));
    }
    let network = Network::from_edges(&read_edge_list(edge_file)?);
    let mut communities = read_communities(community_file)?;
    communities.shuffle(rng);
    let n = communities.len();
    let take = |f: f64, left: usize| ((f * n as f64).round() as usize).min(left);
    let n_train = take(split.fractions[0], n);
    let n_val = take(split.fractions[1], n - n_train);
    let n_test = take(split.fractions[2], n - n_train - n_val);
    let bounds = [
        (0, n_train),
        (n_train, n_train + n_val),
        (n_train + n_val, n_train + n_val + n_test),
    ];

    let mut out: [Vec<LabeledGraph>; 3] = Default::default();
    for (s, &(a, b)) in bounds.iter().enumerate() {
        let pool = &communities[a..b];
        let compat = compatibility_graph(pool, constraints);
        let mut cliques = enumerate_cliques(&compat, lo, hi, CLIQUE_ENUMERATION_LIMIT);
        cliques.shuffle(rng);
        for clique in cliques {
            if out[s].len() >= split.max_graphs[s] {
                break;
            }
            let members: Vec<&[u64]> = clique.iter().map(|&i| pool[i].as_slice()).collect();
            let g = network.community_subgraph(&members);
            if matches!(mode, TupleMode::Fixed { .. }) && !g.is_connected() {
                continue;
            }
            out[s].push(g);
        }
    }
    let [train, val, test] = out;
    Ok(SnapSplits { train, val, test })
}
