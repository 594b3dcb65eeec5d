//! Undirected labelled graphs and the two equivalent partition encodings:
//! per-node labels and clusters as sets of node indices.
//!
//! Labels are zero-based internally. Label `0` is the cluster of node 0, the
//! next new label encountered in node order is `1`, and so on. Files written
//! by [`crate::dataset`] use the one-based convention.

use acd_tensor::Tensor;

use crate::error::{invalid, Result};

/// Rewrites `labels` so first occurrences appear as 0, 1, 2, ... in node order.
pub fn canonicalize(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

pub fn is_canonical(labels: &[usize]) -> bool {
    let mut next = 0;
    for &c in labels {
        if c > next {
            return false;
        }
        if c == next {
            next += 1;
        }
    }
    true
}

pub fn num_clusters(labels: &[usize]) -> usize {
    canonicalize(labels).into_iter().max().map_or(0, |m| m + 1)
}

/// A partition of `0..n` into disjoint nonempty sets, each sorted, the sets
/// ordered by their minimum element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterSets {
    sets: Vec<Vec<usize>>,
}

impl ClusterSets {
    /// Validates and canonically orders `sets`.
    pub fn new(mut sets: Vec<Vec<usize>>) -> Result<Self> {
        let n: usize = sets.iter().map(Vec::len).sum();
        let mut seen = vec![false; n];
        for s in &mut sets {
            if s.is_empty() {
                return Err(invalid("cluster sets must be nonempty"));
            }
            s.sort_unstable();
            for &i in s.iter() {
                if i >= n || seen[i] {
                    return Err(invalid(format!(
                        "node {i} is repeated or outside 0..{n}"
                    )));
                }
                seen[i] = true;
            }
        }
        sets.sort_by_key(|s| s[0]);
        Ok(Self { sets })
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// Groups node indices by label. Non-canonical labels are canonicalized.
pub fn labels_to_sets(labels: &[usize]) -> ClusterSets {
    let canon = canonicalize(labels);
    let k = canon.iter().max().map_or(0, |m| m + 1);
    let mut sets = vec![Vec::new(); k];
    for (i, &c) in canon.iter().enumerate() {
        sets[c].push(i);
    }
    ClusterSets { sets }
}

pub fn sets_to_labels(sets: &ClusterSets) -> Vec<usize> {
    let mut labels = vec![0; sets.n_nodes()];
    for (k, s) in sets.sets.iter().enumerate() {
        for &i in s {
            labels[i] = k;
        }
    }
    labels
}

/// Simple undirected graph stored as sorted adjacency lists.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGraph {
    adj: Vec<Vec<usize>>,
    labels: Option<Vec<usize>>,
    features: Option<Tensor>,
}

impl LabeledGraph {
    /// Builds a graph from undirected edges. Duplicates collapse; self loops
    /// and out-of-range endpoints are errors.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) outside 0..{n}")));
            }
            if i == j {
                return Err(invalid(format!("self loop at node {i}")));
            }
            adj[i].push(j);
            adj[j].push(i);
        }
        for nb in &mut adj {
            nb.sort_unstable();
            nb.dedup();
        }
        Ok(Self {
            adj,
            labels: None,
            features: None,
        })
    }

    pub(crate) fn from_adjacency(adj: Vec<Vec<usize>>) -> Self {
        Self {
            adj,
            labels: None,
            features: None,
        }
    }

    pub fn empty(n: usize) -> Self {
        Self::from_adjacency(vec![Vec::new(); n])
    }

    /// Attaches labels, canonicalizing them.
    pub fn with_labels(mut self, labels: &[usize]) -> Result<Self> {
        if labels.len() != self.n_nodes() {
            return Err(invalid(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.n_nodes()
            )));
        }
        self.labels = Some(canonicalize(labels));
        Ok(self)
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.rows() != self.n_nodes() {
            return Err(invalid(format!(
                "features of shape {:?} for {} nodes",
                features.shape(),
                self.n_nodes()
            )));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].binary_search(&j).is_ok()
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_edges());
        for (i, nb) in self.adj.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn dense_adjacency(&self) -> Vec<Vec<u8>> {
        let n = self.n_nodes();
        let mut a = vec![vec![0u8; n]; n];
        for (i, nb) in self.adj.iter().enumerate() {
            for &j in nb {
                a[i][j] = 1;
            }
        }
        a
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn features(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    pub fn num_clusters(&self) -> Option<usize> {
        self.labels.as_deref().map(num_clusters)
    }

    pub fn cluster_sets(&self) -> Option<ClusterSets> {
        self.labels.as_deref().map(labels_to_sets)
    }

    /// Subgraph induced by `nodes`, renumbered in the given order. Labels are
    /// recanonicalized and feature rows carried along.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Self {
        let mut pos = vec![usize::MAX; self.n_nodes()];
        for (new, &old) in nodes.iter().enumerate() {
            pos[old] = new;
        }
        let adj = nodes
            .iter()
            .map(|&old| {
                let mut nb: Vec<usize> = self.adj[old]
                    .iter()
                    .filter(|&&j| pos[j] != usize::MAX)
                    .map(|&j| pos[j])
                    .collect();
                nb.sort_unstable();
                nb
            })
            .collect();
        let labels = self.labels.as_ref().map(|l| {
            let sub: Vec<usize> = nodes.iter().map(|&i| l[i]).collect();
            canonicalize(&sub)
        });
        let features = self.features.as_ref().map(|f| {
            let w = f.cols();
            let data = nodes.iter().flat_map(|&i| f.row(i).iter().copied()).collect();
            Tensor::new(vec![nodes.len(), w], data).expect("row gather keeps shape")
        });
        Self {
            adj,
            labels,
            features,
        }
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut order = vec![0; perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            order[new] = old;
        }
        self.induced_subgraph(&order)
    }

    /// Whether every node can reach every other.
    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in &self.adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == n
    }

    /// Connected component index per node, numbered in order of first node.
    pub fn components(&self) -> Vec<usize> {
        let n = self.n_nodes();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            let mut stack = vec![s];
            while let Some(i) = stack.pop() {
                for &j in &self.adj[i] {
                    if comp[j] == usize::MAX {
                        comp[j] = next;
                        stack.push(j);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    /// Checks symmetry, absence of self loops and label canonicity.
    pub fn validate(&self) -> Result<()> {
        for (i, nb) in self.adj.iter().enumerate() {
            for w in nb.windows(2) {
                if w[0] >= w[1] {
                    return Err(invalid(format!("adjacency of node {i} not strictly sorted")));
                }
            }
            for &j in nb {
                if j == i {
                    return Err(invalid(format!("self loop at node {i}")));
                }
                if j >= self.n_nodes() || !self.has_edge(j, i) {
                    return Err(invalid(format!("edge ({i}, {j}) is not symmetric")));
                }
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.n_nodes() || !is_canonical(l) {
                return Err(invalid("labels are not canonical"));
            }
        }
        Ok(())
    }
}
