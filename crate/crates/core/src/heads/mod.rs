//! Amortized clustering heads over node embeddings.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{canonicalize, ClusterSets};

pub mod ccp;
pub mod dac;
pub mod ncp;
mod rounds;

pub use rounds::{AttnRoundEncoder, Round};

/// One full assignment drawn from a head, with its model score.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    /// Canonical labels over the original node order.
    pub labels: Vec<usize>,
    /// Log-probability (NCP) or surrogate log-probability (CCP, DAC).
    pub score: f64,
    /// Network evaluation steps: one per point for NCP, one per cluster for
    /// the clusterwise heads.
    pub calls: usize,
    /// Log-probability of each sequential decision.
    pub step_log_probs: Vec<f64>,
}

impl PosteriorSample {
    pub fn num_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Partial partition during clusterwise generation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub assigned: Vec<Vec<usize>>,
    pub anchor: usize,
    pub available: Vec<usize>,
}

impl ClusterState {
    /// Checks that assigned sets, anchor and available points partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        let all = self
            .assigned
            .iter()
            .flatten()
            .chain(std::iter::once(&self.anchor))
            .chain(&self.available);
        for &i in all {
            if i >= n || seen[i] {
                return Err(invalid(format!("node {i} appears twice or is outside 0..{n}")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("cluster state does not cover every node"));
        }
        Ok(())
    }
}

pub(crate) fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Labels from clusters listed in generation order.
pub(crate) fn labels_from_clusters(n: usize, clusters: &[Vec<usize>]) -> Vec<usize> {
    let mut labels = vec![0; n];
    for (k, c) in clusters.iter().enumerate() {
        for &i in c {
            labels[i] = k;
        }
    }
    canonicalize(&labels)
}

/// Rounds visiting `sets` in the order given by `order`, with one anchor per
/// visited set.
pub fn rounds_for(sets: &ClusterSets, order: &[usize], anchors: &[usize]) -> Vec<Round> {
    let n = sets.n_nodes();
    let mut remaining = vec![true; n];
    let mut rounds = Vec::with_capacity(order.len());
    for (&k, &anchor) in order.iter().zip(anchors) {
        let set = &sets.sets()[k];
        remaining[anchor] = false;
        let available: Vec<usize> = (0..n).filter(|&i| remaining[i]).collect();
        let bits = available.iter().map(|i| set.binary_search(i).is_ok()).collect();
        for &i in set {
            remaining[i] = false;
        }
        rounds.push(Round {
            anchor,
            available,
            bits,
        });
    }
    rounds
}

/// Uniform cluster order and a uniform anchor in each cluster.
pub fn random_rounds<R: Rng + ?Sized>(sets: &ClusterSets, rng: &mut R) -> Vec<Round> {
    let order = shuffled(sets.len(), rng);
    let anchors: Vec<usize> = order
        .iter()
        .map(|&k| {
            let s = &sets.sets()[k];
            s[rng.random_range(0..s.len())]
        })
        .collect();
    rounds_for(sets, &order, &anchors)
}

/// Canonical cluster order with each cluster's smallest node as anchor.
pub fn canonical_rounds(sets: &ClusterSets) -> Vec<Round> {
    let order: Vec<usize> = (0..sets.len()).collect();
    let anchors: Vec<usize> = sets.sets().iter().map(|s| s[0]).collect();
    rounds_for(sets, &order, &anchors)
}

/// Sum over rounds of `log p(d_k) = −log |I_k|`.
pub(crate) fn anchor_log_prior(rounds: &[Round]) -> f64 {
    rounds.iter().map(|r| -((r.available.len() + 1) as f64).ln()).sum()
}

/// `log σ(l)` and `log(1 − σ(l))` without overflow.
pub(crate) fn log_sigmoid(l: f64) -> f64 {
    -softplus(-l)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::labels_to_sets;

    #[test]
    fn rounds_partition_the_nodes() {
        let sets = labels_to_sets(&[0, 1, 0, 2, 1, 0]);
        let rounds = rounds_for(&sets, &[2, 0, 1], &[3, 2, 1]);
        assert_eq!(rounds[0].anchor, 3);
        assert_eq!(rounds[0].available, vec![0, 1, 2, 4, 5]);
        assert!(rounds[0].bits.iter().all(|b| !b));
        assert_eq!(rounds[1].available, vec![0, 1, 4, 5]);
        assert_eq!(rounds[1].bits, vec![true, false, false, true]);
        assert_eq!(rounds[2].available, vec![4]);
        assert_eq!(rounds[2].bits, vec![true]);
        let lp = anchor_log_prior(&rounds);
        assert!((lp + (6f64.ln() + 5f64.ln() + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn state_validation() {
        let s = ClusterState {
            assigned: vec![vec![0, 2]],
            anchor: 1,
            available: vec![3],
        };
        assert!(s.validate(4).is_ok());
        assert!(s.validate(5).is_err());
        let dup = ClusterState {
            available: vec![2, 3],
            ..s
        };
        assert!(dup.validate(4).is_err());
    }
}
