//! Random partitions and stochastic block model graphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use acd_tensor::Tensor;

use crate::error::{invalid, AcdError, Result};
use crate::graph::{canonicalize, LabeledGraph};

/// Independent generator for item `index` of a named purpose under a global
/// seed. Streams for different indices never overlap, so items can be drawn
/// in any order or in parallel and still reproduce exactly.
pub fn stream_rng(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a over the domain, mixed into the seed with splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    rng.set_stream(index);
    rng
}

/// Chinese restaurant process labels for `n` points, canonical by construction.
pub fn sample_crp<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 || alpha.is_nan() || alpha <= 0.0 {
        return Err(invalid(format!("CRP needs n >= 1 and alpha > 0, got n={n}, alpha={alpha}")));
    }
    let mut labels = Vec::with_capacity(n);
    let mut counts: Vec<usize> = Vec::new();
    for i in 0..n {
        // point i + 1 sees i seated points
        let u = rng.random::<f64>() * (i as f64 + alpha);
        let mut acc = 0.0;
        let mut choice = counts.len();
        for (k, &c) in counts.iter().enumerate() {
            acc += c as f64;
            if u < acc {
                choice = k;
                break;
            }
        }
        if choice == counts.len() {
            counts.push(0);
        }
        counts[choice] += 1;
        labels.push(choice);
    }
    Ok(labels)
}

/// Beta draw as the ratio of two Gamma draws.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let x = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
    let y = Gamma::new(b, 1.0).expect("positive shape").sample(rng);
    x / (x + y)
}

/// Samples every unordered pair independently with probability
/// `phi[c_i][c_j]`.
pub fn sample_sbm_edges<R: Rng + ?Sized>(
    labels: &[usize],
    phi: &[Vec<f64>],
    rng: &mut R,
) -> Result<LabeledGraph> {
    let k = phi.len();
    for (r, row) in phi.iter().enumerate() {
        if row.len() != k {
            return Err(invalid("connection matrix must be square"));
        }
        for (c, &p) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("connection probability phi[{r}][{c}] = {p} outside [0, 1]")));
            }
            if p != phi[c][r] {
                return Err(invalid("connection matrix must be symmetric"));
            }
        }
    }
    let labels = canonicalize(labels);
    if let Some(&m) = labels.iter().max() {
        if m >= k {
            return Err(invalid(format!("{} clusters but a {k}x{k} connection matrix", m + 1)));
        }
    }
    let n = labels.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < phi[labels[i]][labels[j]] {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for nb in &mut adj {
        nb.sort_unstable();
    }
    LabeledGraph::from_adjacency(adj).with_labels(&labels)
}

/// `n` labels in `k` groups whose sizes differ by at most one, assigned to
/// nodes in random order.
pub fn balanced_labels<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    canonicalize(&labels)
}

/// Per-node `N(0, 1)` features of width `dim`.
pub fn random_features<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Tensor {
    let data = (0..n * dim).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![n, dim], data).expect("n * dim values")
}

fn check_range(name: &str, lo: usize, hi: usize) -> Result<()> {
    if lo == 0 || lo > hi {
        return Err(invalid(format!("{name}: empty or zero range [{lo}, {hi}]")));
    }
    Ok(())
}

/// CRP labels, Beta-distributed block probabilities and removal of small
/// communities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralSbmConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub alpha: f64,
    pub within_beta: [f64; 2],
    pub between_beta: [f64; 2],
    pub min_size: usize,
}

impl Default for GeneralSbmConfig {
    fn default() -> Self {
        Self {
            n_min: 50,
            n_max: 350,
            alpha: 3.0,
            within_beta: [6.0, 4.0],
            between_beta: [1.0, 7.0],
            min_size: 5,
        }
    }
}

impl GeneralSbmConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("general-sbm n", self.n_min, self.n_max)?;
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        for &p in self.within_beta.iter().chain(&self.between_beta) {
            if p.is_nan() || p <= 0.0 {
                return Err(invalid(format!("Beta parameters must be positive, got {p}")));
            }
        }
        Ok(())
    }
}

const MAX_RETRIES: usize = 100;

/// Drops every community smaller than `min_size` and renumbers the rest.
pub fn remove_small_communities(g: &LabeledGraph, min_size: usize) -> LabeledGraph {
    let labels = g.labels().expect("labelled graph");
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0; k];
    for &c in labels {
        sizes[c] += 1;
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| sizes[labels[i]] >= min_size).collect();
    g.induced_subgraph(&keep)
}

pub fn gen_general_sbm<R: Rng + ?Sized>(cfg: &GeneralSbmConfig, rng: &mut R) -> Result<LabeledGraph> {
    cfg.validate()?;
    for _ in 0..MAX_RETRIES {
        let n = rng.random_range(cfg.n_min..=cfg.n_max);
        let labels = sample_crp(n, cfg.alpha, rng)?;
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut phi = vec![vec![0.0; k]; k];
        for a in 0..k {
            phi[a][a] = sample_beta(cfg.within_beta[0], cfg.within_beta[1], rng);
            for b in a + 1..k {
                let q = sample_beta(cfg.between_beta[0], cfg.between_beta[1], rng);
                phi[a][b] = q;
                phi[b][a] = q;
            }
        }
        let g = sample_sbm_edges(&labels, &phi, rng)?;
        let g = remove_small_communities(&g, cfg.min_size);
        if g.n_nodes() > 0 {
            return Ok(g);
        }
    }
    Err(AcdError::Numerical(format!(
        "every community fell below {} nodes in {MAX_RETRIES} draws",
        cfg.min_size
    )))
}

/// Equal-size communities with log-degree connection probabilities
/// `p = a ln N / N` within and `q = b ln N / N` between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetricSbmConfig {
    pub n: usize,
    pub k: usize,
    pub a: f64,
    pub b: f64,
}

impl SymmetricSbmConfig {
    pub fn probabilities(&self) -> (f64, f64) {
        let n = self.n as f64;
        let scale = n.ln() / n;
        (self.a * scale, self.b * scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.n % self.k != 0 {
            return Err(invalid(format!("K = {} must divide N = {}", self.k, self.n)));
        }
        if self.a < 0.0 || self.b < 0.0 {
            return Err(invalid("a and b must be nonnegative"));
        }
        let (p, q) = self.probabilities();
        if p > 1.0 {
            return Err(invalid(format!("within probability p = {p} exceeds 1")));
        }
        if q > 1.0 {
            return Err(invalid(format!("between probability q = {q} exceeds 1")));
        }
        Ok(())
    }

    /// Whether `|√a − √b| > √K`, the exact recovery condition.
    pub fn exactly_recoverable(&self) -> bool {
        (self.a.sqrt() - self.b.sqrt()).abs() > (self.k as f64).sqrt()
    }
}

pub fn gen_symmetric_log_sbm<R: Rng + ?Sized>(cfg: &SymmetricSbmConfig, rng: &mut R) -> Result<LabeledGraph> {
    cfg.validate()?;
    let (p, q) = cfg.probabilities();
    planted_partition(cfg.n, cfg.k, p, q, rng)
}

/// Balanced communities with constant within/between probabilities.
pub fn planted_partition<R: Rng + ?Sized>(n: usize, k: usize, p: f64, q: f64, rng: &mut R) -> Result<LabeledGraph> {
    if k == 0 || k > n {
        return Err(invalid(format!("cannot split {n} nodes into {k} communities")));
    }
    let labels = balanced_labels(n, k, rng);
    let phi: Vec<Vec<f64>> = (0..k)
        .map(|a| (0..k).map(|b| if a == b { p } else { q }).collect())
        .collect();
    sample_sbm_edges(&labels, &phi, rng)
}

/// Planted partitions with `N` uniform in a range and `K` drawn from a list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub k_choices: Vec<usize>,
    pub p: f64,
    pub q: f64,
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("planted n", self.n_min, self.n_max)?;
        if self.k_choices.is_empty() || self.k_choices.iter().any(|&k| k == 0 || k > self.n_min) {
            return Err(invalid("k_choices must be nonempty and within 1..=n_min"));
        }
        for p in [self.p, self.q] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LabeledGraph> {
        self.validate()?;
        let n = rng.random_range(self.n_min..=self.n_max);
        let k = self.k_choices[rng.random_range(0..self.k_choices.len())];
        planted_partition(n, k, self.p, self.q, rng)
    }
}

/// Log-degree symmetric SBMs with `N` and `(a, b)` drawn uniformly. When
/// `min_gap` is positive only pairs with `(√a − √b) / √K ≥ min_gap` are
/// kept, which restricts draws to the recoverable side of the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogSbmFamilyConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub k: usize,
    pub a_range: [f64; 2],
    pub b_range: [f64; 2],
    #[serde(default)]
    pub min_gap: f64,
}

impl LogSbmFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("log-sbm n", self.n_min, self.n_max)?;
        if self.k == 0 || self.n_max / self.k < self.n_min.div_ceil(self.k) {
            return Err(invalid(format!("no multiple of K = {} in the N range", self.k)));
        }
        let hi_a = self.a_range[1].sqrt();
        let lo_b = self.b_range[0].max(0.0).sqrt();
        if self.a_range[0] > self.a_range[1] || self.b_range[0] > self.b_range[1] || self.b_range[0] < 0.0 {
            return Err(invalid("a_range and b_range must be ordered and nonnegative"));
        }
        if self.min_gap > 0.0 && (hi_a - lo_b) / (self.k as f64).sqrt() < self.min_gap {
            return Err(invalid("min_gap excludes every (a, b) pair in range"));
        }
        let n = self.n_min as f64;
        if self.a_range[1] * n.ln() / n > 1.0 {
            return Err(invalid("a_range yields p > 1 at n_min"));
        }
        Ok(())
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LabeledGraph> {
        self.validate()?;
        let lo = self.n_min.div_ceil(self.k);
        let hi = self.n_max / self.k;
        let n = self.k * rng.random_range(lo..=hi);
        let sk = (self.k as f64).sqrt();
        for _ in 0..10_000 {
            let a = rng.random_range(self.a_range[0]..=self.a_range[1]);
            let b = rng.random_range(self.b_range[0]..=self.b_range[1]);
            if self.min_gap > 0.0 && (a.sqrt() - b.sqrt()) / sk < self.min_gap {
                continue;
            }
            return gen_symmetric_log_sbm(&SymmetricSbmConfig { n, k: self.k, a, b }, rng);
        }
        Err(AcdError::Numerical("could not draw (a, b) satisfying min_gap".into()))
    }
}

/// The synthetic families a dataset can be drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum GraphFamily {
    GeneralSbm(GeneralSbmConfig),
    SymSbm(SymmetricSbmConfig),
    LogSbm(LogSbmFamilyConfig),
    Planted(PlantedConfig),
}

impl GraphFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            GraphFamily::GeneralSbm(c) => c.validate(),
            GraphFamily::SymSbm(c) => c.validate(),
            GraphFamily::LogSbm(c) => c.validate(),
            GraphFamily::Planted(c) => c.validate(),
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LabeledGraph> {
        match self {
            GraphFamily::GeneralSbm(c) => gen_general_sbm(c, rng),
            GraphFamily::SymSbm(c) => gen_symmetric_log_sbm(c, rng),
            GraphFamily::LogSbm(c) => c.generate(rng),
            GraphFamily::Planted(c) => c.generate(rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::is_canonical;

    #[test]
    fn crp_trivial_cases() {
        let mut rng = stream_rng(1, "t", 0);
        assert_eq!(sample_crp(1, 0.5, &mut rng).unwrap(), vec![0]);
        assert_eq!(sample_crp(10, 1e-300, &mut rng).unwrap(), vec![0; 10]);
        assert!(sample_crp(0, 1.0, &mut rng).is_err());
        assert!(sample_crp(3, 0.0, &mut rng).is_err());
        for _ in 0..100 {
            assert!(is_canonical(&sample_crp(20, 2.0, &mut rng).unwrap()));
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(9, "x", 3).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| stream_rng(9, "x", 3).random()).collect();
        assert_eq!(a, b);
        let c: u64 = stream_rng(9, "x", 4).random();
        let d: u64 = stream_rng(9, "y", 3).random();
        assert_ne!(a[0], c);
        assert_ne!(a[0], d);
    }

    #[test]
    fn sbm_extremes() {
        let mut rng = stream_rng(2, "t", 0);
        let g = sample_sbm_edges(&[0, 0, 1, 1, 2], &vec![vec![1.0; 3]; 3], &mut rng).unwrap();
        assert_eq!(g.n_edges(), 10);
        let block = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let g = sample_sbm_edges(&[0, 0, 1, 1], &block, &mut rng).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (2, 3)]);
        let bad = vec![vec![1.2]];
        let err = sample_sbm_edges(&[0, 0], &bad, &mut rng).unwrap_err();
        assert!(err.to_string().contains("1.2"));
    }

    #[test]
    fn symmetric_sbm_validation_reports_probability() {
        let cfg = SymmetricSbmConfig { n: 10, k: 2, a: 30.0, b: 1.0 };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("p = 6.9"), "{err}");
        assert!(SymmetricSbmConfig { n: 9, k: 2, a: 1.0, b: 1.0 }.validate().is_err());
        let ok = SymmetricSbmConfig { n: 300, k: 2, a: 15.0, b: 5.0 };
        assert!(ok.exactly_recoverable());
        assert!(!SymmetricSbmConfig { n: 300, k: 2, a: 5.0, b: 2.0 }.exactly_recoverable());
    }

    #[test]
    fn beta_mean_matches() {
        let mut rng = stream_rng(3, "t", 0);
        let n = 20_000;
        let m: f64 = (0..n).map(|_| sample_beta(6.0, 4.0, &mut rng)).sum::<f64>() / n as f64;
        // sd of the mean is about 0.15 / sqrt(n) ≈ 0.001
        assert!((m - 0.6).abs() < 0.005, "{m}");
    }
}
