//! Partition agreement (AMI, ARI), calibration of the inferred number of
//! clusters, and MAP selection.

use statrs::function::factorial::ln_factorial;

use crate::error::{invalid, Result};
use crate::graph::canonicalize;
use crate::heads::PosteriorSample;

/// Counts `n_rc` between two labelings with their margins.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(invalid(format!("labelings of length {} and {}", a.len(), b.len())));
        }
        let a = canonicalize(a);
        let b = canonicalize(b);
        let r = a.iter().max().map_or(0, |m| m + 1);
        let c = b.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; c]; r];
        for (&i, &j) in a.iter().zip(&b) {
            counts[i][j] += 1;
        }
        let row_sums = counts.iter().map(|row| row.iter().sum()).collect();
        let col_sums = (0..c).map(|j| counts.iter().map(|row| row[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n: a.len() as u64,
        })
    }
}

fn entropy(margins: &[u64], n: u64) -> f64 {
    let n = n as f64;
    margins
        .iter()
        .filter(|&&m| m > 0)
        .map(|&m| {
            let p = m as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_info(t: &ContingencyTable) -> f64 {
    let n = t.n as f64;
    let mut mi = 0.0;
    for (r, row) in t.counts.iter().enumerate() {
        for (c, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (t.row_sums[r] as f64 * t.col_sums[c] as f64)).ln();
            }
        }
    }
    mi
}

/// Expected mutual information under the hypergeometric model of random
/// labelings with fixed margins.
pub fn expected_mutual_info(t: &ContingencyTable) -> f64 {
    let n = t.n;
    let nf = n as f64;
    let lf_n = ln_factorial(n);
    let mut emi = 0.0;
    for &a in &t.row_sums {
        for &b in &t.col_sums {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = ln_factorial(a) + ln_factorial(b) + ln_factorial(n - a) + ln_factorial(n - b) - lf_n;
            for nij in lo..=hi {
                let x = nij as f64;
                let log_p = fixed
                    - ln_factorial(nij)
                    - ln_factorial(a - nij)
                    - ln_factorial(b - nij)
                    - ln_factorial(n + nij - a - b);
                emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_p.exp();
            }
        }
    }
    emi
}

fn identical(t: &ContingencyTable) -> bool {
    t.counts.len() == t.col_sums.len() && t.counts.iter().all(|row| row.iter().filter(|&&v| v > 0).count() == 1)
}

/// Adjusted mutual information with arithmetic-mean normalisation, not
/// clipped. When the normaliser vanishes (for instance both labelings are a
/// single class) the value is 1 for identical partitions and 0 otherwise.
pub fn ami_raw(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(a, b)?;
    if t.n == 0 {
        return Ok(1.0);
    }
    let mi = mutual_info(&t);
    let emi = expected_mutual_info(&t);
    let mean_h = 0.5 * (entropy(&t.row_sums, t.n) + entropy(&t.col_sums, t.n));
    let denom = mean_h - emi;
    if denom.abs() < 1e-12 {
        return Ok(if identical(&t) { 1.0 } else { 0.0 });
    }
    Ok((mi - emi) / denom)
}

/// AMI clipped to `[0, 1]`.
pub fn ami(a: &[usize], b: &[usize]) -> Result<f64> {
    Ok(ami_raw(a, b)?.clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. A vanishing denominator gives 1 for identical
/// partitions and 0 otherwise.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(a, b)?;
    let index: f64 = t.counts.iter().flatten().map(|&v| comb2(v)).sum();
    let sa: f64 = t.row_sums.iter().map(|&v| comb2(v)).sum();
    let sb: f64 = t.col_sums.iter().map(|&v| comb2(v)).sum();
    let total = comb2(t.n);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    let denom = max - expected;
    if denom.abs() < 1e-12 {
        return Ok(if identical(&t) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub n: usize,
}

/// Most frequent value and its frequency; ties go to the smallest value.
pub fn modal(values: &[usize]) -> Option<(usize, usize)> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mut best: Option<(usize, usize)> = None;
    for chunk in sorted.chunk_by(|x, y| x == y) {
        if best.is_none_or(|(_, c)| chunk.len() > c) {
            best = Some((chunk[0], chunk.len()));
        }
    }
    best
}

/// Expected calibration error of the modal number of clusters. Confidence
/// is the modal fraction of the samples; bin `m` covers `((m−1)/M, m/M]`.
pub fn ece(predicted: &[Vec<usize>], truth: &[usize], m: usize) -> Result<CalibrationReport> {
    if m == 0 {
        return Err(invalid("ECE needs at least one bin"));
    }
    if predicted.len() != truth.len() {
        return Err(invalid(format!("{} predictions for {} graphs", predicted.len(), truth.len())));
    }
    let mut count = vec![0usize; m];
    let mut acc = vec![0.0; m];
    let mut conf = vec![0.0; m];
    for (samples, &k) in predicted.iter().zip(truth) {
        let (mode, freq) = modal(samples).ok_or_else(|| invalid("graph with no samples"))?;
        let c = freq as f64 / samples.len() as f64;
        let bin = ((c * m as f64).ceil() as usize).clamp(1, m) - 1;
        count[bin] += 1;
        conf[bin] += c;
        if mode == k {
            acc[bin] += 1.0;
        }
    }
    let n = truth.len();
    let mut ece = 0.0;
    let bins = (0..m)
        .map(|b| {
            let (a, c) = if count[b] > 0 {
                (acc[b] / count[b] as f64, conf[b] / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            ece += count[b] as f64 / n.max(1) as f64 * (a - c).abs();
            CalibrationBin {
                lower: b as f64 / m as f64,
                upper: (b + 1) as f64 / m as f64,
                count: count[b],
                accuracy: a,
                confidence: c,
            }
        })
        .collect();
    Ok(CalibrationReport { bins, ece, n })
}

/// Index of the highest-scoring sample, first on ties.
pub fn map_index(samples: &[PosteriorSample]) -> Result<usize> {
    if samples.is_empty() {
        return Err(invalid("MAP selection over no samples"));
    }
    let mut best = 0;
    for (i, s) in samples.iter().enumerate() {
        if s.score > samples[best].score {
            best = i;
        }
    }
    Ok(best)
}

pub fn map_select(samples: &[PosteriorSample]) -> Result<&PosteriorSample> {
    Ok(&samples[map_index(samples)?])
}

/// Mean and population standard deviation of the number of clusters.
pub fn uncertainty_stats(samples: &[PosteriorSample]) -> (f64, f64) {
    let ks: Vec<f64> = samples.iter().map(|s| s.num_clusters() as f64).collect();
    let n = ks.len().max(1) as f64;
    let mean = ks.iter().sum::<f64>() / n;
    let var = ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
