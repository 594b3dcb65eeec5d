//! Laplacian eigenvector positional encodings.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use acd_tensor::{Mode, Tensor};

use crate::graph::LabeledGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosEncConfig {
    /// Number of eigenvectors kept.
    pub m: usize,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        Self { m: 20 }
    }
}

/// `I − D^{-1/2} A D^{-1/2}`, with `D^{-1/2} = 0` at isolated nodes.
pub fn normalized_laplacian(g: &LabeledGraph) -> DMatrix<f64> {
    let n = g.n_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| match g.degree(i) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let mut l = DMatrix::identity(n, n);
    for i in 0..n {
        for &j in g.neighbors(i) {
            l[(i, j)] = -inv_sqrt[i] * inv_sqrt[j];
        }
    }
    l
}

/// Eigenpairs sorted by ascending eigenvalue; `vectors` holds them as columns.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn symmetric_spectrum(m: DMatrix<f64>) -> Spectrum {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &k) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(k));
    }
    Spectrum { values, vectors }
}

pub fn laplacian_spectrum(g: &LabeledGraph) -> Spectrum {
    symmetric_spectrum(normalized_laplacian(g))
}

/// Sign-fixed encoding: eigenvectors 2..=m+1 of the normalized Laplacian,
/// each flipped so its first entry that is not numerically zero is
/// positive, zero-padded to `m` columns.
pub fn eval_encoding(g: &LabeledGraph, m: usize) -> Tensor {
    let n = g.n_nodes();
    let mut out = Tensor::zeros(&[n, m]);
    if n < 2 {
        return out;
    }
    let spec = laplacian_spectrum(g);
    let cols = m.min(n - 1);
    let data = out.data_mut();
    for c in 0..cols {
        let v = spec.vectors.column(c + 1);
        let sign = v.iter().find(|x| x.abs() > 1e-10).map_or(1.0, |x| x.signum());
        for i in 0..n {
            data[i * m + c] = sign * v[i];
        }
    }
    out
}

/// Multiplies every column by an independent random sign.
pub fn flip_signs<R: Rng + ?Sized>(enc: &Tensor, rng: &mut R) -> Tensor {
    let (n, m) = enc.dims2();
    let signs: Vec<f64> = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let data = (0..n * m).map(|k| enc.data()[k] * signs[k % m]).collect();
    Tensor::new(vec![n, m], data).expect("same shape")
}

/// Encoding for one forward pass. Training draws fresh column signs; eval
/// uses the fixed sign convention.
pub fn laplacian_pos_enc<R: Rng + ?Sized>(g: &LabeledGraph, cfg: &PosEncConfig, rng: &mut R, mode: Mode) -> Tensor {
    let enc = eval_encoding(g, cfg.m);
    match mode {
        Mode::Eval => enc,
        Mode::Train => flip_signs(&enc, rng),
    }
}
