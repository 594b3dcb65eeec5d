#![allow(dead_code)]

use acd_core::generate::stream_rng;
use acd_tensor::gradcheck::check_param_grads;
use acd_tensor::{Mode, ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Every canonical labelling of `n` points (restricted growth strings).
pub fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let k = prefix.iter().max().map_or(0, |m| m + 1);
        for c in 0..=k {
            prefix.push(c);
            go(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), n, &mut out);
    out
}

pub fn random_perm(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Row `perm[i]` of the result is row `i` of `t`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c) = t.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        out[perm[i] * c..(perm[i] + 1) * c].copy_from_slice(t.row(i));
    }
    Tensor::new(vec![r, c], out).unwrap()
}

/// Worst relative error between analytic parameter gradients and central
/// differences of the scalar built by `f`. `f` must be deterministic.
pub fn param_fd<F>(store: &ParamStore, mode: Mode, max_coords: usize, f: F) -> (f64, String)
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let grads = {
        let mut tape = Tape::new(store, mode);
        let out = f(&mut tape);
        tape.backward(out).unwrap().into_params()
    };
    let report = check_param_grads(store, &grads, 1e-5, max_coords, |s| {
        let mut tape = Tape::new(s, mode);
        let out = f(&mut tape);
        Ok(tape.value(out).item())
    })
    .unwrap();
    (report.worst_rel_err, report.worst_param)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix, eigenvalues
/// ascending with eigenvectors as columns.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i][i].partial_cmp(&a[j][j]).unwrap());
    let values = idx.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n).map(|r| idx.iter().map(|&c| v[r][c]).collect()).collect();
    (values, vectors)
}

pub fn rng(tag: &str) -> rand_chacha::ChaCha8Rng {
    stream_rng(12345, tag, 0)
}
