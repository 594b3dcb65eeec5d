//! Pointwise sequential clustering with a variable-input softmax.
//!
//! With `H_k = Σ_{c_i = k} h(x_i)`, `G = Σ_k g(H_k)` and
//! `U = Σ_{i > n} u(x_i)`, the probability that point `n` takes label `k`
//! is proportional to `exp f(G_k, U)`, where `G_k` is `G` recomputed with
//! `h(x_n)` added to cluster `k` (or opening cluster `K + 1`).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use acd_tensor::{CsrMatrix, Mlp, Mode, ParamBuilder, ParamStore, Tape, Tensor, Var};

use super::{shuffled, PosteriorSample};
use crate::attention::{AttnConfig, Isab};
use crate::error::{invalid, Result};
use crate::graph::canonicalize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcpConfig {
    pub hidden: usize,
    pub depth_h: usize,
    pub depth_u: usize,
    pub depth_g: usize,
    pub depth_f: usize,
    /// Replaces `h` and `u` by ISAB over all points when set.
    pub attn: Option<AttnConfig>,
}

impl NcpConfig {
    pub fn new(hidden: usize, attn: Option<AttnConfig>) -> Self {
        Self {
            hidden,
            depth_h: 2,
            depth_u: 2,
            depth_g: 5,
            depth_f: 5,
            attn,
        }
    }
}

#[derive(Clone, Debug)]
enum PointMap {
    Mlp(Mlp),
    Isab(Isab),
}

impl PointMap {
    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match self {
            PointMap::Mlp(m) => Ok(m.forward(tape, x)?),
            PointMap::Isab(a) => a.forward(tape, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NcpHead {
    pub config: NcpConfig,
    h: PointMap,
    u: PointMap,
    g: Mlp,
    f: Mlp,
}

/// Per-point codes `h(x_i)` and `u(x_i)` as plain values, for sampling.
pub struct NcpCodes {
    pub h: Tensor,
    pub u: Tensor,
}

/// Incrementally maintained sums for sequential sampling.
#[derive(Clone, Debug)]
pub struct NcpEncodings {
    /// `H_k` for every open cluster.
    pub h_sums: Vec<Vec<f64>>,
    /// `g(H_k)` for every open cluster.
    pub g_codes: Vec<Vec<f64>>,
    /// `U` over the points still to be assigned.
    pub u_sum: Vec<f64>,
}

impl NcpHead {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d_in: usize, config: &NcpConfig) -> Result<Self> {
        let d = config.hidden;
        let (h, u) = match &config.attn {
            Some(a) => {
                a.validate()?;
                if a.dim != d {
                    return Err(invalid("NCP attention width must equal the hidden width"));
                }
                (
                    PointMap::Isab(Isab::new(&mut pb.sub("h_isab"), d_in, a)?),
                    PointMap::Isab(Isab::new(&mut pb.sub("u_isab"), d_in, a)?),
                )
            }
            None => (
                PointMap::Mlp(Mlp::new(&mut pb.sub("h"), d_in, d, d, config.depth_h)?),
                PointMap::Mlp(Mlp::new(&mut pb.sub("u"), d_in, d, d, config.depth_u)?),
            ),
        };
        Ok(Self {
            config: config.clone(),
            h,
            u,
            g: Mlp::new(&mut pb.sub("g"), d, d, d, config.depth_g)?,
            f: Mlp::new(&mut pb.sub("f"), 2 * d, d, 1, config.depth_f)?,
        })
    }

    pub fn point_codes(&self, tape: &mut Tape<'_>, x: Var) -> Result<(Var, Var)> {
        Ok((self.h.forward(tape, x)?, self.u.forward(tape, x)?))
    }

    /// Log-probabilities of the decisions at positions `steps` of `order`,
    /// concatenated step by step (`K_t + 1` entries each), with the segment
    /// offsets. `labels` are the canonical labels of the points in `order`.
    fn step_logits(
        &self,
        tape: &mut Tape<'_>,
        hx: Var,
        ux: Var,
        order: &[usize],
        labels: &[usize],
        steps: std::ops::Range<usize>,
    ) -> Result<(Var, Vec<usize>)> {
        let n = order.len();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut cur_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut cand_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut p_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut q_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut offsets = vec![0];
        for t in 0..steps.end {
            if t >= steps.start {
                let k_t = members.len();
                let base = cur_rows.len();
                for m in &members {
                    cur_rows.push(m.iter().map(|&i| (i, 1.0)).collect());
                }
                let later: Vec<(usize, f64)> = order[t + 1..].iter().map(|&i| (i, 1.0)).collect();
                for k in 0..=k_t {
                    let mut row: Vec<(usize, f64)> = match members.get(k) {
                        Some(m) => m.iter().map(|&i| (i, 1.0)).collect(),
                        None => Vec::new(),
                    };
                    row.push((order[t], 1.0));
                    cand_rows.push(row);
                    p_rows.push((0..k_t).filter(|&j| j != k).map(|j| (base + j, 1.0)).collect());
                    q_rows.push(later.clone());
                }
                offsets.push(cand_rows.len());
            }
            let c = labels[t];
            if c == members.len() {
                members.push(Vec::new());
            }
            members[c].push(order[t]);
        }
        let n_cur = cur_rows.len();
        let mut all_rows = cur_rows;
        all_rows.extend(cand_rows);
        let m_all = Arc::new(CsrMatrix::from_rows(n, &all_rows));
        let h_all = tape.sparse_matmul(&m_all, hx)?;
        let g_all = self.g.forward(tape, h_all)?;
        let total = all_rows.len();
        let g_cand = tape.slice(g_all, 0, n_cur, total)?;
        let big_g = if n_cur == 0 {
            g_cand
        } else {
            let g_cur = tape.slice(g_all, 0, 0, n_cur)?;
            let p = Arc::new(CsrMatrix::from_rows(n_cur, &p_rows));
            let spread = tape.sparse_matmul(&p, g_cur)?;
            tape.add(spread, g_cand)?
        };
        let q = Arc::new(CsrMatrix::from_rows(n, &q_rows));
        let big_u = tape.sparse_matmul(&q, ux)?;
        let inp = tape.concat(&[big_g, big_u], 1)?;
        let logits = self.f.forward(tape, inp)?;
        let t_total = tape.shape(logits)[0];
        let flat = tape.reshape(logits, vec![t_total])?;
        let lp = tape.log_softmax_segments(flat, offsets.clone())?;
        Ok((lp, offsets))
    }

    /// `−log p(c_{1:N} | x)` with points visited in `order`. `labels` are
    /// over the original nodes and need not be canonical.
    pub fn nll_at_order(&self, tape: &mut Tape<'_>, x: Var, labels: &[usize], order: &[usize]) -> Result<Var> {
        let n = labels.len();
        if order.len() != n || tape.shape(x)[0] != n {
            return Err(invalid("order, labels and embeddings disagree in length"));
        }
        let permuted: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let canon = canonicalize(&permuted);
        let (hx, ux) = self.point_codes(tape, x)?;
        let (lp, offsets) = self.step_logits(tape, hx, ux, order, &canon, 0..n)?;
        let targets: Vec<usize> = (0..n).map(|t| offsets[t] + canon[t]).collect();
        let t_total = *offsets.last().expect("at least one offset");
        let col = tape.reshape(lp, vec![t_total, 1])?;
        let picked = tape.gather_rows(col, &targets)?;
        let s = tape.sum(picked);
        Ok(tape.neg(s))
    }

    /// Teacher-forced negative log-likelihood under a uniformly random order.
    pub fn nll<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, labels: &[usize], rng: &mut R) -> Result<Var> {
        let order = shuffled(labels.len(), rng);
        self.nll_at_order(tape, x, labels, &order)
    }

    /// Probabilities over the `K + 1` choices for the point at position `t`
    /// of `order`, given the labels of the points before it.
    pub fn step_distribution(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        order: &[usize],
        prefix_labels: &[usize],
        t: usize,
    ) -> Result<Vec<f64>> {
        let n = order.len();
        if t >= n || prefix_labels.len() < t {
            return Err(invalid(format!("step {t} out of range for {n} points")));
        }
        let mut labels = canonicalize(&prefix_labels[..t]);
        labels.push(0);
        let (hx, ux) = self.point_codes(tape, x)?;
        let (lp, _) = self.step_logits(tape, hx, ux, order, &labels, t..t + 1)?;
        Ok(tape.value(lp).data().iter().map(|v| v.exp()).collect())
    }

    /// Plain values of `h(x_i)` and `u(x_i)` for all points.
    pub fn codes(&self, store: &ParamStore, x: &Tensor) -> Result<NcpCodes> {
        let mut tape = Tape::new(store, Mode::Eval);
        let xv = tape.constant(x.clone());
        let (h, u) = self.point_codes(&mut tape, xv)?;
        Ok(NcpCodes {
            h: tape.value(h).clone(),
            u: tape.value(u).clone(),
        })
    }

    /// Applies `g` to each row.
    fn g_rows(&self, store: &ParamStore, rows: Vec<f64>, n: usize) -> Result<Tensor> {
        let d = self.config.hidden;
        let mut tape = Tape::new(store, Mode::Eval);
        let v = tape.constant(Tensor::new(vec![n, d], rows)?);
        let out = self.g.forward(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }

    /// Fresh sums before any point is assigned, with `U` covering every
    /// point except `first`.
    pub fn initial_encodings(&self, codes: &NcpCodes, order: &[usize]) -> NcpEncodings {
        let d = self.config.hidden;
        let mut u_sum = vec![0.0; d];
        for &i in order.iter().skip(1) {
            u_sum.iter_mut().zip(codes.u.row(i)).for_each(|(s, v)| *s += v);
        }
        NcpEncodings {
            h_sums: Vec::new(),
            g_codes: Vec::new(),
            u_sum,
        }
    }

    /// Step probabilities from maintained encodings, plus `g(H_k + h(x_n))`
    /// for every option, which becomes the new `g` code of the chosen one.
    pub fn step_from_encodings(
        &self,
        store: &ParamStore,
        codes: &NcpCodes,
        enc: &NcpEncodings,
        point: usize,
    ) -> Result<(Vec<f64>, Tensor)> {
        let d = self.config.hidden;
        let k = enc.h_sums.len();
        let hp = codes.h.row(point);
        let mut rows = Vec::with_capacity((k + 1) * d);
        for hk in &enc.h_sums {
            rows.extend(hk.iter().zip(hp).map(|(a, b)| a + b));
        }
        rows.extend_from_slice(hp);
        let g_cand = self.g_rows(store, rows, k + 1)?;
        let mut g_total = vec![0.0; d];
        for gk in &enc.g_codes {
            g_total.iter_mut().zip(gk).for_each(|(s, v)| *s += v);
        }
        let mut inp = Vec::with_capacity((k + 1) * 2 * d);
        for opt in 0..=k {
            for c in 0..d {
                let own = if opt < k { enc.g_codes[opt][c] } else { 0.0 };
                inp.push(g_total[c] - own + g_cand.at(opt, c));
            }
            inp.extend_from_slice(&enc.u_sum);
        }
        let mut tape = Tape::new(store, Mode::Eval);
        let v = tape.constant(Tensor::new(vec![k + 1, 2 * d], inp)?);
        let logits = self.f.forward(&mut tape, v)?;
        let flat = tape.reshape(logits, vec![1, k + 1])?;
        let p = tape.softmax_rows(flat)?;
        Ok((tape.value(p).data().to_vec(), g_cand))
    }

    /// Assigns `point` to option `choice` and removes `next` (the following
    /// point, if any) from `U`.
    pub fn update_encodings(
        &self,
        codes: &NcpCodes,
        enc: &mut NcpEncodings,
        point: usize,
        choice: usize,
        g_cand: &Tensor,
        next: Option<usize>,
    ) {
        let hp = codes.h.row(point);
        if choice == enc.h_sums.len() {
            enc.h_sums.push(hp.to_vec());
            enc.g_codes.push(g_cand.row(choice).to_vec());
        } else {
            enc.h_sums[choice].iter_mut().zip(hp).for_each(|(s, v)| *s += v);
            enc.g_codes[choice] = g_cand.row(choice).to_vec();
        }
        if let Some(j) = next {
            enc.u_sum.iter_mut().zip(codes.u.row(j)).for_each(|(s, v)| *s -= v);
        }
    }

    /// One sequential sample under a fresh random order.
    pub fn sample_one<R: Rng + ?Sized>(&self, store: &ParamStore, codes: &NcpCodes, rng: &mut R) -> Result<PosteriorSample> {
        let n = codes.h.rows();
        let order = shuffled(n, rng);
        let mut enc = self.initial_encodings(codes, &order);
        let mut labels = vec![0; n];
        let mut step_log_probs = Vec::with_capacity(n);
        for t in 0..n {
            let p = order[t];
            let (probs, g_cand) = self.step_from_encodings(store, codes, &enc, p)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut choice = probs.len() - 1;
            for (k, &q) in probs.iter().enumerate() {
                acc += q;
                if u < acc {
                    choice = k;
                    break;
                }
            }
            step_log_probs.push(probs[choice].ln());
            labels[p] = choice;
            self.update_encodings(codes, &mut enc, p, choice, &g_cand, order.get(t + 1).copied());
        }
        Ok(PosteriorSample {
            labels: canonicalize(&labels),
            score: step_log_probs.iter().sum(),
            calls: n,
            step_log_probs,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, store: &ParamStore, x: &Tensor, rng: &mut R, s: usize) -> Result<Vec<PosteriorSample>> {
        let codes = self.codes(store, x)?;
        (0..s).map(|_| self.sample_one(store, &codes, rng)).collect()
    }
}
