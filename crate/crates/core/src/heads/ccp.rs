//! Clusterwise clustering with a latent vector per cluster.
//!
//! Cluster `k` is an anchor `d_k` plus the available points whose bits
//! `b_i` are set. Given `z_k ~ N(μ(D, U, G), σ(D, U, G))` the bits are
//! independent Bernoullis with logits `ρ(z_k, x_{a_i}, D, U, G)`. Training
//! maximises an ELBO with posterior `q(z_k | D, A_in, A_out, G)` and a
//! uniform anchor inside the true cluster.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use acd_tensor::{CsrMatrix, Mlp, Mode, ParamBuilder, ParamStore, Tape, Tensor, Var};

use super::rounds::AttnRoundEncoder;
use super::{anchor_log_prior, labels_from_clusters, log_sigmoid, logsumexp, random_rounds, ClusterState, PosteriorSample, Round};
use crate::attention::{AttnConfig, Pma};
use crate::error::{invalid, Result};
use crate::graph::ClusterSets;

/// Floor added to softplus standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcpConfig {
    pub hidden: usize,
    pub d_z: usize,
    pub n_importance: usize,
    pub depth_hgu: usize,
    pub depth_prior: usize,
    pub depth_post: usize,
    pub depth_phi: usize,
    pub attn: Option<AttnConfig>,
}

impl CcpConfig {
    pub fn new(hidden: usize, attn: Option<AttnConfig>) -> Self {
        Self {
            hidden,
            d_z: hidden,
            n_importance: 16,
            depth_hgu: 3,
            depth_prior: 5,
            depth_post: 5,
            depth_phi: 4,
            attn,
        }
    }
}

#[derive(Clone, Debug)]
struct CcpAttn {
    rounds: AttnRoundEncoder,
    pma_in: Pma,
    pma_out: Pma,
    pma_g: Pma,
}

#[derive(Clone, Debug)]
pub struct CcpHead {
    pub config: CcpConfig,
    d_in: usize,
    h: Mlp,
    g: Mlp,
    u: Mlp,
    prior: Mlp,
    post: Mlp,
    phi: Mlp,
    attn: Option<CcpAttn>,
}

/// Per-graph inputs on a tape: embeddings and the point codes `h(x)`, `u(x)`.
#[derive(Clone, Copy, Debug)]
pub struct CcpCtx {
    pub x: Var,
    pub hx: Var,
    pub ux: Var,
}

/// Encodings of one clusterwise state, each a single row.
#[derive(Clone, Copy, Debug)]
pub struct CcpEncodings {
    pub d: Var,
    pub u: Var,
    pub g: Var,
    pub a_in: Option<Var>,
    pub a_out: Option<Var>,
}

struct Local {
    d: Var,
    u: Var,
    ua: Var,
    a_in: Option<Var>,
    a_out: Option<Var>,
}

/// Round encodings stacked over the rounds that have available points.
struct Stacked {
    d: Var,
    u: Var,
    g: Var,
    a_in: Option<Var>,
    a_out: Option<Var>,
    ua: Var,
    /// Stacked round of each row of `ua`.
    row_round: Vec<usize>,
    bits: Vec<f64>,
    /// Indices into the input rounds of the stacked rounds.
    kept: Vec<usize>,
}

/// Gaussian parameters as plain values, one row per stacked round.
#[derive(Clone, Debug)]
pub struct LatentParams {
    pub mu_p: Tensor,
    pub sigma_p: Tensor,
    pub mu_q: Option<Tensor>,
    pub sigma_q: Option<Tensor>,
}

fn mean_row(idx: &[usize]) -> Vec<(usize, f64)> {
    let w = 1.0 / idx.len() as f64;
    idx.iter().map(|&i| (i, w)).collect()
}

/// `Σ log N(z | μ, σ)` over the entries of one row.
fn log_normal(z: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    z.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| {
            let r = (z - m) / s;
            -0.5 * r * r - s.ln() - half_log_2pi
        })
        .sum()
}

impl CcpHead {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d_in: usize, config: &CcpConfig) -> Result<Self> {
        let d = config.hidden;
        let dz = config.d_z;
        if d == 0 || dz == 0 {
            return Err(invalid("CCP widths must be positive"));
        }
        let attn = match &config.attn {
            Some(a) => {
                a.validate()?;
                if a.dim != d || a.seeds != 1 {
                    return Err(invalid("CCP attention needs width equal to hidden and one PMA seed"));
                }
                Some(CcpAttn {
                    rounds: AttnRoundEncoder::new(&mut pb.sub("enc"), d, a)?,
                    pma_in: Pma::new(&mut pb.sub("pma_in"), d, a)?,
                    pma_out: Pma::new(&mut pb.sub("pma_out"), d, a)?,
                    pma_g: Pma::new(&mut pb.sub("pma_g"), d, a)?,
                })
            }
            None => None,
        };
        // the anchor and candidate codes are raw embeddings in the plain model
        let (dd, da) = if attn.is_some() { (d, d) } else { (d_in, d_in) };
        let hgu = config.depth_hgu;
        Ok(Self {
            config: config.clone(),
            d_in,
            h: Mlp::new(&mut pb.sub("h"), d_in, d, d, hgu)?,
            g: Mlp::new(&mut pb.sub("g"), d, d, d, hgu)?,
            u: Mlp::new(&mut pb.sub("u"), d_in, d, d, hgu)?,
            prior: Mlp::new(&mut pb.sub("prior"), dd + 2 * d, d, 2 * dz, config.depth_prior)?,
            post: Mlp::new(&mut pb.sub("post"), dd + 3 * d, d, 2 * dz, config.depth_post)?,
            phi: Mlp::new(&mut pb.sub("phi"), dz + da + dd + 2 * d, d, 1, config.depth_phi)?,
            attn,
        })
    }

    pub fn is_attention(&self) -> bool {
        self.attn.is_some()
    }

    pub fn context(&self, tape: &mut Tape<'_>, x: Var) -> Result<CcpCtx> {
        if tape.shape(x).get(1) != Some(&self.d_in) {
            return Err(invalid(format!("embeddings of shape {:?}, head expects width {}", tape.shape(x), self.d_in)));
        }
        let hx = self.h.forward(tape, x)?;
        let ux = self.u.forward(tape, x)?;
        Ok(CcpCtx { x, hx, ux })
    }

    fn zeros_row(&self, tape: &mut Tape<'_>) -> Var {
        tape.constant(Tensor::zeros(&[1, self.config.hidden]))
    }

    fn local(&self, tape: &mut Tape<'_>, ctx: &CcpCtx, anchor: usize, available: &[usize], bits: Option<&[bool]>) -> Result<Local> {
        let n = tape.shape(ctx.x)[0];
        let (d, u, ua) = match &self.attn {
            Some(a) => {
                let codes = a.rounds.encode(tape, ctx.ux, anchor, available)?;
                let ua = match codes.ua {
                    Some(ua) => ua,
                    None => return Err(invalid("round without available points")),
                };
                (codes.d, codes.u, ua)
            }
            None => {
                if available.is_empty() {
                    return Err(invalid("round without available points"));
                }
                let d = tape.gather_rows(ctx.x, &[anchor])?;
                let m = Arc::new(CsrMatrix::from_rows(n, &[mean_row(available)]));
                let u = tape.sparse_matmul(&m, ctx.ux)?;
                let ua = tape.gather_rows(ctx.x, available)?;
                (d, u, ua)
            }
        };
        let (mut a_in, mut a_out) = (None, None);
        if let Some(bits) = bits {
            let pos_in: Vec<usize> = (0..available.len()).filter(|&i| bits[i]).collect();
            let pos_out: Vec<usize> = (0..available.len()).filter(|&i| !bits[i]).collect();
            let pool = |tape: &mut Tape<'_>, pos: &[usize], which_in: bool| -> Result<Var> {
                if pos.is_empty() {
                    return Ok(self.zeros_row(tape));
                }
                match &self.attn {
                    Some(a) => {
                        let rows = tape.gather_rows(ua, pos)?;
                        if which_in {
                            a.pma_in.forward(tape, rows)
                        } else {
                            a.pma_out.forward(tape, rows)
                        }
                    }
                    None => {
                        let nodes: Vec<usize> = pos.iter().map(|&p| available[p]).collect();
                        let m = Arc::new(CsrMatrix::from_rows(n, &[mean_row(&nodes)]));
                        Ok(tape.sparse_matmul(&m, ctx.ux)?)
                    }
                }
            };
            a_in = Some(pool(tape, &pos_in, true)?);
            a_out = Some(pool(tape, &pos_out, false)?);
        }
        Ok(Local { d, u, ua, a_in, a_out })
    }

    /// `g` of the pooled `h` codes of each set, one row per set.
    pub fn cluster_codes(&self, tape: &mut Tape<'_>, ctx: &CcpCtx, sets: &[Vec<usize>]) -> Result<Var> {
        let n = tape.shape(ctx.x)[0];
        let pooled = match &self.attn {
            Some(a) => {
                let mut rows = Vec::with_capacity(sets.len());
                for s in sets {
                    let hs = tape.gather_rows(ctx.hx, s)?;
                    rows.push(a.pma_g.forward(tape, hs)?);
                }
                tape.concat(&rows, 0)?
            }
            None => {
                let rows: Vec<Vec<(usize, f64)>> = sets.iter().map(|s| mean_row(s)).collect();
                let m = Arc::new(CsrMatrix::from_rows(n, &rows));
                tape.sparse_matmul(&m, ctx.hx)?
            }
        };
        Ok(self.g.forward(tape, pooled)?)
    }

    /// Encodings of a state. `A_in` and `A_out` are produced when the
    /// membership bits of the available points are given.
    pub fn encode(&self, tape: &mut Tape<'_>, ctx: &CcpCtx, state: &ClusterState, bits: Option<&[bool]>) -> Result<CcpEncodings> {
        let n = tape.shape(ctx.x)[0];
        state.validate(n)?;
        let local = self.local(tape, ctx, state.anchor, &state.available, bits)?;
        let g = if state.assigned.is_empty() {
            self.zeros_row(tape)
        } else {
            let codes = self.cluster_codes(tape, ctx, &state.assigned)?;
            tape.sum_axis(codes, 0)?
        };
        Ok(CcpEncodings {
            d: local.d,
            u: local.u,
            g,
            a_in: local.a_in,
            a_out: local.a_out,
        })
    }

    fn stack(&self, tape: &mut Tape<'_>, ctx: &CcpCtx, rounds: &[Round], with_bits: bool) -> Result<Option<Stacked>> {
        let kept: Vec<usize> = (0..rounds.len()).filter(|&r| !rounds[r].available.is_empty()).collect();
        if kept.is_empty() {
            return Ok(None);
        }
        let mut ds = Vec::new();
        let mut us = Vec::new();
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        let mut uas = Vec::new();
        let mut row_round = Vec::new();
        let mut bits = Vec::new();
        for (k, &r) in kept.iter().enumerate() {
            let round = &rounds[r];
            let b = with_bits.then_some(round.bits.as_slice());
            let l = self.local(tape, ctx, round.anchor, &round.available, b)?;
            ds.push(l.d);
            us.push(l.u);
            uas.push(l.ua);
            if let (Some(i), Some(o)) = (l.a_in, l.a_out) {
                ins.push(i);
                outs.push(o);
            }
            row_round.extend(std::iter::repeat_n(k, round.available.len()));
            bits.extend(round.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        let d = tape.concat(&ds, 0)?;
        let u = tape.concat(&us, 0)?;
        let ua = tape.concat(&uas, 0)?;
        let (a_in, a_out) = if with_bits {
            (Some(tape.concat(&ins, 0)?), Some(tape.concat(&outs, 0)?))
        } else {
            (None, None)
        };
        // G of stacked round k sums the codes of the clusters formed before it
        let r_count = kept.len();
        let g = if r_count == 1 {
            self.zeros_row(tape)
        } else {
            let sets: Vec<Vec<usize>> = kept[..r_count - 1].iter().map(|&r| rounds[r].members()).collect();
            let codes = self.cluster_codes(tape, ctx, &sets)?;
            let lower: Vec<Vec<(usize, f64)>> = (0..r_count).map(|k| (0..k).map(|j| (j, 1.0)).collect()).collect();
            let m = Arc::new(CsrMatrix::from_rows(r_count - 1, &lower));
            tape.sparse_matmul(&m, codes)?
        };
        Ok(Some(Stacked {
            d,
            u,
            g,
            a_in,
            a_out,
            ua,
            row_round,
            bits,
            kept,
        }))
    }

    fn gaussian(&self, tape: &mut Tape<'_>, mlp: &Mlp, inputs: &[Var]) -> Result<(Var, Var)> {
        let dz = self.config.d_z;
        let inp = tape.concat(inputs, 1)?;
        let out = mlp.forward(tape, inp)?;
        let mu = tape.slice(out, 1, 0, dz)?;
        let raw = tape.slice(out, 1, dz, 2 * dz)?;
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
        Ok((mu, sigma))
    }

    fn prior_of(&self, tape: &mut Tape<'_>, d: Var, u: Var, g: Var) -> Result<(Var, Var)> {
        self.gaussian(tape, &self.prior, &[d, u, g])
    }

    fn posterior_of(&self, tape: &mut Tape<'_>, d: Var, a_in: Var, a_out: Var, g: Var) -> Result<(Var, Var)> {
        self.gaussian(tape, &self.post, &[d, a_in, a_out, g])
    }

    /// Bit logits for rows whose latent, candidate code and round index are
    /// given. `z_rows[i]` and `rounds_of[i]` index into `z` and the stacked
    /// round encodings.
    fn logits(&self, tape: &mut Tape<'_>, st: &Stacked, z: Var, z_rows: &[usize], ua_rows: &[usize]) -> Result<Var> {
        let rr: Vec<usize> = ua_rows.iter().map(|&i| st.row_round[i]).collect();
        let zg = tape.gather_rows(z, z_rows)?;
        let ua = tape.gather_rows(st.ua, ua_rows)?;
        let d = tape.gather_rows(st.d, &rr)?;
        let u = tape.gather_rows(st.u, &rr)?;
        let g = tape.gather_rows(st.g, &rr)?;
        let inp = tape.concat(&[zg, ua, d, u, g], 1)?;
        Ok(self.phi.forward(tape, inp)?)
    }

    /// `Σ_i [b_i l_i − softplus(l_i)]`, the Bernoulli log-likelihood.
    fn bernoulli_loglik(tape: &mut Tape<'_>, logits: Var, bits: &[f64]) -> Result<Var> {
        let b = tape.constant(Tensor::new(vec![bits.len(), 1], bits.to_vec())?);
        let bl = tape.mul(b, logits)?;
        let sp = tape.softplus(logits);
        let diff = tape.sub(bl, sp)?;
        Ok(tape.sum(diff))
    }

    /// Negative ELBO for the given rounds with reparameterisation noise
    /// `eps` (one row of width `d_z` per round with available points).
    pub fn neg_elbo_with(&self, tape: &mut Tape<'_>, x: Var, rounds: &[Round], eps: &Tensor) -> Result<Var> {
        let anchor = rounds
            .iter()
            .map(|r| {
                let cluster = 1 + r.bits.iter().filter(|&&b| b).count();
                (cluster as f64).ln() - ((r.available.len() + 1) as f64).ln()
            })
            .sum::<f64>();
        let ctx = self.context(tape, x)?;
        let st = match self.stack(tape, &ctx, rounds, true)? {
            Some(st) => st,
            None => {
                let c = tape.constant(Tensor::scalar(-anchor));
                return Ok(c);
            }
        };
        let (mu_p, sig_p) = self.prior_of(tape, st.d, st.u, st.g)?;
        let (mu_q, sig_q) = self.posterior_of(tape, st.d, st.a_in.expect("bits"), st.a_out.expect("bits"), st.g)?;
        let e = tape.constant(eps.clone());
        let noise = tape.mul(sig_q, e)?;
        let z = tape.add(mu_q, noise)?;
        let rows: Vec<usize> = (0..st.row_round.len()).collect();
        let logits = self.logits(tape, &st, z, &st.row_round.clone(), &rows)?;
        let ll = Self::bernoulli_loglik(tape, logits, &st.bits)?;
        let kl = gaussian_kl(tape, mu_q, sig_q, mu_p, sig_p)?;
        let elbo = tape.sub(ll, kl)?;
        let elbo = tape.add_scalar(elbo, anchor);
        Ok(tape.neg(elbo))
    }

    /// Negative ELBO with a uniform cluster order, uniform anchors inside each
    /// true cluster and one latent draw per cluster.
    pub fn neg_elbo<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, sets: &ClusterSets, rng: &mut R) -> Result<Var> {
        let rounds = random_rounds(sets, rng);
        let r = rounds.iter().filter(|r| !r.available.is_empty()).count();
        let eps = standard_normal(r, self.config.d_z, rng);
        self.neg_elbo_with(tape, x, &rounds, &eps)
    }

    /// The analytic KL term of the ELBO for the given rounds.
    pub fn kl_term(&self, tape: &mut Tape<'_>, x: Var, rounds: &[Round]) -> Result<f64> {
        let ctx = self.context(tape, x)?;
        let Some(st) = self.stack(tape, &ctx, rounds, true)? else {
            return Ok(0.0);
        };
        let (mu_p, sig_p) = self.prior_of(tape, st.d, st.u, st.g)?;
        let (mu_q, sig_q) = self.posterior_of(tape, st.d, st.a_in.expect("bits"), st.a_out.expect("bits"), st.g)?;
        let kl = gaussian_kl(tape, mu_q, sig_q, mu_p, sig_p)?;
        Ok(tape.value(kl).item())
    }

    /// Prior and posterior parameters of every round with available points.
    pub fn latent_params(&self, store: &ParamStore, x: &Tensor, rounds: &[Round]) -> Result<Option<LatentParams>> {
        let mut tape = Tape::new(store, Mode::Eval);
        let xv = tape.constant(x.clone());
        let ctx = self.context(&mut tape, xv)?;
        let Some(st) = self.stack(&mut tape, &ctx, rounds, true)? else {
            return Ok(None);
        };
        let (mu_p, sig_p) = self.prior_of(&mut tape, st.d, st.u, st.g)?;
        let (mu_q, sig_q) = self.posterior_of(&mut tape, st.d, st.a_in.expect("bits"), st.a_out.expect("bits"), st.g)?;
        Ok(Some(LatentParams {
            mu_p: tape.value(mu_p).clone(),
            sigma_p: tape.value(sig_p).clone(),
            mu_q: Some(tape.value(mu_q).clone()),
            sigma_q: Some(tape.value(sig_q).clone()),
        }))
    }

    /// `log p(b | z)` of stacked round `k` (counting only rounds with
    /// available points) for each latent row of `z`.
    pub fn bits_log_lik(&self, store: &ParamStore, x: &Tensor, rounds: &[Round], k: usize, z: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store, Mode::Eval);
        let xv = tape.constant(x.clone());
        let ctx = self.context(&mut tape, xv)?;
        let Some(st) = self.stack(&mut tape, &ctx, rounds, false)? else {
            return Err(invalid("no round has available points"));
        };
        let rows: Vec<usize> = (0..st.row_round.len()).filter(|&i| st.row_round[i] == k).collect();
        let s = z.rows();
        let zv = tape.constant(z.clone());
        let z_rows: Vec<usize> = (0..s).flat_map(|j| std::iter::repeat_n(j, rows.len())).collect();
        let ua_rows: Vec<usize> = (0..s).flat_map(|_| rows.iter().copied()).collect();
        let logits = self.logits(&mut tape, &st, zv, &z_rows, &ua_rows)?;
        let l = tape.value(logits).data();
        let m = rows.len();
        Ok((0..s)
            .map(|j| {
                (0..m)
                    .map(|i| {
                        let li = l[j * m + i];
                        if st.bits[rows[i]] > 0.5 {
                            log_sigmoid(li)
                        } else {
                            log_sigmoid(-li)
                        }
                    })
                    .sum()
            })
            .collect())
    }

    /// Surrogate log-probability of the clustering traced by `rounds`:
    /// anchor priors plus, per round, an importance estimate of
    /// `∫ p(b | z) p(z) dz` with proposal `q(z | b)`.
    pub fn score_rounds<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x: &Tensor,
        rounds: &[Round],
        n_importance: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_importance == 0 {
            return Err(invalid("n_importance must be at least 1"));
        }
        let mut total = anchor_log_prior(rounds);
        let mut tape = Tape::new(store, Mode::Eval);
        let xv = tape.constant(x.clone());
        let ctx = self.context(&mut tape, xv)?;
        let Some(st) = self.stack(&mut tape, &ctx, rounds, true)? else {
            return Ok(total);
        };
        let (mu_p, sig_p) = self.prior_of(&mut tape, st.d, st.u, st.g)?;
        let (mu_q, sig_q) = self.posterior_of(&mut tape, st.d, st.a_in.expect("bits"), st.a_out.expect("bits"), st.g)?;
        let (mu_p, sig_p) = (tape.value(mu_p).clone(), tape.value(sig_p).clone());
        let (mu_q, sig_q) = (tape.value(mu_q).clone(), tape.value(sig_q).clone());
        let dz = self.config.d_z;
        let r_count = st.kept.len();
        let s = n_importance;
        let mut z = Vec::with_capacity(r_count * s * dz);
        let mut log_ratio = vec![0.0; r_count * s];
        for k in 0..r_count {
            for j in 0..s {
                let row: Vec<f64> = (0..dz)
                    .map(|c| {
                        let e: f64 = StandardNormal.sample(rng);
                        mu_q.at(k, c) + sig_q.at(k, c) * e
                    })
                    .collect();
                log_ratio[k * s + j] = log_normal(&row, mu_p.row(k), sig_p.row(k)) - log_normal(&row, mu_q.row(k), sig_q.row(k));
                z.extend(row);
            }
        }
        let zv = tape.constant(Tensor::new(vec![r_count * s, dz], z)?);
        let mut z_rows = Vec::new();
        let mut ua_rows = Vec::new();
        let mut owner = Vec::new();
        for k in 0..r_count {
            let rows: Vec<usize> = (0..st.row_round.len()).filter(|&i| st.row_round[i] == k).collect();
            for j in 0..s {
                for &i in &rows {
                    z_rows.push(k * s + j);
                    ua_rows.push(i);
                    owner.push(k * s + j);
                }
            }
        }
        let logits = self.logits(&mut tape, &st, zv, &z_rows, &ua_rows)?;
        let l = tape.value(logits).data();
        let mut log_w = log_ratio;
        for (idx, &ui) in ua_rows.iter().enumerate() {
            let li = l[idx];
            log_w[owner[idx]] += if st.bits[ui] > 0.5 { log_sigmoid(li) } else { log_sigmoid(-li) };
        }
        for k in 0..r_count {
            total += logsumexp(&log_w[k * s..(k + 1) * s]) - (s as f64).ln();
        }
        Ok(total)
    }

    /// Score of a complete labelling in canonical cluster order, anchoring
    /// every cluster at its smallest node.
    pub fn score<R: Rng + ?Sized>(&self, store: &ParamStore, x: &Tensor, sets: &ClusterSets, n_importance: usize, rng: &mut R) -> Result<f64> {
        self.score_rounds(store, x, &super::canonical_rounds(sets), n_importance, rng)
    }

    /// Plain values of the point codes `h(x)` and `u(x)`.
    fn codes(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new(store, Mode::Eval);
        let xv = tape.constant(x.clone());
        let ctx = self.context(&mut tape, xv)?;
        Ok((tape.value(ctx.hx).clone(), tape.value(ctx.ux).clone()))
    }

    /// Draws one clustering round by round and scores it with its own
    /// cluster order and anchors.
    pub fn sample_one<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        x: &Tensor,
        codes: &(Tensor, Tensor),
        rng: &mut R,
    ) -> Result<PosteriorSample> {
        let n = x.rows();
        let d = self.config.hidden;
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut g_sum = vec![0.0; d];
        let mut rounds = Vec::new();
        let mut clusters = Vec::new();
        let mut step_log_probs = Vec::new();
        while !remaining.is_empty() {
            let anchor = remaining.swap_remove(rng.random_range(0..remaining.len()));
            remaining.sort_unstable();
            let available = remaining.clone();
            let mut lp = -((available.len() + 1) as f64).ln();
            let bits: Vec<bool> = if available.is_empty() {
                Vec::new()
            } else {
                let mut tape = Tape::new(store, Mode::Eval);
                let ctx = CcpCtx {
                    x: tape.constant(x.clone()),
                    hx: tape.constant(codes.0.clone()),
                    ux: tape.constant(codes.1.clone()),
                };
                let local = self.local(&mut tape, &ctx, anchor, &available, None)?;
                let g = tape.constant(Tensor::new(vec![1, d], g_sum.clone())?);
                let (mu, sigma) = self.prior_of(&mut tape, local.d, local.u, g)?;
                let dz = self.config.d_z;
                let zs: Vec<f64> = (0..dz)
                    .map(|c| {
                        let e: f64 = StandardNormal.sample(rng);
                        tape.value(mu).data()[c] + tape.value(sigma).data()[c] * e
                    })
                    .collect();
                let z = tape.constant(Tensor::new(vec![1, dz], zs)?);
                let st = Stacked {
                    d: local.d,
                    u: local.u,
                    g,
                    a_in: None,
                    a_out: None,
                    ua: local.ua,
                    row_round: vec![0; available.len()],
                    bits: Vec::new(),
                    kept: vec![0],
                };
                let rows: Vec<usize> = (0..available.len()).collect();
                let logits = self.logits(&mut tape, &st, z, &vec![0; rows.len()], &rows)?;
                let bits: Vec<bool> = tape
                    .value(logits)
                    .data()
                    .iter()
                    .map(|&l| {
                        let on = rng.random::<f64>() < 1.0 / (1.0 + (-l).exp());
                        lp += if on { log_sigmoid(l) } else { log_sigmoid(-l) };
                        on
                    })
                    .collect();
                bits
            };
            let round = Round { anchor, available, bits };
            let members = round.members();
            remaining.retain(|i| members.binary_search(i).is_err());
            if !remaining.is_empty() {
                let mut tape = Tape::new(store, Mode::Eval);
                let ctx = CcpCtx {
                    x: tape.constant(x.clone()),
                    hx: tape.constant(codes.0.clone()),
                    ux: tape.constant(codes.1.clone()),
                };
                let code = self.cluster_codes(&mut tape, &ctx, std::slice::from_ref(&members))?;
                g_sum.iter_mut().zip(tape.value(code).data()).for_each(|(s, v)| *s += v);
            }
            step_log_probs.push(lp);
            clusters.push(members);
            rounds.push(round);
        }
        let score = self.score_rounds(store, x, &rounds, self.config.n_importance, rng)?;
        Ok(PosteriorSample {
            labels: labels_from_clusters(n, &clusters),
            score,
            calls: rounds.len(),
            step_log_probs,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, store: &ParamStore, x: &Tensor, rng: &mut R, s: usize) -> Result<Vec<PosteriorSample>> {
        let codes = self.codes(store, x)?;
        (0..s).map(|_| self.sample_one(store, x, &codes, rng)).collect()
    }
}

/// `Σ KL(N(μ_q, σ_q) ‖ N(μ_p, σ_p))` over all entries.
pub fn gaussian_kl(tape: &mut Tape<'_>, mu_q: Var, sig_q: Var, mu_p: Var, sig_p: Var) -> Result<Var> {
    let log_p = tape.log(sig_p);
    let log_q = tape.log(sig_q);
    let dlog = tape.sub(log_p, log_q)?;
    let vq = tape.square(sig_q);
    let dm = tape.sub(mu_q, mu_p)?;
    let dm2 = tape.square(dm);
    let num = tape.add(vq, dm2)?;
    let vp = tape.square(sig_p);
    let vp2 = tape.scale(vp, 2.0);
    let frac = tape.div(num, vp2)?;
    let t = tape.add(dlog, frac)?;
    let t = tape.add_scalar(t, -0.5);
    Ok(tape.sum(t))
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("rows * cols values")
}
