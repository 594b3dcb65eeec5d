//! Deterministic clusterwise baseline: the attention clusterwise backbone
//! without latent variables or previous-cluster summaries. Each round
//! predicts membership bits directly from `[ū_a, D, U]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use acd_tensor::{Mlp, Mode, ParamBuilder, ParamStore, Tape, Tensor, Var};

use super::rounds::AttnRoundEncoder;
use super::{labels_from_clusters, log_sigmoid, random_rounds, PosteriorSample, Round};
use crate::attention::AttnConfig;
use crate::error::{invalid, Result};
use crate::graph::ClusterSets;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DacConfig {
    pub hidden: usize,
    pub depth_u: usize,
    pub depth_phi: usize,
    pub attn: AttnConfig,
}

impl DacConfig {
    pub fn new(hidden: usize, attn: AttnConfig) -> Self {
        Self {
            hidden,
            depth_u: 3,
            depth_phi: 4,
            attn,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DacHead {
    pub config: DacConfig,
    d_in: usize,
    u: Mlp,
    enc: AttnRoundEncoder,
    phi: Mlp,
}

impl DacHead {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, d_in: usize, config: &DacConfig) -> Result<Self> {
        config.attn.validate()?;
        let d = config.hidden;
        if config.attn.dim != d || config.attn.seeds != 1 {
            return Err(invalid("DAC attention needs width equal to hidden and one PMA seed"));
        }
        Ok(Self {
            config: config.clone(),
            d_in,
            u: Mlp::new(&mut pb.sub("u"), d_in, d, d, config.depth_u)?,
            enc: AttnRoundEncoder::new(&mut pb.sub("enc"), d, &config.attn)?,
            phi: Mlp::new(&mut pb.sub("phi"), 3 * d, d, 1, config.depth_phi)?,
        })
    }

    pub fn point_codes(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if tape.shape(x).get(1) != Some(&self.d_in) {
            return Err(invalid(format!("embeddings of shape {:?}, head expects width {}", tape.shape(x), self.d_in)));
        }
        Ok(self.u.forward(tape, x)?)
    }

    /// Membership logits of the available points of one round, `m × 1`.
    pub fn round_logits(&self, tape: &mut Tape<'_>, ux: Var, anchor: usize, available: &[usize]) -> Result<Var> {
        let codes = self.enc.encode(tape, ux, anchor, available)?;
        let Some(ua) = codes.ua else {
            return Err(invalid("round without available points"));
        };
        let m = available.len();
        let d = tape.broadcast_rows(codes.d, m)?;
        let u = tape.broadcast_rows(codes.u, m)?;
        let inp = tape.concat(&[ua, d, u], 1)?;
        Ok(self.phi.forward(tape, inp)?)
    }

    /// Binary cross-entropy summed over the rounds' available points.
    pub fn loss_rounds(&self, tape: &mut Tape<'_>, x: Var, rounds: &[Round]) -> Result<Var> {
        let ux = self.point_codes(tape, x)?;
        let mut total = tape.constant(Tensor::scalar(0.0));
        for r in rounds.iter().filter(|r| !r.available.is_empty()) {
            let l = self.round_logits(tape, ux, r.anchor, &r.available)?;
            let b: Vec<f64> = r.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let b = tape.constant(Tensor::new(vec![b.len(), 1], b)?);
            let bl = tape.mul(b, l)?;
            let sp = tape.softplus(l);
            let nll = tape.sub(sp, bl)?;
            let s = tape.sum(nll);
            total = tape.add(total, s)?;
        }
        Ok(total)
    }

    /// Loss with a uniform cluster order and uniform anchors.
    pub fn loss<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, sets: &ClusterSets, rng: &mut R) -> Result<Var> {
        let rounds = random_rounds(sets, rng);
        self.loss_rounds(tape, x, &rounds)
    }

    fn codes(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(store, Mode::Eval);
        let xv = tape.constant(x.clone());
        let ux = self.point_codes(&mut tape, xv)?;
        Ok(tape.value(ux).clone())
    }

    /// Clusters with the given anchor choice; a point joins when its
    /// membership probability is strictly above one half.
    fn run<R: Rng + ?Sized>(&self, store: &ParamStore, x: &Tensor, ux: &Tensor, rng: &mut R) -> Result<PosteriorSample> {
        let n = x.rows();
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut clusters = Vec::new();
        let mut step_log_probs = Vec::new();
        let mut score = 0.0;
        while !remaining.is_empty() {
            let anchor = remaining.swap_remove(rng.random_range(0..remaining.len()));
            remaining.sort_unstable();
            score -= ((remaining.len() + 1) as f64).ln();
            let mut members = vec![anchor];
            let mut lp = 0.0;
            if !remaining.is_empty() {
                let mut tape = Tape::new(store, Mode::Eval);
                let uv = tape.constant(ux.clone());
                let l = self.round_logits(&mut tape, uv, anchor, &remaining)?;
                for (&i, &li) in remaining.iter().zip(tape.value(l).data()) {
                    if li > 0.0 {
                        members.push(i);
                        lp += log_sigmoid(li);
                    } else {
                        lp += log_sigmoid(-li);
                    }
                }
            }
            score += lp;
            members.sort_unstable();
            remaining.retain(|i| members.binary_search(i).is_err());
            step_log_probs.push(lp);
            clusters.push(members);
        }
        Ok(PosteriorSample {
            labels: labels_from_clusters(n, &clusters),
            score,
            calls: clusters.len(),
            step_log_probs,
        })
    }

    /// One deterministic clustering given the anchor stream.
    pub fn cluster<R: Rng + ?Sized>(&self, store: &ParamStore, x: &Tensor, rng: &mut R) -> Result<PosteriorSample> {
        let ux = self.codes(store, x)?;
        self.run(store, x, &ux, rng)
    }

    /// `s` clusterings that differ only through their anchors.
    pub fn sample<R: Rng + ?Sized>(&self, store: &ParamStore, x: &Tensor, rng: &mut R, s: usize) -> Result<Vec<PosteriorSample>> {
        let ux = self.codes(store, x)?;
        (0..s).map(|_| self.run(store, x, &ux, rng)).collect()
    }
}
