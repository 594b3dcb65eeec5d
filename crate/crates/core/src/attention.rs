//! Multi-head attention blocks over sets: MHA, MAB, PMA and ISAB.
//!
//! MAB has no layer normalisation and a one-hidden-layer ReLU feed-forward
//! of width `d`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use acd_tensor::{Linear, ParamBuilder, ParamId, Tape, Var};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnConfig {
    pub heads: usize,
    pub dim: usize,
    pub inducing: usize,
    pub seeds: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            dim: 128,
            inducing: 32,
            seeds: 1,
        }
    }
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(invalid(format!(
                "attention width {} must be a positive multiple of the head count {}",
                self.dim, self.heads
            )));
        }
        if self.inducing == 0 || self.seeds == 0 {
            return Err(invalid("inducing points and seeds must be at least 1"));
        }
        Ok(())
    }
}

/// Projections of multi-head attention: queries, keys, values and output.
#[derive(Clone, Debug)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Mha {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, dq: usize, dk: usize, dv: usize, cfg: &AttnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            wq: Linear::new(&mut pb.sub("wq"), dq, cfg.dim, false)?,
            wk: Linear::new(&mut pb.sub("wk"), dk, cfg.dim, false)?,
            wv: Linear::new(&mut pb.sub("wv"), dv, cfg.dim, false)?,
            wo: Linear::new(&mut pb.sub("wo"), cfg.dim, cfg.dim, false)?,
            heads: cfg.heads,
            dim: cfg.dim,
        })
    }

    /// Attention of already projected queries over raw keys and values.
    fn attend(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        if tape.shape(k)[0] == 0 {
            return Err(invalid("attention over an empty key set"));
        }
        if tape.shape(k)[0] != tape.shape(v)[0] {
            return Err(invalid(format!(
                "{} keys but {} values",
                tape.shape(k)[0],
                tape.shape(v)[0]
            )));
        }
        let kp = self.wk.forward(tape, k)?;
        let vp = self.wv.forward(tape, v)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let (a, b) = (i * dh, (i + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kp, vp)
            } else {
                (tape.slice(q, 1, a, b)?, tape.slice(kp, 1, a, b)?, tape.slice(vp, 1, a, b)?)
            };
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let w = tape.softmax_rows(s)?;
            outs.push(tape.matmul(w, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        Ok(self.wo.forward(tape, cat)?)
    }

    /// `MHA(q, k, v)`, `n × dim`.
    pub fn forward(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        let qp = self.wq.forward(tape, q)?;
        self.attend(tape, qp, k, v)
    }
}

/// `MAB(x, y) = h + FF(h)` with `h = x W_q + MHA(x, y, y)`.
#[derive(Clone, Debug)]
pub struct Mab {
    pub mha: Mha,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Mab {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, dx: usize, dy: usize, cfg: &AttnConfig) -> Result<Self> {
        Ok(Self {
            mha: Mha::new(&mut pb.sub("mha"), dx, dy, dy, cfg)?,
            ff1: Linear::new(&mut pb.sub("ff1"), cfg.dim, cfg.dim, true)?,
            ff2: Linear::new(&mut pb.sub("ff2"), cfg.dim, cfg.dim, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, y: Var) -> Result<Var> {
        let q = self.mha.wq.forward(tape, x)?;
        let att = self.mha.attend(tape, q, y, y)?;
        let h = tape.add(q, att)?;
        let f = self.ff1.forward(tape, h)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, f)?;
        Ok(tape.add(h, f)?)
    }
}

/// Draws `N(0, 1/d)` entries for seed and inducing-point matrices.
fn seed_matrix<R: Rng>(pb: &mut ParamBuilder<'_, R>, name: &str, rows: usize, d: usize) -> Result<ParamId> {
    Ok(pb.normal(name, &[rows, d], (1.0 / d as f64).sqrt())?)
}

/// Pooling by attention from trainable seeds: `m × dim`, invariant to the
/// order of the pooled rows.
#[derive(Clone, Debug)]
pub struct Pma {
    pub seeds: ParamId,
    pub mab: Mab,
}

impl Pma {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, dx: usize, cfg: &AttnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            seeds: seed_matrix(pb, "seeds", cfg.seeds, cfg.dim)?,
            mab: Mab::new(&mut pb.sub("mab"), cfg.dim, dx, cfg)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if tape.shape(x)[0] == 0 {
            return Err(invalid("PMA over an empty set"));
        }
        let e = tape.param(self.seeds);
        self.mab.forward(tape, e, x)
    }
}

/// Induced self-attention `MAB(x, MAB(s, x))`: `n × dim`, equivariant to the
/// order of the rows of `x`.
#[derive(Clone, Debug)]
pub struct Isab {
    pub inducing: ParamId,
    pub mab_in: Mab,
    pub mab_out: Mab,
}

impl Isab {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, dx: usize, cfg: &AttnConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            inducing: seed_matrix(pb, "inducing", cfg.inducing, cfg.dim)?,
            mab_in: Mab::new(&mut pb.sub("mab_in"), cfg.dim, dx, cfg)?,
            mab_out: Mab::new(&mut pb.sub("mab_out"), dx, cfg.dim, cfg)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        if tape.shape(x)[0] == 0 {
            return Err(invalid("ISAB over an empty set"));
        }
        let s = tape.param(self.inducing);
        let h = self.mab_in.forward(tape, s, x)?;
        self.mab_out.forward(tape, x, h)
    }
}
