//! Message-passing node encoders: GraphSAGE with mean aggregation and
//! GatedGCN with explicitly updated edge gates.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use acd_tensor::{BatchNorm, CsrMatrix, Linear, ParamBuilder, Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::graph::LabeledGraph;

/// Small constant in the gate normaliser.
pub const GATE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    GraphSage,
    GatedGcn,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "graphsage" => Ok(Self::GraphSage),
            "gatedgcn" => Ok(Self::GatedGcn),
            other => Err(format!("unknown encoder `{other}` (expected graphsage or gatedgcn)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnConfig {
    pub variant: EncoderKind,
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            variant: EncoderKind::GatedGcn,
            layers: 4,
            hidden: 128,
            input_dim: 20,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.input_dim == 0 {
            return Err(invalid("encoder layers and dimensions must be positive"));
        }
        Ok(())
    }
}

/// Sparse operators derived from a graph's adjacency, built once per graph.
#[derive(Clone, Debug)]
pub struct GraphStructure {
    pub n: usize,
    /// `N × N`, row `i` averages the neighbours of `i` (zero row if isolated).
    pub mean_agg: Arc<CsrMatrix>,
    /// Arc `a` carries a message from `src[a]` into `dst[a]`; every
    /// undirected edge appears in both directions.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `N × E`, sums arc rows into their target node.
    pub arc_sum: Arc<CsrMatrix>,
}

impl GraphStructure {
    pub fn new(g: &LabeledGraph) -> Self {
        let n = g.n_nodes();
        let mut mean_rows = Vec::with_capacity(n);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for i in 0..n {
            let nb = g.neighbors(i);
            let w = if nb.is_empty() { 0.0 } else { 1.0 / nb.len() as f64 };
            mean_rows.push(nb.iter().map(|&j| (j, w)).collect::<Vec<_>>());
            for &j in nb {
                src.push(j);
                dst.push(i);
            }
        }
        let triplets: Vec<(usize, usize, f64)> = dst.iter().enumerate().map(|(a, &i)| (i, a, 1.0)).collect();
        Self {
            n,
            mean_agg: Arc::new(CsrMatrix::from_rows(n, &mean_rows)),
            arc_sum: Arc::new(CsrMatrix::from_triplets(n, src.len(), &triplets)),
            src,
            dst,
        }
    }

    pub fn n_arcs(&self) -> usize {
        self.src.len()
    }
}

#[derive(Clone, Debug)]
struct SageLayer {
    u: Linear,
    v: Linear,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct GatedLayer {
    a: Linear,
    b: Linear,
    c: Linear,
    u: Linear,
    v: Linear,
    bn_h: BatchNorm,
    bn_e: BatchNorm,
}

#[derive(Clone, Debug)]
enum Layers {
    Sage(Vec<SageLayer>),
    Gated(Vec<GatedLayer>),
}

/// Input lift followed by `L` message-passing layers.
#[derive(Clone, Debug)]
pub struct GcnEncoder {
    pub config: GcnConfig,
    pub lift: Linear,
    layers: Layers,
}

impl GcnEncoder {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, config: &GcnConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let lift = Linear::new(&mut pb.sub("lift"), config.input_dim, d, true)?;
        let layers = match config.variant {
            EncoderKind::GraphSage => {
                let mut v = Vec::new();
                for l in 0..config.layers {
                    let mut p = pb.sub(&format!("sage{l}"));
                    v.push(SageLayer {
                        u: Linear::new(&mut p.sub("u"), d, d, false)?,
                        v: Linear::new(&mut p.sub("v"), d, d, false)?,
                        bn: BatchNorm::new(&mut p.sub("bn"), d)?,
                    });
                }
                Layers::Sage(v)
            }
            EncoderKind::GatedGcn => {
                let mut v = Vec::new();
                for l in 0..config.layers {
                    let mut p = pb.sub(&format!("gated{l}"));
                    v.push(GatedLayer {
                        a: Linear::new(&mut p.sub("a"), d, d, false)?,
                        b: Linear::new(&mut p.sub("b"), d, d, false)?,
                        c: Linear::new(&mut p.sub("c"), d, d, false)?,
                        u: Linear::new(&mut p.sub("u"), d, d, false)?,
                        v: Linear::new(&mut p.sub("v"), d, d, false)?,
                        bn_h: BatchNorm::new(&mut p.sub("bn_h"), d)?,
                        bn_e: BatchNorm::new(&mut p.sub("bn_e"), d)?,
                    });
                }
                Layers::Gated(v)
            }
        };
        Ok(Self {
            config: config.clone(),
            lift,
            layers,
        })
    }

    /// Affine lift of the raw node features to the hidden width.
    pub fn embed_input(&self, tape: &mut Tape<'_>, features: Var) -> Result<Var> {
        let s = tape.shape(features);
        if s.len() != 2 || s[1] != self.config.input_dim {
            return Err(invalid(format!(
                "node features of shape {s:?}, encoder expects width {}",
                self.config.input_dim
            )));
        }
        Ok(self.lift.forward(tape, features)?)
    }

    /// Node embeddings, `N × hidden`.
    pub fn forward(&self, tape: &mut Tape<'_>, gs: &GraphStructure, features: Var) -> Result<Var> {
        let h = self.embed_input(tape, features)?;
        self.propagate(tape, gs, h)
    }

    /// The message-passing layers applied to lifted features `h0`.
    pub fn propagate(&self, tape: &mut Tape<'_>, gs: &GraphStructure, h0: Var) -> Result<Var> {
        match &self.layers {
            Layers::Sage(layers) => sage_forward(tape, layers, gs, h0),
            Layers::Gated(layers) => gated_forward(tape, layers, gs, h0, self.config.hidden),
        }
    }
}

fn sage_forward(tape: &mut Tape<'_>, layers: &[SageLayer], gs: &GraphStructure, h0: Var) -> Result<Var> {
    let mut h = h0;
    for l in layers {
        let self_term = l.u.forward(tape, h)?;
        let nbr = tape.sparse_matmul(&gs.mean_agg, h)?;
        let nbr = l.v.forward(tape, nbr)?;
        let s = tape.add(self_term, nbr)?;
        let s = l.bn.forward(tape, s)?;
        h = tape.relu(s);
    }
    Ok(h)
}

fn gated_forward(tape: &mut Tape<'_>, layers: &[GatedLayer], gs: &GraphStructure, h0: Var, d: usize) -> Result<Var> {
    let mut h = h0;
    let n_arcs = gs.n_arcs();
    let mut e_hat = tape.constant(Tensor::filled(&[n_arcs, d], 1.0));
    for l in layers {
        let uh = l.u.forward(tape, h)?;
        let pre = if n_arcs == 0 {
            uh
        } else {
            // the maps have no bias, so projecting nodes before gathering
            // onto arcs gives the same result with fewer products
            let ah = l.a.forward(tape, h)?;
            let ah = tape.gather_rows(ah, &gs.dst)?;
            let bh = l.b.forward(tape, h)?;
            let bh = tape.gather_rows(bh, &gs.src)?;
            let ce = l.c.forward(tape, e_hat)?;
            let s = tape.add(ah, bh)?;
            let s = tape.add(s, ce)?;
            let s = l.bn_e.forward(tape, s)?;
            let s = tape.relu(s);
            e_hat = tape.add(e_hat, s)?;

            let sig = tape.sigmoid(e_hat);
            let denom = tape.sparse_matmul(&gs.arc_sum, sig)?;
            let denom = tape.add_scalar(denom, GATE_EPS);
            let denom = tape.gather_rows(denom, &gs.dst)?;
            let gate = tape.div(sig, denom)?;
            let vh = l.v.forward(tape, h)?;
            let vh = tape.gather_rows(vh, &gs.src)?;
            let msg = tape.mul(gate, vh)?;
            let agg = tape.sparse_matmul(&gs.arc_sum, msg)?;
            tape.add(uh, agg)?
        };
        let s = l.bn_h.forward(tape, pre)?;
        let s = tape.relu(s);
        h = tape.add(h, s)?;
    }
    Ok(h)
}
