//! Reusable differentiable building blocks: affine maps, PReLU MLPs and
//! batch normalisation.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    prefix: String,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self {
            store,
            prefix: String::new(),
            rng,
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            prefix,
            rng: self.rng,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, t, trainable)
    }

    /// Uniform Glorot initialisation for a `fan_in × fan_out` weight.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(self.rng)).collect();
        let t = Tensor::new(vec![fan_in, fan_out], data)?;
        self.tensor(name, t, true)
    }

    /// Entries drawn from `N(0, std²)`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        self.tensor(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<ParamId> {
        self.tensor(name, Tensor::filled(shape, value), trainable)
    }
}

/// `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = pb.glorot("w", in_dim, out_dim)?;
        let bias = if bias {
            Some(pb.constant("b", &[out_dim], 0.0, true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with a learned PReLU between consecutive layers
/// (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slopes: Vec<ParamId>,
}

impl Mlp {
    /// `depth` linear layers: `in → hidden → … → hidden → out`.
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
    ) -> Result<Self> {
        assert!(depth >= 1, "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(depth);
        let mut slopes = Vec::with_capacity(depth - 1);
        for i in 0..depth {
            let din = if i == 0 { in_dim } else { hidden };
            let dout = if i + 1 == depth { out_dim } else { hidden };
            layers.push(Linear::new(&mut pb.sub(&format!("l{i}")), din, dout, true)?);
            if i + 1 < depth {
                slopes.push(pb.constant(&format!("prelu{i}"), &[1], 0.25, true)?);
            }
        }
        Ok(Self { layers, slopes })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if let Some(&slope) = self.slopes.get(i) {
                let a = tape.param(slope);
                h = tape.prelu(h, a)?;
            }
        }
        Ok(h)
    }
}

/// Batch normalisation over rows with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[dim], 1.0, true)?,
            beta: pb.constant("beta", &[dim], 0.0, true)?,
            running_mean: pb.constant("running_mean", &[dim], 0.0, false)?,
            running_var: pb.constant("running_var", &[dim], 1.0, false)?,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.batch_norm(
            x,
            g,
            b,
            self.running_mean,
            self.running_var,
            self.momentum,
            self.eps,
        )
    }
}
