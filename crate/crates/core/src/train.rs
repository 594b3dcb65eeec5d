//! Gradient-accumulating training loop with Adam.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use acd_tensor::{AdamConfig, AdamState, Mode, ParamStore, Tape};

use crate::error::{AcdError, Result};
use crate::generate::stream_rng;
use crate::model::{Model, PreparedGraph};

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub adam: AdamState,
    pub batch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, store: ParamStore, lr: f64, batch: usize, seed: u64) -> Self {
        let adam = AdamState::new(&store, AdamConfig::with_lr(lr));
        Self {
            model,
            store,
            adam,
            batch: batch.max(1),
            rng: stream_rng(seed, "train", 0),
        }
    }

    pub fn iteration(&self) -> u64 {
        self.adam.step_count()
    }

    /// Mean loss and averaged gradients of the given graphs, accumulated
    /// into the store; batch-norm running statistics are updated per graph.
    pub fn accumulate(&mut self, graphs: &[&PreparedGraph]) -> Result<f64> {
        self.store.zero_grads();
        let scale = 1.0 / graphs.len() as f64;
        let mut total = 0.0;
        for pg in graphs {
            let (loss, grads, bn) = {
                let mut tape = Tape::new(&self.store, Mode::Train);
                let l = self.model.loss(&mut tape, pg, &mut self.rng)?;
                let loss = tape.value(l).item();
                if !loss.is_finite() {
                    return Err(AcdError::Numerical(format!("loss is {loss}")));
                }
                let grads = tape.backward(l)?.into_params();
                (loss, grads, tape.take_bn_updates())
            };
            if !grads.all_finite() {
                return Err(AcdError::Numerical("non-finite gradient".into()));
            }
            self.store.accumulate_grads(&grads, scale);
            for u in &bn {
                u.apply(&mut self.store);
            }
            total += loss;
        }
        Ok(total * scale)
    }

    /// One Adam step on a uniformly drawn batch from `data`.
    pub fn step(&mut self, data: &[PreparedGraph]) -> Result<f64> {
        if data.is_empty() {
            return Err(crate::error::invalid("empty training set"));
        }
        let idx: Vec<usize> = (0..self.batch).map(|_| self.rng.random_range(0..data.len())).collect();
        let batch: Vec<&PreparedGraph> = idx.iter().map(|&i| &data[i]).collect();
        let loss = self.accumulate(&batch)?;
        self.adam.step(&mut self.store)?;
        Ok(loss)
    }

    /// Mean loss over `data` in eval mode with a fixed noise stream.
    pub fn eval_loss(&self, data: &[PreparedGraph], seed: u64) -> Result<f64> {
        let mut rng = stream_rng(seed, "eval-loss", 0);
        let mut total = 0.0;
        for pg in data {
            let mut tape = Tape::new(&self.store, Mode::Eval);
            let l = self.model.loss(&mut tape, pg, &mut rng)?;
            total += tape.value(l).item();
        }
        Ok(total / data.len().max(1) as f64)
    }
}
