//! Training and inference shared by the command-line verbs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use acd_core::dataset::{generate_graphs, Dataset};
use acd_core::generate::stream_rng;
use acd_core::graph::{num_clusters, LabeledGraph};
use acd_core::heads::PosteriorSample;
use acd_core::metrics::{ami, ari, map_index};
use acd_core::model::{prepare_all, Model, ModelConfig, PreparedGraph};
use acd_core::train::Trainer;
use acd_tensor::{Checkpoint, ParamStore};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, Result};

/// Graphs of one split, read from file or generated from the split seed.
pub fn load_split(cfg: &ExperimentConfig, split: &str, src: &DataSource) -> Result<Vec<LabeledGraph>> {
    match (&src.path, &src.family) {
        (Some(p), _) => {
            let ds = Dataset::load(p).map_err(|e| CliError::Run(format!("{}: {e}", p.display())))?;
            if src.count > 0 && src.count < ds.graphs.len() {
                return Ok(ds.graphs[..src.count].to_vec());
            }
            Ok(ds.graphs)
        }
        (None, Some(f)) => Ok(generate_graphs(f, cfg.split_seed(split), 0, src.count, None)?),
        (None, None) => Err(CliError::config(format!("data.{split} has no source"))),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    iteration: u64,
    config_hash: String,
}

pub fn save_checkpoint(path: &Path, model: &Model, store: &ParamStore, iteration: u64, config_hash: &str) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        iteration,
        config_hash: config_hash.to_string(),
    };
    Checkpoint::new(serde_json::to_string(&meta)?, store.clone()).save(path)?;
    Ok(())
}

/// Rebuilds the model recorded in a checkpoint. When `expected` is given
/// the recorded architecture must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, ParamStore, u64)> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::config(format!("checkpoint {}: {e}", path.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&ck.metadata).map_err(|e| CliError::config(format!("checkpoint {} metadata: {e}", path.display())))?;
    if let Some(want) = expected {
        if want != &meta.model {
            return Err(CliError::config(format!(
                "checkpoint holds a {}/{:?} model of width {}, config asks for {}/{:?} of width {}",
                meta.model.head.name(),
                meta.model.encoder,
                meta.model.hidden,
                want.head.name(),
                want.encoder,
                want.hidden
            )));
        }
    }
    let (model, mut store) = Model::build(&meta.model, &mut stream_rng(0, "init", 0))?;
    store
        .load_from(&ck.params)
        .map_err(|e| CliError::config(format!("checkpoint {} does not fit its model: {e}", path.display())))?;
    Ok((model, store, meta.iteration))
}

/// Inference outcome of one graph.
#[derive(Clone, Debug)]
pub struct GraphResult {
    pub graph_id: usize,
    pub n: usize,
    pub k_true: Option<usize>,
    pub map: PosteriorSample,
    pub ami: Option<f64>,
    pub ari: Option<f64>,
    pub samples: Vec<PosteriorSample>,
}

impl GraphResult {
    pub fn k_map(&self) -> usize {
        self.map.num_clusters()
    }

    pub fn sample_ks(&self) -> Vec<usize> {
        self.samples.iter().map(PosteriorSample::num_clusters).collect()
    }
}

/// Seed of the samples drawn for graph `index`.
pub fn graph_seed(seed: u64, index: usize) -> u64 {
    stream_rng(seed, "infer", index as u64).random()
}

pub fn infer_graphs(model: &Model, store: &ParamStore, graphs: &[PreparedGraph], samples: usize, seed: u64) -> Result<Vec<GraphResult>> {
    graphs
        .par_iter()
        .enumerate()
        .map(|(i, pg)| {
            let draws = model.sample(store, pg, graph_seed(seed, i), samples)?;
            let map = draws[map_index(&draws)?].clone();
            let truth = pg.graph.labels();
            let (a, r) = match truth {
                Some(t) => (Some(ami(&map.labels, t)?), Some(ari(&map.labels, t)?)),
                None => (None, None),
            };
            Ok(GraphResult {
                graph_id: i,
                n: pg.n_nodes(),
                k_true: truth.map(num_clusters),
                map,
                ami: a,
                ari: r,
                samples: draws,
            })
        })
        .collect()
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub status: String,
    pub iterations: u64,
    pub losses: Vec<f64>,
    /// `(iteration, mean validation AMI)` at every validation point.
    pub validation: Vec<(u64, f64)>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub seconds_prepare: f64,
    pub seconds_train: f64,
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub report: TrainReport,
}

/// Trains per the configuration, writing checkpoints into `out`. A
/// non-finite loss, gradient or parameter stops training; the parameters
/// from before the failing step are saved as `last.ckpt` and the error is
/// returned together with the partial report.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> std::result::Result<Trained, (CliError, Option<TrainReport>)> {
    let fail = |e: CliError| (e, None);
    let hash = cfg.hash();
    let t0 = Instant::now();
    let train_graphs = load_split(cfg, "train", &cfg.data.train).map_err(fail)?;
    let train_set = prepare_all(&train_graphs, &cfg.model, cfg.split_seed("train")).map_err(|e| fail(e.into()))?;
    if train_set.iter().any(|g| g.sets.is_none()) {
        return Err(fail(CliError::Run("training graphs must carry labels".into())));
    }
    let val_set = match &cfg.data.val {
        Some(src) if cfg.train.validate_every > 0 => {
            let g = load_split(cfg, "val", src).map_err(fail)?;
            prepare_all(&g, &cfg.model, cfg.split_seed("val")).map_err(|e| fail(e.into()))?
        }
        _ => Vec::new(),
    };
    let seconds_prepare = t0.elapsed().as_secs_f64();

    let (model, store) = Model::build(&cfg.model, &mut stream_rng(cfg.seed, "init", 0)).map_err(|e| fail(e.into()))?;
    let mut trainer = Trainer::new(model, store, cfg.learning_rate(), cfg.train.batch, cfg.seed);
    let mut report = TrainReport {
        status: "running".into(),
        iterations: 0,
        losses: Vec::new(),
        validation: Vec::new(),
        best_checkpoint: None,
        final_checkpoint: out.join("model.ckpt"),
        seconds_prepare,
        seconds_train: 0.0,
    };
    let t1 = Instant::now();
    let mut best = f64::NEG_INFINITY;
    for it in 1..=cfg.train.iterations {
        let before = trainer.store.clone();
        let stepped = trainer.step(&train_set).and_then(|loss| {
            if trainer.store.flat_trainable().iter().all(|v| v.is_finite()) {
                Ok(loss)
            } else {
                Err(acd_core::AcdError::Numerical("non-finite parameters after the update".into()))
            }
        });
        let loss = match stepped {
            Ok(l) => l,
            Err(e) => {
                let last = out.join("last.ckpt");
                let saved = save_checkpoint(&last, &trainer.model, &before, it - 1, &hash);
                report.status = "aborted".into();
                report.seconds_train = t1.elapsed().as_secs_f64();
                let err = match (CliError::from(e), saved) {
                    (CliError::Numerical(m), Ok(())) => {
                        CliError::Numerical(format!("iteration {it}: {m}; parameters of iteration {} kept in {}", it - 1, last.display()))
                    }
                    (other, _) => other,
                };
                return Err((err, Some(report)));
            }
        };
        report.losses.push(loss);
        report.iterations = it;
        if cfg.train.checkpoint_every > 0 && it % cfg.train.checkpoint_every == 0 {
            save_checkpoint(&out.join("last.ckpt"), &trainer.model, &trainer.store, it, &hash).map_err(fail)?;
        }
        if cfg.train.validate_every > 0 && it % cfg.train.validate_every == 0 && !val_set.is_empty() {
            let res = infer_graphs(&trainer.model, &trainer.store, &val_set, cfg.train.val_samples, cfg.seed).map_err(fail)?;
            let score = mean(res.iter().filter_map(|r| r.ami));
            report.validation.push((it, score));
            if score > best {
                best = score;
                let p = out.join("best.ckpt");
                save_checkpoint(&p, &trainer.model, &trainer.store, it, &hash).map_err(fail)?;
                report.best_checkpoint = Some(p);
            }
        }
    }
    report.seconds_train = t1.elapsed().as_secs_f64();
    report.status = "completed".into();
    save_checkpoint(&report.final_checkpoint, &trainer.model, &trainer.store, report.iterations, &hash).map_err(fail)?;
    Ok(Trained {
        model: trainer.model,
        store: trainer.store,
        report,
    })
}
