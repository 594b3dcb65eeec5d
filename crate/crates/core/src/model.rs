//! Encoder plus clustering head, trained end to end on labeled graphs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use acd_tensor::{Mode, ParamBuilder, ParamStore, Tape, Tensor, Var};

use crate::attention::AttnConfig;
use crate::encoder::{EncoderKind, GcnConfig, GcnEncoder, GraphStructure};
use crate::error::{invalid, Result};
use crate::generate::{random_features, stream_rng};
use crate::graph::{ClusterSets, LabeledGraph};
use crate::heads::ccp::{CcpConfig, CcpHead};
use crate::heads::dac::{DacConfig, DacHead};
use crate::heads::ncp::{NcpConfig, NcpHead};
use crate::heads::PosteriorSample;
use crate::posenc::{eval_encoding, flip_signs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Ncp,
    NcpAttn,
    Ccp,
    CcpAttn,
    Dac,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Ncp => "ncp",
            HeadKind::NcpAttn => "ncp-attn",
            HeadKind::Ccp => "ccp",
            HeadKind::CcpAttn => "ccp-attn",
            HeadKind::Dac => "dac",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ncp" => Ok(HeadKind::Ncp),
            "ncp-attn" => Ok(HeadKind::NcpAttn),
            "ccp" => Ok(HeadKind::Ccp),
            "ccp-attn" => Ok(HeadKind::CcpAttn),
            "dac" => Ok(HeadKind::Dac),
            other => Err(format!("unknown model `{other}` (expected ncp, ncp-attn, ccp, ccp-attn or dac)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Laplacian eigenvector encoding.
    Posenc,
    /// Per-node Gaussian features, fixed per graph.
    Random,
}

impl std::str::FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "posenc" => Ok(FeatureKind::Posenc),
            "random" => Ok(FeatureKind::Random),
            other => Err(format!("unknown features `{other}` (expected posenc or random)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub encoder: EncoderKind,
    pub features: FeatureKind,
    pub layers: usize,
    pub hidden: usize,
    /// Width of the input features (number of eigenvectors for `posenc`).
    pub input_dim: usize,
    /// Latent width of CCP; defaults to `hidden`.
    pub d_z: Option<usize>,
    pub attn_heads: usize,
    pub inducing: usize,
    pub n_importance: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::CcpAttn,
            encoder: EncoderKind::GatedGcn,
            features: FeatureKind::Posenc,
            layers: 4,
            hidden: 128,
            input_dim: 20,
            d_z: None,
            attn_heads: 4,
            inducing: 32,
            n_importance: 16,
        }
    }
}

impl ModelConfig {
    pub fn gcn(&self) -> GcnConfig {
        GcnConfig {
            variant: self.encoder,
            layers: self.layers,
            hidden: self.hidden,
            input_dim: self.input_dim,
        }
    }

    pub fn attn(&self) -> AttnConfig {
        AttnConfig {
            heads: self.attn_heads,
            dim: self.hidden,
            inducing: self.inducing,
            seeds: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gcn().validate()?;
        if self.d_z == Some(0) {
            return Err(invalid("d_z must be positive"));
        }
        if self.n_importance == 0 {
            return Err(invalid("n_importance must be at least 1"));
        }
        if matches!(self.head, HeadKind::NcpAttn | HeadKind::CcpAttn | HeadKind::Dac) {
            self.attn().validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Ncp(NcpHead),
    Ccp(CcpHead),
    Dac(DacHead),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: GcnEncoder,
    pub head: Head,
}

/// A graph with everything that stays fixed across forward passes.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub graph: LabeledGraph,
    pub structure: GraphStructure,
    /// Eval-mode input features.
    pub features: Tensor,
    pub sets: Option<ClusterSets>,
}

impl PreparedGraph {
    /// Builds input features of the configured kind. Random features come
    /// from the graph when it carries them with the right width, and are
    /// otherwise drawn from the `features` stream of `(seed, index)`.
    pub fn new(graph: LabeledGraph, config: &ModelConfig, seed: u64, index: u64) -> Result<Self> {
        let n = graph.n_nodes();
        if n == 0 {
            return Err(invalid("graph without nodes"));
        }
        let features = match config.features {
            FeatureKind::Posenc => eval_encoding(&graph, config.input_dim),
            FeatureKind::Random => match graph.features() {
                Some(f) if f.cols() == config.input_dim => f.clone(),
                _ => random_features(n, config.input_dim, &mut stream_rng(seed, "features", index)),
            },
        };
        let sets = graph.cluster_sets();
        Ok(Self {
            structure: GraphStructure::new(&graph),
            graph,
            features,
            sets,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }
}

pub fn prepare_all(graphs: &[LabeledGraph], config: &ModelConfig, seed: u64) -> Result<Vec<PreparedGraph>> {
    graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| PreparedGraph::new(g.clone(), config, seed, i as u64))
        .collect()
}

impl Model {
    /// Registers every parameter in a fresh store.
    pub fn build<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, rng);
        let encoder = GcnEncoder::new(&mut pb.sub("encoder"), &config.gcn())?;
        let d = config.hidden;
        let attn = config.attn();
        let mut hb = pb.sub("head");
        let head = match config.head {
            HeadKind::Ncp => Head::Ncp(NcpHead::new(&mut hb, d, &NcpConfig::new(d, None))?),
            HeadKind::NcpAttn => Head::Ncp(NcpHead::new(&mut hb, d, &NcpConfig::new(d, Some(attn)))?),
            HeadKind::Ccp | HeadKind::CcpAttn => {
                let mut c = CcpConfig::new(d, (config.head == HeadKind::CcpAttn).then_some(attn));
                c.d_z = config.d_z.unwrap_or(d);
                c.n_importance = config.n_importance;
                Head::Ccp(CcpHead::new(&mut hb, d, &c)?)
            }
            HeadKind::Dac => Head::Dac(DacHead::new(&mut hb, d, &DacConfig::new(d, attn))?),
        };
        Ok((
            Self {
                config: config.clone(),
                encoder,
                head,
            },
            store,
        ))
    }

    /// Node embeddings. In train mode positional encodings get fresh column
    /// signs from `rng`.
    pub fn embed<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, pg: &PreparedGraph, rng: &mut R) -> Result<Var> {
        let feats = match (self.config.features, tape.mode()) {
            (FeatureKind::Posenc, Mode::Train) => flip_signs(&pg.features, rng),
            _ => pg.features.clone(),
        };
        let f = tape.constant(feats);
        self.encoder.forward(tape, &pg.structure, f)
    }

    /// Training loss of one labeled graph.
    pub fn loss<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, pg: &PreparedGraph, rng: &mut R) -> Result<Var> {
        let sets = pg.sets.as_ref().ok_or_else(|| invalid("training graph without labels"))?;
        let x = self.embed(tape, pg, rng)?;
        match &self.head {
            Head::Ncp(h) => {
                let labels = pg.graph.labels().expect("sets imply labels");
                h.nll(tape, x, labels, rng)
            }
            Head::Ccp(h) => h.neg_elbo(tape, x, sets, rng),
            Head::Dac(h) => h.loss(tape, x, sets, rng),
        }
    }

    /// Eval-mode embeddings as plain values.
    pub fn embeddings(&self, store: &ParamStore, pg: &PreparedGraph) -> Result<Tensor> {
        let mut tape = Tape::new(store, Mode::Eval);
        let mut unused = stream_rng(0, "unused", 0);
        let x = self.embed(&mut tape, pg, &mut unused)?;
        Ok(tape.value(x).clone())
    }

    /// Draws from the head given embeddings.
    pub fn sample_from<R: Rng + ?Sized>(&self, store: &ParamStore, x: &Tensor, rng: &mut R, s: usize) -> Result<Vec<PosteriorSample>> {
        match &self.head {
            Head::Ncp(h) => h.sample(store, x, rng, s),
            Head::Ccp(h) => h.sample(store, x, rng, s),
            Head::Dac(h) => h.sample(store, x, rng, s),
        }
    }

    /// `s` posterior samples, sample `i` using the `sample` stream
    /// `(seed, i)`. Samples are independent of the worker count.
    pub fn sample(&self, store: &ParamStore, pg: &PreparedGraph, seed: u64, s: usize) -> Result<Vec<PosteriorSample>> {
        let x = self.embeddings(store, pg)?;
        (0..s)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, "sample", i as u64);
                Ok(self.sample_from(store, &x, &mut rng, 1)?.remove(0))
            })
            .collect()
    }
}
