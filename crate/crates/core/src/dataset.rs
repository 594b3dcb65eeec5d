//! Dataset files: one JSON record per line, plus a compact binary cache.
//!
//! Labels in files are one-based. Floating-point values survive both
//! formats bit for bit.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use acd_tensor::Tensor;

use crate::error::{AcdError, Result};
use crate::generate::{random_features, stream_rng, GraphFamily};
use crate::graph::LabeledGraph;

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    dim: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    id: usize,
    n: usize,
    edges: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    labels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    features: Option<FeatureRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
}

const FORMAT: &str = "acd-graphs";
const VERSION: u32 = 1;

/// Graphs plus free-form metadata describing how they were produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: serde_json::Value,
    pub graphs: Vec<LabeledGraph>,
}

fn to_record(id: usize, g: &LabeledGraph) -> GraphRecord {
    GraphRecord {
        id,
        n: g.n_nodes(),
        edges: g.edges().into_iter().map(|(i, j)| [i, j]).collect(),
        labels: g.labels().map(|l| l.iter().map(|c| c + 1).collect()),
        features: g.features().map(|f| FeatureRecord {
            dim: f.cols(),
            data: f.data().to_vec(),
        }),
    }
}

fn from_record(r: GraphRecord) -> Result<LabeledGraph> {
    let edges: Vec<(usize, usize)> = r.edges.iter().map(|e| (e[0], e[1])).collect();
    let mut g = LabeledGraph::from_edges(r.n, &edges)?;
    if let Some(l) = r.labels {
        if l.contains(&0) {
            return Err(AcdError::Parse(format!("graph {}: labels are one-based", r.id)));
        }
        let zero: Vec<usize> = l.iter().map(|c| c - 1).collect();
        g = g.with_labels(&zero)?;
    }
    if let Some(f) = r.features {
        g = g.with_features(Tensor::new(vec![r.n, f.dim], f.data)?)?;
    }
    Ok(g)
}

impl Dataset {
    pub fn new(meta: serde_json::Value, graphs: Vec<LabeledGraph>) -> Self {
        Self { meta, graphs }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            meta: self.meta.clone(),
        };
        let json = |e: serde_json::Error| AcdError::Parse(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?)?;
        for (i, g) in self.graphs.iter().enumerate() {
            writeln!(w, "{}", serde_json::to_string(&to_record(i, g)).map_err(json)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let parse = |lineno: usize, e: serde_json::Error| {
            AcdError::Parse(format!("{}:{}: {e}", path.display(), lineno))
        };
        let first = lines
            .next()
            .ok_or_else(|| AcdError::Parse(format!("{}: empty file", path.display())))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| parse(1, e))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(AcdError::Parse(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                header.format,
                header.version
            )));
        }
        let mut graphs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: GraphRecord = serde_json::from_str(&line).map_err(|e| parse(i + 2, e))?;
            graphs.push(from_record(r)?);
        }
        Ok(Self {
            meta: header.meta,
            graphs,
        })
    }

    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.meta.to_string();
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(meta.as_bytes());
        put_u64(&mut out, self.graphs.len() as u64);
        for g in &self.graphs {
            put_u64(&mut out, g.n_nodes() as u64);
            let edges = g.edges();
            put_u64(&mut out, edges.len() as u64);
            for (i, j) in edges {
                out.extend_from_slice(&(i as u32).to_le_bytes());
                out.extend_from_slice(&(j as u32).to_le_bytes());
            }
            match g.labels() {
                Some(l) => {
                    out.push(1);
                    for &c in l {
                        out.extend_from_slice(&(c as u32).to_le_bytes());
                    }
                }
                None => out.push(0),
            }
            match g.features() {
                Some(f) => {
                    out.push(1);
                    put_u64(&mut out, f.cols() as u64);
                    for v in f.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => out.push(0),
            }
        }
        out
    }

    pub fn from_cache_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err(AcdError::Parse("dataset cache: bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(AcdError::Parse(format!("dataset cache: unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| AcdError::Parse(format!("dataset cache metadata: {e}")))?;
        let count = r.u64()? as usize;
        let mut graphs = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = r.u64()? as usize;
            let m = r.u64()? as usize;
            let mut edges = Vec::with_capacity(m.min(1 << 24));
            for _ in 0..m {
                edges.push((r.u32()? as usize, r.u32()? as usize));
            }
            let mut g = LabeledGraph::from_edges(n, &edges)?;
            if r.take(1)?[0] == 1 {
                let labels = (0..n).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
                g = g.with_labels(&labels)?;
            }
            if r.take(1)?[0] == 1 {
                let dim = r.u64()? as usize;
                let data = (0..n * dim)
                    .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                    .collect::<Result<Vec<_>>>()?;
                g = g.with_features(Tensor::new(vec![n, dim], data)?)?;
            }
            graphs.push(g);
        }
        Ok(Self { meta, graphs })
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_cache_bytes())?;
        Ok(())
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        Self::from_cache_bytes(&std::fs::read(path)?)
    }

    /// Reads the binary cache for `.bin` paths and JSON lines otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_cache(path)
        } else {
            Self::read_jsonl(path)
        }
    }
}

const CACHE_MAGIC: &[u8; 4] = b"ACDG";

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AcdError::Parse(format!("dataset cache truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Graph `index` of the dataset keyed by `seed`. When `random_feature_dim`
/// is set, fixed `N(0, 1)` node features are attached from their own stream.
pub fn generate_graph(
    family: &GraphFamily,
    seed: u64,
    index: u64,
    random_feature_dim: Option<usize>,
) -> Result<LabeledGraph> {
    let mut rng = stream_rng(seed, "graph", index);
    let g = family.generate(&mut rng)?;
    match random_feature_dim {
        Some(d) => {
            let mut frng = stream_rng(seed, "features", index);
            let f = random_features(g.n_nodes(), d, &mut frng);
            g.with_features(f)
        }
        None => Ok(g),
    }
}

/// Graphs `start..start + count`, generated in parallel.
pub fn generate_graphs(
    family: &GraphFamily,
    seed: u64,
    start: u64,
    count: usize,
    random_feature_dim: Option<usize>,
) -> Result<Vec<LabeledGraph>> {
    family.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_graph(family, seed, start + i, random_feature_dim))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::GeneralSbmConfig;

    fn sample() -> Dataset {
        let fam = GraphFamily::GeneralSbm(GeneralSbmConfig {
            n_min: 10,
            n_max: 30,
            ..Default::default()
        });
        let mut graphs = generate_graphs(&fam, 5, 0, 6, Some(3)).unwrap();
        graphs.push(LabeledGraph::empty(3));
        Dataset::new(serde_json::json!({"family": "general-sbm", "seed": 5}), graphs)
    }

    #[test]
    fn jsonl_and_cache_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let j = dir.path().join("d.jsonl");
        ds.write_jsonl(&j).unwrap();
        let back = Dataset::read_jsonl(&j).unwrap();
        assert_eq!(back, ds);
        let bits = |d: &Dataset| -> Vec<u64> {
            d.graphs
                .iter()
                .filter_map(|g| g.features())
                .flat_map(|f| f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bits(&back), bits(&ds));
        let c = dir.path().join("d.bin");
        ds.write_cache(&c).unwrap();
        let cached = Dataset::load(&c).unwrap();
        assert_eq!(cached, ds);
        assert_eq!(cached.to_cache_bytes(), ds.to_cache_bytes());
    }

    #[test]
    fn generation_is_order_independent() {
        let fam = GraphFamily::GeneralSbm(GeneralSbmConfig::default());
        let all = generate_graphs(&fam, 11, 0, 4, None).unwrap();
        let third = generate_graph(&fam, 11, 2, None).unwrap();
        assert_eq!(all[2], third);
    }
}
