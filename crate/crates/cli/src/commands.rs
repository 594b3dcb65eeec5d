//! Argument parsing and the command-line verbs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use acd_core::dataset::{generate_graphs, Dataset};
use acd_core::generate::{stream_rng, GeneralSbmConfig, GraphFamily};
use acd_core::graph::LabeledGraph;
use acd_core::snap::extract_snap_subgraphs;
use acd_core::metrics::{ami, ece};
use acd_core::model::{prepare_all, Model, PreparedGraph};
use acd_tensor::ParamStore;
use rand::Rng;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{self, infer_graphs, load_checkpoint, load_split, mean, GraphResult, TrainReport};
use crate::svg;

#[derive(Parser, Debug)]
#[command(name = "acd", version, about = "Amortized community detection on graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Posterior samples per graph.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset file replacing the configured test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyChoice {
    GeneralSbm,
    SymSbm,
    LogSbm,
    Planted,
    /// Subgraphs of the network named in the `[snap]` config section.
    Snap,
}

#[derive(Args, Clone, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Graph family of every generated split. The general SBM falls back to
    /// its default parameters; other families must match the config.
    #[arg(long, value_enum)]
    pub family: Option<FamilyChoice>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the train, validation and test datasets.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints, a loss log and a manifest.
    Train(Common),
    /// Sample posteriors on the test split and score the MAP clusterings.
    Infer(Common),
    /// Mean AMI over a grid of log-degree SBMs, with the recovery threshold.
    Sweep(Common),
    /// Expected calibration error of the inferred number of clusters.
    Calibrate(Common),
    /// Inference time and network calls against the number of samples.
    Bench(Common),
    /// Spread of the inferred number of clusters per test graph.
    Uncertainty(Common),
}

/// Record of one command run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub status: String,
    pub loss_log: Vec<f64>,
    pub validation: Vec<(u64, f64)>,
    pub timings: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            checkpoint: None,
            best_checkpoint: None,
            status: "completed".into(),
            loss_log: Vec::new(),
            validation: Vec::new(),
            timings: BTreeMap::new(),
            metrics: BTreeMap::new(),
        }
    }

    fn with_train(mut self, r: &TrainReport) -> Self {
        self.status = r.status.clone();
        self.checkpoint = Some(r.final_checkpoint.clone());
        self.best_checkpoint = r.best_checkpoint.clone();
        self.loss_log = r.losses.clone();
        self.validation = r.validation.clone();
        self.timings.insert("prepare_seconds".into(), r.seconds_prepare);
        self.timings.insert("train_seconds".into(), r.seconds_train);
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?)
    }
}

/// Parses arguments and runs, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("acd: {e}");
            e.exit_code()
        }
    }
}

fn worker_count() -> Result<Option<usize>> {
    match std::env::var("ACD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::config(format!("ACD_THREADS = `{v}` is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs a parsed command, honouring `ACD_THREADS`.
pub fn execute(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Run(format!("worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::GenData(a) => gen_data(&a.common, a.family),
        Command::Train(c) => train(&c),
        Command::Infer(c) => infer(&c),
        Command::Sweep(c) => sweep(&c),
        Command::Calibrate(c) => calibrate(&c),
        Command::Bench(c) => bench(&c),
        Command::Uncertainty(c) => uncertainty(&c),
    })
}

/// The configuration after command-line overrides, validated.
pub fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(s) = c.samples {
        cfg.infer.samples = s;
        cfg.bench.samples = vec![s];
    }
    if let Some(p) = &c.data {
        if !p.exists() {
            return Err(CliError::config(format!("dataset {} does not exist", p.display())));
        }
        cfg.data.test = DataSource {
            count: 0,
            path: Some(p.clone()),
            family: None,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Run(format!("cannot create {}: {e}", dir.display())))
}

fn family_matches(f: &GraphFamily, choice: FamilyChoice) -> bool {
    matches!(
        (f, choice),
        (GraphFamily::GeneralSbm(_), FamilyChoice::GeneralSbm)
            | (GraphFamily::SymSbm(_), FamilyChoice::SymSbm)
            | (GraphFamily::LogSbm(_), FamilyChoice::LogSbm)
            | (GraphFamily::Planted(_), FamilyChoice::Planted)
    )
}

/// Splits to write as `(name, source, graphs)`, read or generated.
fn gen_splits(cfg: &ExperimentConfig, family: Option<FamilyChoice>) -> Result<Vec<(&'static str, serde_json::Value, Vec<LabeledGraph>)>> {
    if family == Some(FamilyChoice::Snap) {
        let snap = cfg.snap.as_ref().ok_or_else(|| CliError::config("--family snap needs a [snap] config section"))?;
        for p in [&snap.edges, &snap.communities] {
            if !p.exists() {
                return Err(CliError::config(format!("{} does not exist", p.display())));
            }
        }
        let mut rng = stream_rng(cfg.seed, "snap", 0);
        let s = extract_snap_subgraphs(&snap.edges, &snap.communities, &snap.split, &snap.constraints, &snap.mode, &mut rng)?;
        let src = serde_json::to_value(snap)?;
        return Ok(vec![("train", src.clone(), s.train), ("val", src.clone(), s.val), ("test", src, s.test)]);
    }
    let mut splits = vec![("train", cfg.data.train.clone())];
    if let Some(v) = &cfg.data.val {
        splits.push(("val", v.clone()));
    }
    splits.push(("test", cfg.data.test.clone()));
    let mut out = Vec::new();
    for (name, mut src) in splits {
        if let (Some(choice), Some(f)) = (family, &src.family) {
            if !family_matches(f, choice) {
                if choice != FamilyChoice::GeneralSbm {
                    return Err(CliError::config(format!("data.{name} is not a {choice:?} family")));
                }
                src.family = Some(GraphFamily::GeneralSbm(GeneralSbmConfig::default()));
            }
        }
        let graphs = load_split(cfg, name, &src)?;
        out.push((name, serde_json::to_value(&src)?, graphs));
    }
    Ok(out)
}

fn gen_data(c: &Common, family: Option<FamilyChoice>) -> Result<()> {
    let cfg = resolve_config(c)?;
    let splits = gen_splits(&cfg, family)?;
    create_out(&c.out)?;
    let mut manifest = RunManifest::new("gen-data", &cfg);
    for (name, src, graphs) in splits {
        let meta = serde_json::json!({
            "split": name,
            "seed": cfg.split_seed(name),
            "source": src,
            "config_hash": cfg.hash(),
        });
        let ds = Dataset::new(meta, graphs);
        ds.write_jsonl(&c.out.join(format!("{name}.jsonl")))?;
        ds.write_cache(&c.out.join(format!("{name}.bin")))?;
        manifest.metrics.insert(format!("{name}_graphs"), ds.graphs.len() as f64);
        println!("{name}: {} graphs", ds.graphs.len());
    }
    manifest.write(&c.out)
}

fn write_losses(dir: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = resolve_config(c)?;
    create_out(&c.out)?;
    std::fs::write(c.out.join("config.toml"), cfg.to_toml())?;
    match pipeline::train(&cfg, &c.out) {
        Ok(t) => {
            write_losses(&c.out, &t.report.losses)?;
            let mut m = RunManifest::new("train", &cfg).with_train(&t.report);
            if let Some(&l) = t.report.losses.last() {
                m.metrics.insert("final_loss".into(), l);
            }
            if let Some(&(_, v)) = t.report.validation.iter().max_by(|x, y| x.1.total_cmp(&y.1)) {
                m.metrics.insert("best_val_ami".into(), v);
            }
            m.write(&c.out)?;
            println!(
                "trained {} iterations in {:.1}s; checkpoint {}",
                t.report.iterations,
                t.report.seconds_train,
                t.report.final_checkpoint.display()
            );
            Ok(())
        }
        Err((e, report)) => {
            if let Some(r) = report {
                write_losses(&c.out, &r.losses)?;
                let mut m = RunManifest::new("train", &cfg).with_train(&r);
                m.checkpoint = Some(c.out.join("last.ckpt"));
                m.write(&c.out)?;
            }
            Err(e)
        }
    }
}

/// Checkpointed model plus the validated configuration. The configured
/// architecture is enforced only when a config file was given.
fn evaluation_setup(c: &Common) -> Result<(ExperimentConfig, Model, ParamStore)> {
    let mut cfg = resolve_config(c)?;
    let path = c.checkpoint.as_ref().ok_or_else(|| CliError::config("--checkpoint is required"))?;
    if !path.exists() {
        return Err(CliError::config(format!("checkpoint {} does not exist", path.display())));
    }
    let expected = c.config.as_ref().map(|_| &cfg.model);
    let (model, store, _) = load_checkpoint(path, expected)?;
    cfg.model = model.config.clone();
    Ok((cfg, model, store))
}

fn test_set(cfg: &ExperimentConfig) -> Result<Vec<PreparedGraph>> {
    let graphs = load_split(cfg, "test", &cfg.data.test)?;
    Ok(prepare_all(&graphs, &cfg.model, cfg.split_seed("test"))?)
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map_or(String::new(), |v| format!("{:.6}", v * scale))
}

fn write_infer_csv(path: &Path, results: &[GraphResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["graph_id", "n", "ami", "ari", "K_true", "K_map", "score"])?;
    for r in results {
        w.write_record([
            r.graph_id.to_string(),
            r.n.to_string(),
            fmt_opt(r.ami, 100.0),
            fmt_opt(r.ari, 100.0),
            r.k_true.map_or(String::new(), |k| k.to_string()),
            r.k_map().to_string(),
            format!("{:.6}", r.map.score),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LabelRecord {
    graph_id: usize,
    labels: Vec<usize>,
    score: f64,
    sample_k: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k_true: Option<usize>,
}

fn infer(c: &Common) -> Result<()> {
    let (cfg, model, store) = evaluation_setup(c)?;
    let test = test_set(&cfg)?;
    create_out(&c.out)?;
    let t = Instant::now();
    let results = infer_graphs(&model, &store, &test, cfg.infer.samples, cfg.seed)?;
    let secs = t.elapsed().as_secs_f64();
    write_infer_csv(&c.out.join("infer.csv"), &results)?;
    let mut lines = String::new();
    for r in &results {
        let rec = LabelRecord {
            graph_id: r.graph_id,
            labels: r.map.labels.iter().map(|l| l + 1).collect(),
            score: r.map.score,
            sample_k: r.sample_ks(),
            k_true: r.k_true,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    std::fs::write(c.out.join("labels.jsonl"), lines)?;
    let mut m = RunManifest::new("infer", &cfg);
    m.checkpoint = c.checkpoint.clone();
    m.timings.insert("infer_seconds".into(), secs);
    let ami_mean = mean(results.iter().filter_map(|r| r.ami));
    let ari_mean = mean(results.iter().filter_map(|r| r.ari));
    let exact = results.iter().filter(|r| r.ami == Some(1.0)).count();
    m.metrics.insert("mean_ami".into(), ami_mean);
    m.metrics.insert("mean_ari".into(), ari_mean);
    m.metrics.insert("exact_recoveries".into(), exact as f64);
    m.write(&c.out)?;
    println!(
        "{} graphs, S = {}: AMI {:.2}, ARI {:.2}, exact {exact}",
        results.len(),
        cfg.infer.samples,
        100.0 * ami_mean,
        100.0 * ari_mean
    );
    Ok(())
}

/// Per-cell outcome of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub a: f64,
    pub b: f64,
    pub amis: Option<Vec<f64>>,
    pub recoverable: bool,
    pub note: String,
}

impl SweepCell {
    pub fn mean_std(&self) -> Option<(f64, f64)> {
        let v = self.amis.as_ref()?;
        let m = mean(v.iter().copied());
        let var = mean(v.iter().map(|x| (x - m).powi(2)));
        Some((m, var.sqrt()))
    }
}

/// Runs the configured grid; cells whose edge probabilities exceed one are
/// skipped and carry the reason.
pub fn run_sweep(cfg: &ExperimentConfig, model: &Model, store: &ParamStore) -> Result<Vec<SweepCell>> {
    let s = &cfg.sweep;
    let mut cells = Vec::with_capacity(s.a.len() * s.b.len());
    for (i, &a) in s.a.iter().enumerate() {
        for (j, &b) in s.b.iter().enumerate() {
            let cell = s.cell(a, b);
            let idx = (i * s.b.len() + j) as u64;
            let recoverable = cell.exactly_recoverable();
            if let Err(e) = cell.validate() {
                cells.push(SweepCell {
                    a,
                    b,
                    amis: None,
                    recoverable,
                    note: format!("skipped: {e}"),
                });
                continue;
            }
            let seed = stream_rng(cfg.seed, "sweep", idx).random();
            let graphs = generate_graphs(&GraphFamily::SymSbm(cell), seed, 0, s.reps, None)?;
            let prepared = prepare_all(&graphs, &cfg.model, seed)?;
            let res = infer_graphs(model, store, &prepared, cfg.infer.samples, seed)?;
            let amis = res
                .iter()
                .map(|r| ami(&r.map.labels, prepared[r.graph_id].graph.labels().expect("generated graphs are labeled")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            cells.push(SweepCell {
                a,
                b,
                amis: Some(amis),
                recoverable,
                note: "ok".into(),
            });
        }
    }
    Ok(cells)
}

/// Points `(b, a)` on `√a − √b = √K` for `b` spanning the grid.
pub fn threshold_curve(b_grid: &[f64], k: usize, points: usize) -> Vec<(f64, f64)> {
    let lo = b_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = b_grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sk = (k as f64).sqrt();
    (0..points)
        .map(|t| {
            let b = if points > 1 { lo + (hi - lo) * t as f64 / (points - 1) as f64 } else { lo };
            (b, (b.sqrt() + sk).powi(2))
        })
        .collect()
}

fn sweep(c: &Common) -> Result<()> {
    let (cfg, model, store) = evaluation_setup(c)?;
    create_out(&c.out)?;
    let t = Instant::now();
    let cells = run_sweep(&cfg, &model, &store)?;
    let mut w = csv::Writer::from_path(c.out.join("sweep.csv"))?;
    w.write_record(["a", "b", "mean_ami", "std_ami", "recoverable", "status"])?;
    for cell in &cells {
        let ms = cell.mean_std();
        w.write_record([
            cell.a.to_string(),
            cell.b.to_string(),
            fmt_opt(ms.map(|x| x.0), 1.0),
            fmt_opt(ms.map(|x| x.1), 1.0),
            cell.recoverable.to_string(),
            cell.note.clone(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(c.out.join("threshold.csv"))?;
    w.write_record(["K", "b", "a"])?;
    for (b, a) in threshold_curve(&cfg.sweep.b, cfg.sweep.k, 101) {
        w.write_record([cfg.sweep.k.to_string(), format!("{b:.6}"), format!("{a:.6}")])?;
    }
    w.flush()?;
    let nb = cfg.sweep.b.len();
    let svg = svg::heatmap(&cfg.sweep.a, &cfg.sweep.b, cfg.sweep.k, |i, j| cells[i * nb + j].mean_std().map(|x| x.0));
    std::fs::write(c.out.join("heatmap.svg"), svg)?;
    let mut m = RunManifest::new("sweep", &cfg);
    m.checkpoint = c.checkpoint.clone();
    m.timings.insert("sweep_seconds".into(), t.elapsed().as_secs_f64());
    let group = |rec: bool| mean(cells.iter().filter(|x| x.recoverable == rec).filter_map(|x| x.mean_std().map(|v| v.0)));
    m.metrics.insert("mean_ami_recoverable".into(), group(true));
    m.metrics.insert("mean_ami_unrecoverable".into(), group(false));
    m.metrics.insert("skipped_cells".into(), cells.iter().filter(|x| x.amis.is_none()).count() as f64);
    m.write(&c.out)?;
    println!(
        "{} cells: mean AMI {:.3} above the threshold, {:.3} below",
        cells.len(),
        group(true),
        group(false)
    );
    Ok(())
}

fn calibrate(c: &Common) -> Result<()> {
    let (cfg, model, store) = evaluation_setup(c)?;
    let test = test_set(&cfg)?;
    if test.iter().any(|g| g.graph.labels().is_none()) {
        return Err(CliError::Run("calibration needs labeled test graphs".into()));
    }
    create_out(&c.out)?;
    let results = infer_graphs(&model, &store, &test, cfg.infer.samples, cfg.seed)?;
    let predicted: Vec<Vec<usize>> = results.iter().map(GraphResult::sample_ks).collect();
    let truth: Vec<usize> = results.iter().map(|r| r.k_true.expect("labeled")).collect();
    let rep = ece(&predicted, &truth, cfg.calibrate.bins)?;
    let mut w = csv::Writer::from_path(c.out.join("calibration.csv"))?;
    w.write_record(["bin", "lower", "upper", "count", "accuracy", "confidence"])?;
    for (i, b) in rep.bins.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            format!("{:.6}", b.lower),
            format!("{:.6}", b.upper),
            b.count.to_string(),
            format!("{:.6}", b.accuracy),
            format!("{:.6}", b.confidence),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(c.out.join("calibration_summary.csv"))?;
    w.write_record(["ece", "graphs", "samples", "bins"])?;
    w.write_record([
        format!("{:.6}", rep.ece),
        rep.n.to_string(),
        cfg.infer.samples.to_string(),
        cfg.calibrate.bins.to_string(),
    ])?;
    w.flush()?;
    let mut m = RunManifest::new("calibrate", &cfg);
    m.checkpoint = c.checkpoint.clone();
    m.metrics.insert("ece".into(), rep.ece);
    m.write(&c.out)?;
    println!("ECE {:.4} over {} graphs", rep.ece, rep.n);
    Ok(())
}

fn bench(c: &Common) -> Result<()> {
    let (cfg, model, store) = evaluation_setup(c)?;
    let test = test_set(&cfg)?;
    create_out(&c.out)?;
    let mut w = csv::Writer::from_path(c.out.join("bench.csv"))?;
    w.write_record(["graph_id", "n", "K_true", "samples", "seconds", "seconds_per_sample", "calls_per_sample"])?;
    for &s in &cfg.bench.samples {
        for (i, pg) in test.iter().enumerate() {
            let t = Instant::now();
            let draws = model.sample(&store, pg, pipeline::graph_seed(cfg.seed, i), s)?;
            let secs = t.elapsed().as_secs_f64();
            let calls = mean(draws.iter().map(|d| d.calls as f64));
            w.write_record([
                i.to_string(),
                pg.n_nodes().to_string(),
                pg.graph.num_clusters().map_or(String::new(), |k| k.to_string()),
                s.to_string(),
                format!("{secs:.6}"),
                format!("{:.6}", secs / s as f64),
                format!("{calls:.3}"),
            ])?;
        }
    }
    w.flush()?;
    let mut m = RunManifest::new("bench", &cfg);
    m.checkpoint = c.checkpoint.clone();
    m.write(&c.out)?;
    println!("timed {} graphs at S = {:?}", test.len(), cfg.bench.samples);
    Ok(())
}

fn uncertainty(c: &Common) -> Result<()> {
    let (cfg, model, store) = evaluation_setup(c)?;
    let test = test_set(&cfg)?;
    create_out(&c.out)?;
    let results = infer_graphs(&model, &store, &test, cfg.infer.samples, cfg.seed)?;
    let mut w = csv::Writer::from_path(c.out.join("uncertainty.csv"))?;
    w.write_record(["graph_id", "n", "K_true", "K_map", "K_mean", "K_std"])?;
    let mut stds = Vec::new();
    for r in &results {
        let (m, s) = acd_core::metrics::uncertainty_stats(&r.samples);
        stds.push(s);
        w.write_record([
            r.graph_id.to_string(),
            r.n.to_string(),
            r.k_true.map_or(String::new(), |k| k.to_string()),
            r.k_map().to_string(),
            format!("{m:.6}"),
            format!("{s:.6}"),
        ])?;
    }
    w.flush()?;
    let mut man = RunManifest::new("uncertainty", &cfg);
    man.checkpoint = c.checkpoint.clone();
    man.metrics.insert("mean_k_std".into(), mean(stds.iter().copied()));
    man.write(&c.out)?;
    println!("mean K std {:.3} over {} graphs", mean(stds), results.len());
    Ok(())
}
