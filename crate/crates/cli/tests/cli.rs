use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acd_cli::pipeline::{infer_graphs, load_checkpoint, load_split, train};
use acd_core::generate::stream_rng;
use acd_core::model::{prepare_all, Model};
use acd_cli::{ExperimentConfig, RunManifest};
use sha2::{Digest, Sha256};

const CONFIG: &str = r#"
seed = 7
[model]
head = "ccp"
encoder = "graphsage"
hidden = 16
layers = 2
input_dim = 8
[train]
iterations = 20
batch = 4
lr = 0.003
checkpoint_every = 10
validate_every = 10
[data.train]
count = 24
family = { family = "planted", n_min = 10, n_max = 16, k_choices = [2, 3], p = 0.9, q = 0.05 }
[data.val]
count = 3
family = { family = "planted", n_min = 10, n_max = 16, k_choices = [2, 3], p = 0.9, q = 0.05 }
[data.test]
count = 4
family = { family = "planted", n_min = 10, n_max = 16, k_choices = [2, 3], p = 0.9, q = 0.05 }
[sweep]
n = 30
k = 2
a = [4.0, 12.0]
b = [0.0, 2.0]
reps = 2
[bench]
samples = [1, 2]
"#;

fn acd(args: &[&str], dir: &Path) -> Output {
    acd_env(args, dir, &[])
}

fn acd_env(args: &[&str], dir: &Path, env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_acd"));
    c.args(args).current_dir(dir).env_remove("ACD_THREADS");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn workspace(config: &str) -> (tempfile::TempDir, PathBuf) {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("c.toml");
    std::fs::write(&p, config).unwrap();
    (d, p)
}

fn trained(dir: &Path, out: &str) -> PathBuf {
    let o = acd(&["train", "--config", "c.toml", "--out", out], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join(out).join("model.ckpt")
}

#[test]
fn help_and_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&acd(&["--help"], d.path())), 0);
    assert_eq!(code(&acd(&["frobnicate"], d.path())), 2);
    assert_eq!(code(&acd(&["train", "--seed", "x"], d.path())), 2);
}

#[test]
fn invalid_config_exits_2_without_output() {
    for bad in ["[train]\nbatch = 0\n", "[model]\nhead = \"gcn\"\n", "nonsense = ["] {
        let (d, _) = workspace(bad);
        for verb in ["gen-data", "train"] {
            let o = acd(&[verb, "--config", "c.toml", "--out", "o"], d.path());
            assert_eq!(code(&o), 2, "{verb}: {bad}");
            assert!(!d.path().join("o").exists());
        }
    }
    let (d, _) = workspace(CONFIG);
    let o = acd(&["infer", "--config", "c.toml", "--out", "o", "--checkpoint", "missing.ckpt"], d.path());
    assert_eq!(code(&o), 2);
    let o = acd(&["infer", "--config", "c.toml", "--out", "o"], d.path());
    assert_eq!(code(&o), 2);
    let o = acd_env(&["gen-data", "--config", "c.toml", "--out", "o"], d.path(), &[("ACD_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("o").exists());
}

#[test]
fn train_writes_artifacts_and_recomputable_hash() {
    let (d, _) = workspace(CONFIG);
    let ck = trained(d.path(), "run");
    let run = d.path().join("run");
    for f in ["config.toml", "loss.csv", "manifest.json", "model.ckpt", "last.ckpt", "best.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let m = RunManifest::read(&run).unwrap();
    assert_eq!(m.status, "completed");
    assert_eq!(m.loss_log.len(), 20);
    assert_eq!(m.validation.len(), 2);
    assert_eq!(m.checkpoint.as_deref(), Some(ck.strip_prefix(d.path()).unwrap()));
    let written = std::fs::read(run.join("config.toml")).unwrap();
    let hex: String = Sha256::digest(&written).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(m.config_hash, hex);
    let reparsed = ExperimentConfig::from_toml(std::str::from_utf8(&written).unwrap()).unwrap();
    assert_eq!(reparsed.hash(), m.config_hash);
    let losses = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 21);
    assert_eq!(losses.lines().next(), Some("iteration,loss"));
}

#[test]
fn checkpoint_round_trips_parameters() {
    let cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
    let d = tempfile::tempdir().unwrap();
    let t = train(&cfg, d.path()).map_err(|e| e.0).unwrap();
    let (model, store, iter) = load_checkpoint(&d.path().join("model.ckpt"), Some(&cfg.model)).unwrap();
    assert_eq!(iter, 20);
    assert_eq!(model.config, cfg.model);
    let (a, b) = (t.store.flat_trainable(), store.flat_trainable());
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let (_, mid, iter) = load_checkpoint(&d.path().join("last.ckpt"), None).unwrap();
    assert_eq!(iter, 20);
    assert_eq!(mid.flat_trainable().len(), a.len());
}

#[test]
fn architecture_mismatch_is_a_config_error() {
    let (d, _) = workspace(CONFIG);
    trained(d.path(), "run");
    std::fs::write(d.path().join("wide.toml"), CONFIG.replace("hidden = 16", "hidden = 32")).unwrap();
    let o = acd(&["infer", "--config", "wide.toml", "--out", "o", "--checkpoint", "run/model.ckpt"], d.path());
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("o").exists());
    std::fs::write(d.path().join("dac.toml"), CONFIG.replace("head = \"ccp\"", "head = \"dac\"")).unwrap();
    let o = acd(&["infer", "--config", "dac.toml", "--out", "o", "--checkpoint", "run/model.ckpt"], d.path());
    assert_eq!(code(&o), 2);
    // Without a config the checkpoint's own architecture is used.
    assert_eq!(code(&acd(&["gen-data", "--config", "c.toml", "--out", "g"], d.path())), 0);
    let o = acd(&["infer", "--out", "o", "--checkpoint", "run/model.ckpt", "--samples", "2", "--data", "g/test.jsonl"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::read(&d.path().join("o")).unwrap();
    assert_eq!(m.config.model.hidden, 16);
}

#[test]
fn divergent_training_aborts_with_exit_3() {
    let (d, _) = workspace(&CONFIG.replace("lr = 0.003", "lr = 1e200"));
    let o = acd(&["train", "--config", "c.toml", "--out", "run"], d.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let run = d.path().join("run");
    let m = RunManifest::read(&run).unwrap();
    assert_eq!(m.status, "aborted");
    assert!(m.loss_log.len() < 20);
    assert!(m.loss_log.iter().all(|l| l.is_finite()));
    let (_, store, iter) = load_checkpoint(&run.join("last.ckpt"), None).unwrap();
    assert_eq!(iter as usize, m.loss_log.len());
    assert!(store.flat_trainable().iter().all(|v| v.is_finite()));
    assert!(!run.join("model.ckpt").exists());
}

#[test]
fn evaluation_verbs_write_their_tables() {
    let (d, _) = workspace(CONFIG);
    trained(d.path(), "run");
    let ev = |verb: &str| acd(&[verb, "--config", "c.toml", "--out", "ev", "--checkpoint", "run/model.ckpt"], d.path());
    for verb in ["infer", "sweep", "calibrate", "bench", "uncertainty"] {
        let o = ev(verb);
        assert_eq!(code(&o), 0, "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let ev_dir = d.path().join("ev");
    let read = |f: &str| std::fs::read_to_string(ev_dir.join(f)).unwrap();
    let infer = read("infer.csv");
    assert_eq!(infer.lines().next(), Some("graph_id,n,ami,ari,K_true,K_map,score"));
    assert_eq!(infer.lines().count(), 5);
    for line in read("labels.jsonl").lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let labels: Vec<usize> = serde_json::from_value(v["labels"].clone()).unwrap();
        assert!(labels.iter().all(|&l| l >= 1));
        assert_eq!(labels[0], 1);
        assert_eq!(v["sample_k"].as_array().unwrap().len(), 15);
    }
    let sweep = read("sweep.csv");
    assert_eq!(sweep.lines().count(), 5);
    // a = 12 with n = 30 puts the in-cluster probability above one.
    assert!(sweep.lines().filter(|l| l.starts_with("12,")).all(|l| l.contains("skipped")));
    assert!(read("heatmap.svg").contains("<svg"));
    assert!(read("threshold.csv").starts_with("K,b,a"));
    assert_eq!(read("calibration.csv").lines().count(), 11);
    assert_eq!(read("bench.csv").lines().count(), 1 + 2 * 4);
    assert_eq!(read("uncertainty.csv").lines().count(), 5);
}

#[test]
fn runs_are_reproducible_across_repeats_and_threads() {
    let (d, _) = workspace(CONFIG);
    trained(d.path(), "a");
    trained(d.path(), "b");
    let read = |p: &str| std::fs::read(d.path().join(p)).unwrap();
    assert_eq!(read("a/loss.csv"), read("b/loss.csv"));
    assert_eq!(read("a/model.ckpt"), read("b/model.ckpt"));
    for (threads, out) in [("1", "i1"), ("3", "i3")] {
        let o = acd_env(
            &["infer", "--config", "c.toml", "--out", out, "--checkpoint", "a/model.ckpt"],
            d.path(),
            &[("ACD_THREADS", threads)],
        );
        assert_eq!(code(&o), 0);
    }
    assert_eq!(read("i1/infer.csv"), read("i3/infer.csv"));
    assert_eq!(read("i1/labels.jsonl"), read("i3/labels.jsonl"));
    for out in ["g1", "g2"] {
        assert_eq!(code(&acd(&["gen-data", "--config", "c.toml", "--out", out], d.path())), 0);
    }
    assert_eq!(read("g1/train.jsonl"), read("g2/train.jsonl"));
    assert_eq!(read("g1/test.bin"), read("g2/test.bin"));
}

#[test]
fn data_flag_replaces_the_test_split() {
    let (d, _) = workspace(CONFIG);
    trained(d.path(), "run");
    assert_eq!(code(&acd(&["gen-data", "--config", "c.toml", "--out", "g", "--seed", "99"], d.path())), 0);
    let o = acd(
        &["infer", "--config", "c.toml", "--out", "ev", "--checkpoint", "run/model.ckpt", "--data", "g/train.jsonl", "--samples", "2"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let infer = std::fs::read_to_string(d.path().join("ev/infer.csv")).unwrap();
    assert_eq!(infer.lines().count(), 25);
    let o = acd(&["infer", "--config", "c.toml", "--out", "ev2", "--checkpoint", "run/model.ckpt", "--data", "nope.jsonl"], d.path());
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("ev2").exists());
}

#[test]
fn zero_iterations_store_the_initialization() {
    let mut cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
    cfg.train.iterations = 0;
    cfg.validate().unwrap();
    let d = tempfile::tempdir().unwrap();
    let t = train(&cfg, d.path()).map_err(|e| e.0).unwrap();
    assert!(t.report.losses.is_empty());
    let (_, init) = Model::build(&cfg.model, &mut stream_rng(cfg.seed, "init", 0)).unwrap();
    let (_, stored, iter) = load_checkpoint(&d.path().join("model.ckpt"), Some(&cfg.model)).unwrap();
    assert_eq!(iter, 0);
    assert_eq!(init.flat_trainable(), stored.flat_trainable());
}

#[test]
fn reloaded_checkpoints_sample_identically() {
    let cfg = ExperimentConfig::from_toml(CONFIG).unwrap();
    let d = tempfile::tempdir().unwrap();
    let t = train(&cfg, d.path()).map_err(|e| e.0).unwrap();
    let (model, store, _) = load_checkpoint(&d.path().join("model.ckpt"), Some(&cfg.model)).unwrap();
    let graphs = load_split(&cfg, "test", &cfg.data.test).unwrap();
    let test = prepare_all(&graphs, &cfg.model, cfg.split_seed("test")).unwrap();
    let a = infer_graphs(&t.model, &t.store, &test, 5, 3).unwrap();
    let b = infer_graphs(&model, &store, &test, 5, 3).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.samples, y.samples);
        assert_eq!(x.map, y.map);
    }
    // a single sample is its own MAP
    let one = infer_graphs(&model, &store, &test, 1, 3).unwrap();
    assert!(one.iter().all(|r| r.samples.len() == 1 && r.samples[0] == r.map));
}

#[test]
fn family_flag_selects_the_generator() {
    let (d, _) = workspace(CONFIG);
    let o = acd(&["gen-data", "--config", "c.toml", "--out", "p", "--family", "planted"], d.path());
    assert_eq!(code(&o), 0);
    let o = acd(&["gen-data", "--config", "c.toml", "--out", "s", "--family", "sym-sbm"], d.path());
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("s").exists());
    let o = acd(&["gen-data", "--config", "c.toml", "--out", "x", "--family", "snap"], d.path());
    assert_eq!(code(&o), 2);
    let small = CONFIG.replace("count = 24", "count = 2").replace("count = 3", "count = 1").replace("count = 4", "count = 1");
    std::fs::write(d.path().join("small.toml"), small).unwrap();
    let o = acd(&["gen-data", "--config", "small.toml", "--out", "g", "--family", "general-sbm"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let meta = std::fs::read_to_string(d.path().join("g/train.jsonl")).unwrap();
    assert!(meta.contains("general-sbm"));
}

/// Eight 12-node cliques chained by single edges.
fn write_network(dir: &Path) {
    let mut edges = String::new();
    let mut cmty = String::new();
    for c in 0..8u64 {
        let ids: Vec<u64> = (0..12).map(|i| 100 * c + i).collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                edges.push_str(&format!("{a}\t{b}\n"));
            }
        }
        if c > 0 {
            edges.push_str(&format!("{}\t{}\n", 100 * (c - 1), 100 * c));
        }
        cmty.push_str(&ids.iter().map(u64::to_string).collect::<Vec<_>>().join("\t"));
        cmty.push('\n');
    }
    std::fs::write(dir.join("net.txt"), edges).unwrap();
    std::fs::write(dir.join("cmty.txt"), cmty).unwrap();
}

#[test]
fn snap_family_extracts_three_splits() {
    let config = format!(
        "{CONFIG}\n[snap]\nedges = \"net.txt\"\ncommunities = \"cmty.txt\"\nsplit = {{ fractions = [0.5, 0.25, 0.25], max_graphs = [10, 10, 10] }}\nmode = {{ kind = \"cliques\", min = 1, max = 2 }}\n"
    );
    let (d, _) = workspace(&config);
    write_network(d.path());
    let o = acd(&["gen-data", "--config", "c.toml", "--out", "g", "--family", "snap"], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::read(&d.path().join("g")).unwrap();
    // four train communities give 4 singletons and 6 pairs; two per held-out split give 3
    assert_eq!(m.metrics["train_graphs"], 10.0);
    assert_eq!(m.metrics["val_graphs"], 3.0);
    assert_eq!(m.metrics["test_graphs"], 3.0);
    let ds = acd_core::dataset::Dataset::load(&d.path().join("g/test.bin")).unwrap();
    for g in &ds.graphs {
        let k = g.num_clusters().unwrap();
        assert_eq!(g.n_nodes(), 12 * k);
    }
}
