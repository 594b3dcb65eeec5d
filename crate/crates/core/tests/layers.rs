mod common;

use acd_core::attention::{AttnConfig, Isab, Mab, Mha, Pma};
use acd_core::encoder::{EncoderKind, GcnConfig, GcnEncoder, GraphStructure, GATE_EPS};
use acd_core::generate::{planted_partition, stream_rng};
use acd_core::graph::LabeledGraph;
use acd_core::posenc::*;
use acd_tensor::{Mode, ParamBuilder, ParamStore, Tape, Tensor};
use rand::Rng;

use common::{jacobi_eigen, param_fd, permute_rows, random_perm, random_tensor, rng};

fn to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn path(n: usize) -> LabeledGraph {
    let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    LabeledGraph::from_edges(n, &edges).unwrap()
}

fn complete(n: usize) -> LabeledGraph {
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    LabeledGraph::from_edges(n, &edges).unwrap()
}

#[test]
fn laplacian_spectra_match_jacobi() {
    let (vals, _) = jacobi_eigen(&to_rows(&normalized_laplacian(&complete(3))));
    for (v, e) in vals.iter().zip([0.0, 1.5, 1.5]) {
        assert!((v - e).abs() < 1e-10);
    }
    let g = path(4);
    let spec = laplacian_spectrum(&g);
    let (vals, vecs) = jacobi_eigen(&to_rows(&normalized_laplacian(&g)));
    for c in 0..4 {
        assert!((spec.values[c] - vals[c]).abs() < 1e-8);
        // eigenvalues of P4 are distinct, so vectors agree up to sign
        let dot: f64 = (0..4).map(|r| spec.vectors[(r, c)] * vecs[r][c]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-8, "column {c}: {dot}");
    }
}

#[test]
fn spectrum_invariants_on_random_graphs() {
    let mut r = rng("spectrum");
    for trial in 0..20 {
        let n = r.random_range(2..30);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if r.random::<f64>() < 0.15 {
                    edges.push((i, j));
                }
            }
        }
        let g = LabeledGraph::from_edges(n, &edges).unwrap();
        let l = normalized_laplacian(&g);
        assert_eq!(l, l.transpose());
        let spec = laplacian_spectrum(&g);
        assert!(spec.values.iter().all(|&v| v > -1e-9), "trial {trial}");
        for c in 0..n {
            let v = spec.vectors.column(c);
            let resid = &l * v - v * spec.values[c];
            assert!(resid.amax() < 1e-7);
        }
        // the degree-weighted component indicator lies in the null space
        let comps = g.components();
        for comp in 0..=*comps.iter().max().unwrap() {
            let ind = nalgebra::DVector::from_fn(n, |i, _| if comps[i] == comp { (g.degree(i) as f64).sqrt() } else { 0.0 });
            if ind.norm() > 0.0 {
                assert!((&l * &ind).amax() < 1e-7);
            }
        }
        let enc = eval_encoding(&g, 20);
        let cols = 20.min(n - 1);
        for a in 0..cols {
            for b in 0..cols {
                let dot: f64 = (0..n).map(|i| enc.at(i, a) * enc.at(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-7);
            }
        }
    }
}

#[test]
fn encoding_shape_signs_and_modes() {
    let g = path(5);
    let cfg = PosEncConfig::default();
    let mut r = rng("posenc");
    let e = laplacian_pos_enc(&g, &cfg, &mut r, Mode::Eval);
    assert_eq!(e.shape(), &[5, 20]);
    assert!((4..20).all(|c| (0..5).all(|i| e.at(i, c) == 0.0)));
    assert_eq!(e, laplacian_pos_enc(&g, &cfg, &mut r, Mode::Eval));
    for c in 0..4 {
        let first = (0..5).map(|i| e.at(i, c)).find(|v| v.abs() > 1e-10).unwrap();
        assert!(first > 0.0);
    }
    let t = laplacian_pos_enc(&g, &cfg, &mut r, Mode::Train);
    for c in 0..20 {
        let same = (0..5).all(|i| t.at(i, c) == e.at(i, c));
        let flipped = (0..5).all(|i| t.at(i, c) == -e.at(i, c));
        assert!(same || flipped);
    }
}

fn encoder(kind: EncoderKind, d: usize, input: usize, seed: u64) -> (GcnEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = stream_rng(seed, "encoder", 0);
    let cfg = GcnConfig {
        variant: kind,
        layers: 2,
        hidden: d,
        input_dim: input,
    };
    let enc = GcnEncoder::new(&mut ParamBuilder::new(&mut store, &mut r), &cfg).unwrap();
    (enc, store)
}

fn run(enc: &GcnEncoder, store: &ParamStore, g: &LabeledGraph, f: &Tensor, mode: Mode) -> Tensor {
    let mut tape = Tape::new(store, mode);
    let fv = tape.constant(f.clone());
    let out = enc.forward(&mut tape, &GraphStructure::new(g), fv).unwrap();
    tape.value(out).clone()
}

/// Perturbs running statistics so eval mode is not a plain identity.
fn randomise_bn(store: &mut ParamStore, r: &mut impl Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains("running")).collect();
    for id in ids {
        let var = store.name(id).ends_with("var");
        for v in store.get_mut(id).data_mut() {
            *v = if var { r.random_range(0.5..2.0) } else { r.random_range(-0.5..0.5) };
        }
    }
}

#[test]
fn encoders_are_permutation_equivariant() {
    let mut r = rng("equivariance");
    for kind in [EncoderKind::GraphSage, EncoderKind::GatedGcn] {
        let (enc, mut store) = encoder(kind, 8, 5, 1);
        randomise_bn(&mut store, &mut r);
        for _ in 0..20 {
            let n = r.random_range(1..15);
            let g = planted_partition(n, 1, 0.4, 0.4, &mut r).unwrap();
            let f = random_tensor(&mut r, n, 5);
            let perm = random_perm(n, &mut r);
            for mode in [Mode::Eval, Mode::Train] {
                let a = run(&enc, &store, &g, &f, mode);
                let b = run(&enc, &store, &g.permuted(&perm), &permute_rows(&f, &perm), mode);
                assert_eq!(a.shape(), &[n, 8]);
                assert!(permute_rows(&a, &perm).max_abs_diff(&b) < 1e-9, "{kind:?}");
            }
        }
    }
}

#[test]
fn encoder_special_cases() {
    let (enc, store) = encoder(EncoderKind::GraphSage, 8, 4, 2);
    let mut r = rng("cases");
    let row = random_tensor(&mut r, 1, 4);
    let same = Tensor::new(vec![5, 4], row.data().repeat(5)).unwrap();
    for g in [LabeledGraph::empty(5), path(5).permuted(&[0, 1, 2, 3, 4])] {
        let out = run(&enc, &store, &g, &same, Mode::Eval);
        let edgeless = g.n_edges() == 0;
        if edgeless {
            assert!((1..5).all(|i| out.row(i) == out.row(0)));
        }
    }
    let cycle = LabeledGraph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]).unwrap();
    for kind in [EncoderKind::GraphSage, EncoderKind::GatedGcn] {
        let (enc, store) = encoder(kind, 8, 4, 3);
        let out = run(&enc, &store, &cycle, &same, Mode::Eval);
        assert!((1..5).all(|i| out.row(i).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-12)));
    }
    let bad = random_tensor(&mut r, 5, 3);
    let mut tape = Tape::new(&store, Mode::Eval);
    let v = tape.constant(bad);
    assert!(enc.forward(&mut tape, &GraphStructure::new(&cycle), v).is_err());
    // a degree-one node's gate is σ(ê) / (σ(ê) + ε) < 1
    let s = 1.0 / (1.0 + (-1.0f64).exp());
    assert!(s / (s + GATE_EPS) < 1.0);
}

#[test]
fn zero_lift_gives_zero_embeddings() {
    let (enc, mut store) = encoder(EncoderKind::GraphSage, 4, 4, 4);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("lift")).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new(&store, Mode::Eval);
    let f = tape.constant(Tensor::zeros(&[3, 4]));
    let h = enc.embed_input(&mut tape, f).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut r = rng("encoder-fd");
    let g = planted_partition(9, 2, 0.7, 0.2, &mut r).unwrap();
    let g = LabeledGraph::from_edges(10, &[g.edges(), vec![]].concat()).unwrap();
    let f = random_tensor(&mut r, 10, 3);
    let w = random_tensor(&mut r, 10, 8);
    for kind in [EncoderKind::GraphSage, EncoderKind::GatedGcn] {
        let (enc, store) = encoder(kind, 8, 3, 5);
        let gs = GraphStructure::new(&g);
        for mode in [Mode::Train, Mode::Eval] {
            let (err, name) = param_fd(&store, mode, 12, |tape| {
                let fv = tape.constant(f.clone());
                let out = enc.forward(tape, &gs, fv).unwrap();
                let wv = tape.constant(w.clone());
                let p = tape.mul(out, wv).unwrap();
                tape.sum(p)
            });
            assert!(err < 1e-4, "{kind:?} {mode:?}: {err} at {name}");
        }
    }
}

fn attn_cfg() -> AttnConfig {
    AttnConfig {
        heads: 2,
        dim: 8,
        inducing: 3,
        seeds: 1,
    }
}

#[test]
fn attention_permutation_properties() {
    let mut r = rng("attn-perm");
    let mut store = ParamStore::new();
    let mut pr = stream_rng(9, "attn", 0);
    let mut pb = ParamBuilder::new(&mut store, &mut pr);
    let cfg = attn_cfg();
    let mha = Mha::new(&mut pb.sub("mha"), 5, 6, 6, &cfg).unwrap();
    let mab = Mab::new(&mut pb.sub("mab"), 5, 6, &cfg).unwrap();
    let pma = Pma::new(&mut pb.sub("pma"), 6, &cfg).unwrap();
    let isab = Isab::new(&mut pb.sub("isab"), 6, &cfg).unwrap();
    for _ in 0..200 {
        let n = r.random_range(1..9);
        let m = r.random_range(1..9);
        let x = random_tensor(&mut r, n, 5);
        let y = random_tensor(&mut r, m, 6);
        let py = random_perm(m, &mut r);
        let px = random_perm(n, &mut r);
        let yp = permute_rows(&y, &py);
        let xp = permute_rows(&x, &px);
        let mut t = Tape::new(&store, Mode::Eval);
        let (xv, yv, xpv, ypv) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(xp), t.constant(yp));
        let a = mha.forward(&mut t, xv, yv, yv).unwrap();
        let b = mha.forward(&mut t, xv, ypv, ypv).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-9);
        let a = mab.forward(&mut t, xv, yv).unwrap();
        let b = mab.forward(&mut t, xpv, ypv).unwrap();
        assert_eq!(t.value(a).shape(), &[n, 8]);
        assert!(permute_rows(t.value(a), &px).max_abs_diff(t.value(b)) < 1e-9);
        let a = pma.forward(&mut t, yv).unwrap();
        let b = pma.forward(&mut t, ypv).unwrap();
        assert_eq!(t.value(a).shape(), &[1, 8]);
        assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-9);
        let a = isab.forward(&mut t, yv).unwrap();
        let b = isab.forward(&mut t, ypv).unwrap();
        assert!(permute_rows(t.value(a), &py).max_abs_diff(t.value(b)) < 1e-9);
    }
}

#[test]
fn attention_special_cases() {
    let mut r = rng("attn-cases");
    let mut store = ParamStore::new();
    let mut pr = stream_rng(10, "attn", 0);
    let mut pb = ParamBuilder::new(&mut store, &mut pr);
    let cfg = attn_cfg();
    let mha = Mha::new(&mut pb.sub("mha"), 4, 4, 4, &cfg).unwrap();
    let pma = Pma::new(&mut pb.sub("pma"), 4, &cfg).unwrap();
    let isab = Isab::new(&mut pb.sub("isab"), 4, &cfg).unwrap();
    let isab2 = Isab::new(&mut pb.sub("isab2"), 8, &cfg).unwrap();
    let q = random_tensor(&mut r, 3, 4);
    let kv = random_tensor(&mut r, 2, 4);
    let doubled = Tensor::new(vec![4, 4], [kv.data(), kv.data()].concat()).unwrap();
    let one = random_tensor(&mut r, 1, 4);
    let mut t = Tape::new(&store, Mode::Eval);
    let (qv, kvv, dv, ov) = (t.constant(q), t.constant(kv), t.constant(doubled), t.constant(one.clone()));
    let a = mha.forward(&mut t, qv, kvv, kvv).unwrap();
    let b = mha.forward(&mut t, qv, dv, dv).unwrap();
    assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
    // a single key: every query receives W_o W_v v
    let single = mha.forward(&mut t, qv, ov, ov).unwrap();
    let s = t.value(single).clone();
    assert!((1..3).all(|i| s.row(i).iter().zip(s.row(0)).all(|(x, y)| (x - y).abs() < 1e-12)));
    let empty = t.constant(Tensor::zeros(&[0, 4]));
    assert!(mha.forward(&mut t, qv, empty, empty).is_err());
    assert!(pma.forward(&mut t, empty).is_err());
    assert!(isab.forward(&mut t, empty).is_err());
    let p1 = pma.forward(&mut t, ov).unwrap();
    assert_eq!(t.value(p1).shape(), &[1, 8]);
    let i1 = isab.forward(&mut t, ov).unwrap();
    let i2 = isab2.forward(&mut t, i1).unwrap();
    assert_eq!(t.value(i2).shape(), &[1, 8]);
    assert!(AttnConfig { heads: 3, dim: 8, inducing: 1, seeds: 1 }.validate().is_err());
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut r = rng("attn-fd");
    let mut store = ParamStore::new();
    let mut pr = stream_rng(11, "attn", 0);
    let mut pb = ParamBuilder::new(&mut store, &mut pr);
    let cfg = attn_cfg();
    let mab = Mab::new(&mut pb.sub("mab"), 5, 6, &cfg).unwrap();
    let pma = Pma::new(&mut pb.sub("pma"), 8, &cfg).unwrap();
    let isab = Isab::new(&mut pb.sub("isab"), 6, &cfg).unwrap();
    let x = random_tensor(&mut r, 4, 5);
    let y = random_tensor(&mut r, 6, 6);
    let w = random_tensor(&mut r, 1, 8);
    let (err, name) = param_fd(&store, Mode::Eval, 16, |t| {
        let (xv, yv) = (t.constant(x.clone()), t.constant(y.clone()));
        let a = mab.forward(t, xv, yv).unwrap();
        let s = isab.forward(t, yv).unwrap();
        let both = t.concat(&[a, s], 0).unwrap();
        let p = pma.forward(t, both).unwrap();
        let wv = t.constant(w.clone());
        let p = t.mul(p, wv).unwrap();
        t.sum(p)
    });
    assert!(err < 1e-4, "{err} at {name}");
}

#[test]
fn isab_cost_is_linear_in_set_size() {
    let mut r = rng("flops");
    let mut store = ParamStore::new();
    let mut pr = stream_rng(12, "attn", 0);
    let isab = Isab::new(&mut ParamBuilder::new(&mut store, &mut pr), 8, &attn_cfg()).unwrap();
    let flops = |n: usize, r: &mut rand_chacha::ChaCha8Rng| {
        let mut t = Tape::new(&store, Mode::Eval);
        let x = t.constant(random_tensor(r, n, 8));
        let before = t.flops();
        isab.forward(&mut t, x).unwrap();
        t.flops() - before
    };
    let (f1, f2, f4) = (flops(100, &mut r), flops(200, &mut r), flops(400, &mut r));
    // affine in n: equal increments for equal steps
    assert_eq!(f4 - f2, 2 * (f2 - f1));
}
