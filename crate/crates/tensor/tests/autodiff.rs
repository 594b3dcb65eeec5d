use std::sync::Arc;

use acd_tensor::gradcheck::check_param_grads;
use acd_tensor::{
    BatchNorm, CsrMatrix, Mlp, Mode, ParamBuilder, ParamStore, Tape, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Central-difference gradient of `f` with respect to every entry of the
/// leaves, compared with the tape's analytic gradient.
fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Train);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new(&store, Mode::Train);
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).unwrap();
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            d2 += (numeric - analytic[j]).powi(2);
            a2 += analytic[j].powi(2);
            n2 += numeric.powi(2);
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 1e-9 {
            worst = worst.max(d2.sqrt() / scale);
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights so every output entry
/// contributes a distinct gradient.
fn probe(tape: &mut Tape<'_>, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_identity() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let a = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let i = tape.constant(Tensor::identity(2));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn reduce_mean_and_gather() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let v = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
    let m = tape.mean(v).unwrap();
    assert_eq!(tape.value(m).item(), 2.5);
    let x = tape.constant(Tensor::new(vec![5, 3], (0..15).map(f64::from).collect()).unwrap());
    let g = tape.gather_rows(x, &[4, 0]).unwrap();
    assert_eq!(tape.value(g).data(), &[12.0, 13.0, 14.0, 0.0, 1.0, 2.0]);
}

#[test]
fn activation_examples() {
    let mut store = ParamStore::new();
    let slope = store.add("a", Tensor::vector(vec![0.3]), true).unwrap();
    let mut tape = Tape::new(&store, Mode::Eval);
    let z = tape.constant(Tensor::matrix(&[vec![0.0, 0.0, 0.0]]));
    let s = tape.softmax_rows(z).unwrap();
    for &p in tape.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let zero = tape.constant(Tensor::scalar(0.0));
    let sg = tape.sigmoid(zero);
    assert_eq!(tape.value(sg).item(), 0.5);
    let neg = tape.constant(Tensor::vector(vec![-2.0]));
    let a = tape.param(slope);
    let pr = tape.prelu(neg, a).unwrap();
    assert!((tape.value(pr).item() + 0.6).abs() < 1e-15);
}

#[test]
fn softmax_on_empty_axis_errors() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let e = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(matches!(
        tape.softmax_rows(e),
        Err(TensorError::EmptyAxis { .. })
    ));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = tape.constant(Tensor::zeros(&[3, 2]));
    let err = tape.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
}

#[test]
fn backward_rejects_non_scalar() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let a = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
    assert!(matches!(
        tape.backward(a),
        Err(TensorError::NonScalarBackward { .. })
    ));
}

#[test]
fn sum_gradient_is_ones() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let x = tape.leaf(Tensor::zeros(&[3, 4]).with_requires_grad(true));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0; 12]);
}

#[test]
fn sigmoid_dot_gradient_at_zero() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store, Mode::Eval);
    let w = tape.leaf(Tensor::zeros(&[1, 3]).with_requires_grad(true));
    let v = tape.constant(Tensor::matrix(&[vec![1.0, -2.0, 4.0]]));
    let s = tape.sigmoid(w);
    let p = tape.mul(s, v).unwrap();
    let out = tape.sum(p);
    let g = tape.backward(out).unwrap();
    assert_eq!(g.wrt(w).unwrap(), &[0.25, -0.5, 1.0]);
}

#[test]
fn elementwise_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[3, 4]);
    let row = random_tensor(&mut rng, &[4]);
    let pos = Tensor::new(vec![3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Var>)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.add(v[0], v[1]).unwrap(); probe(t, y) })),
        ("sub_row", vec![a.clone(), row.clone()], Box::new(|t, v| { let y = t.sub(v[0], v[1]).unwrap(); probe(t, y) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.mul(v[0], v[1]).unwrap(); probe(t, y) })),
        ("div", vec![a.clone(), pos.clone()], Box::new(|t, v| { let y = t.div(v[0], v[1]).unwrap(); probe(t, y) })),
        ("scale_offset", vec![a.clone()], Box::new(|t, v| { let y = t.scale(v[0], -1.7); let y = t.add_scalar(y, 0.3); probe(t, y) })),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| { let y = t.sigmoid(v[0]); probe(t, y) })),
        ("softplus", vec![a.clone()], Box::new(|t, v| { let y = t.softplus(v[0]); probe(t, y) })),
        ("exp", vec![a.clone()], Box::new(|t, v| { let y = t.exp(v[0]); probe(t, y) })),
        ("log", vec![pos.clone()], Box::new(|t, v| { let y = t.log(v[0]); probe(t, y) })),
        ("sqrt", vec![pos.clone()], Box::new(|t, v| { let y = t.sqrt(v[0]); probe(t, y) })),
        ("square", vec![a.clone()], Box::new(|t, v| { let y = t.square(v[0]); probe(t, y) })),
        ("tanh", vec![a.clone()], Box::new(|t, v| { let y = t.tanh(v[0]); probe(t, y) })),
        ("relu", vec![a.clone()], Box::new(|t, v| { let y = t.relu(v[0]); probe(t, y) })),
    ];
    for (name, inputs, f) in cases {
        let err = check_inputs(&inputs, f);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn structural_ops_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[4, 3]);
    let b = random_tensor(&mut rng, &[3, 5]);
    let c = random_tensor(&mut rng, &[4, 2]);
    let sp = Arc::new(CsrMatrix::from_triplets(
        3,
        4,
        &[(0, 1, 0.5), (0, 3, -1.0), (2, 0, 2.0), (2, 2, 0.25)],
    ));
    let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&mut Tape<'_>, &[Var]) -> Var>)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.matmul(v[0], v[1]).unwrap(); probe(t, y) })),
        ("transpose", vec![a.clone()], Box::new(|t, v| { let y = t.transpose(v[0]).unwrap(); probe(t, y) })),
        ("concat_cols", vec![a.clone(), c.clone()], Box::new(|t, v| { let y = t.concat(&[v[0], v[1]], 1).unwrap(); probe(t, y) })),
        ("concat_rows", vec![a.clone(), a.clone()], Box::new(|t, v| { let y = t.concat(&[v[0], v[1]], 0).unwrap(); probe(t, y) })),
        ("slice_rows", vec![a.clone()], Box::new(|t, v| { let y = t.slice(v[0], 0, 1, 3).unwrap(); probe(t, y) })),
        ("slice_cols", vec![a.clone()], Box::new(|t, v| { let y = t.slice(v[0], 1, 1, 3).unwrap(); probe(t, y) })),
        ("gather_rows", vec![a.clone()], Box::new(|t, v| { let y = t.gather_rows(v[0], &[3, 0, 3]).unwrap(); probe(t, y) })),
        ("sparse_matmul", vec![a.clone()], Box::new(move |t, v| { let y = t.sparse_matmul(&sp, v[0]).unwrap(); probe(t, y) })),
        ("sum_axis0", vec![a.clone()], Box::new(|t, v| { let y = t.sum_axis(v[0], 0).unwrap(); probe(t, y) })),
        ("mean_axis1", vec![a.clone()], Box::new(|t, v| { let y = t.mean_axis(v[0], 1).unwrap(); probe(t, y) })),
        ("broadcast", vec![Tensor::vector(vec![0.3, -0.2, 1.1])], Box::new(|t, v| { let y = t.broadcast_rows(v[0], 4).unwrap(); probe(t, y) })),
        ("reshape", vec![a.clone()], Box::new(|t, v| { let y = t.reshape(v[0], vec![2, 6]).unwrap(); probe(t, y) })),
        ("softmax", vec![a.clone()], Box::new(|t, v| { let y = t.softmax_rows(v[0]).unwrap(); probe(t, y) })),
        ("log_softmax", vec![a.clone()], Box::new(|t, v| { let y = t.log_softmax_rows(v[0]).unwrap(); probe(t, y) })),
        ("log_softmax_segments", vec![Tensor::vector(vec![0.1, 0.7, -0.4, 1.2, 0.0, 0.3])], Box::new(|t, v| { let y = t.log_softmax_segments(v[0], vec![0, 1, 4, 6]).unwrap(); probe(t, y) })),
    ];
    for (name, inputs, f) in cases {
        let err = check_inputs(&inputs, f);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

fn build_mlp(depth: usize, seed: u64) -> (ParamStore, Mlp, BatchNorm) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let mlp = Mlp::new(&mut pb.sub("mlp"), 4, 6, 3, depth).unwrap();
    let bn = BatchNorm::new(&mut pb.sub("bn"), 3).unwrap();
    (store, mlp, bn)
}

fn mlp_loss(store: &ParamStore, mlp: &Mlp, bn: &BatchNorm, x: &Tensor, mode: Mode) -> (f64, acd_tensor::ParamGrads) {
    let mut tape = Tape::new(store, mode);
    let xv = tape.constant(x.clone());
    let h = mlp.forward(&mut tape, xv).unwrap();
    let h = bn.forward(&mut tape, h).unwrap();
    let h = tape.sigmoid(h);
    let out = probe(&mut tape, h);
    let g = tape.backward(out).unwrap();
    (tape.value(out).item(), g.into_params())
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let (store, mlp, bn) = build_mlp(3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&mut rng, &[5, 4]);
    for mode in [Mode::Train, Mode::Eval] {
        let (_, grads) = mlp_loss(&store, &mlp, &bn, &x, mode);
        let report = check_param_grads(&store, &grads, 1e-5, usize::MAX, |s| {
            Ok(mlp_loss(s, &mlp, &bn, &x, mode).0)
        })
        .unwrap();
        assert!(
            report.worst_rel_err < 1e-5,
            "{mode:?}: {} rel err {}",
            report.worst_param,
            report.worst_rel_err
        );
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let (store, mlp, bn) = build_mlp(4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, &[9, 4]);
    let (l1, g1) = mlp_loss(&store, &mlp, &bn, &x, Mode::Train);
    let (l2, g2) = mlp_loss(&store, &mlp, &bn, &x, Mode::Train);
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn batch_norm_train_updates_running_stats() {
    let (mut store, _, bn) = build_mlp(1, 3);
    let x = Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]);
    let updates = {
        let mut tape = Tape::new(&store, Mode::Train);
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, xv).unwrap();
        // normalised columns have zero mean
        let col = tape.sum_axis(y, 0).unwrap();
        assert!(tape.value(col).data().iter().all(|v| v.abs() < 1e-12));
        tape.take_bn_updates()
    };
    for u in &updates {
        u.apply(&mut store);
    }
    let rm = store.get(bn.running_mean).data().to_vec();
    let rv = store.get(bn.running_var).data().to_vec();
    assert!((rm[0] - 0.2).abs() < 1e-12 && (rm[1] - 0.2).abs() < 1e-12);
    // unbiased batch variance of (1,3) is 2
    assert!((rv[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    assert!((rv[1] - 0.9).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        let store = ParamStore::new();
        let mut tape = Tape::new(&store, Mode::Eval);
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for r in 0..rows {
            let row = tape.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
