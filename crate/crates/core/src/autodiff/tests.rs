use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_zeros() {
    let mut r = rng(1);
    let b = Tensor::randn(&[3, 4], 1.0, &mut r);
    let mut tape = Tape::new();
    let i3 = tape.constant(Tensor::eye(3));
    let bv = tape.constant(b.clone());
    let out = tape.matmul(i3, bv).unwrap();
    assert_eq!(tape.value(out), &b);

    let z = tape.constant(Tensor::zeros(&[2, 2]));
    let any = tape.constant(Tensor::randn(&[2, 2], 1.0, &mut r));
    let out = tape.matmul(z, any).unwrap();
    assert_eq!(tape.value(out), &Tensor::zeros(&[2, 2]));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(2);
    let a = Tensor::randn(&[3, 3], 1.0, &mut r);
    let b = Tensor::randn(&[3, 3], 1.0, &mut r);
    let mut oracle = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += a.get(&[i, k]) * b.get(&[k, j]);
            }
            oracle.set(&[i, j], s);
        }
    }
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(av, bv).unwrap();
    assert!(tape.value(c).max_abs_diff(&oracle) <= 1e-12);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(t(&[1, 4], &[0.7; 4]));
    let s = tape.softmax_last(c).unwrap();
    for v in tape.value(s).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }

    let x = t(&[2, 3], &[0.1, -2.0, 3.0, 5.0, 5.5, -1.0]);
    let shifted = t(&[2, 3], &x.data().iter().map(|v| v + 17.25).collect::<Vec<_>>());
    let (a, b) = (tape.constant(x), tape.constant(shifted));
    let (sa, sb) = (tape.softmax_last(a).unwrap(), tape.softmax_last(b).unwrap());
    assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-14);
    for row in tape.value(sa).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let r = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
    let s = tape.softmax_last(r).unwrap();
    assert!(tape.value(s).max_abs_diff(&t(&[2], &[0.25, 0.75])) < 1e-15);
}

#[test]
fn layer_norm_examples() {
    let eps = 1e-5;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 6], 3.3));
    let g = tape.constant(Tensor::full(&[6], 1.0));
    let b = tape.constant(Tensor::zeros(&[6]));
    let y = tape.layer_norm(x, g, b, eps).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() <= eps.sqrt()));

    let mut r = rng(3);
    let beta = Tensor::randn(&[6], 1.0, &mut r);
    let x = tape.constant(Tensor::randn(&[3, 6], 1.0, &mut r));
    let g0 = tape.constant(Tensor::zeros(&[6]));
    let bv = tape.constant(beta.clone());
    let y = tape.layer_norm(x, g0, bv, eps).unwrap();
    for row in tape.value(y).data().chunks(6) {
        assert_eq!(row, beta.data());
    }

    // direct formula oracle
    let raw = Tensor::randn(&[1, 8], 2.0, &mut r);
    let gamma = Tensor::randn(&[8], 1.0, &mut r);
    let beta = Tensor::randn(&[8], 1.0, &mut r);
    let xs = raw.data();
    let mean: f64 = xs.iter().sum::<f64>() / 8.0;
    let var: f64 = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    let oracle: Vec<f64> = (0..8)
        .map(|j| gamma.data()[j] * (xs[j] - mean) / (var + eps).sqrt() + beta.data()[j])
        .collect();
    let (xv, gv, bv) = (tape.constant(raw), tape.constant(gamma), tape.constant(beta));
    let y = tape.layer_norm(xv, gv, bv, eps).unwrap();
    assert!(tape.value(y).max_abs_diff(&t(&[1, 8], &oracle)) < 1e-10);

    let bad = tape.layer_norm(xv, gv, bv, 0.0);
    assert!(bad.is_err());
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let mut r = rng(4);
    let x = Tensor::randn(&[3, 5], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let sq = tape.mul(xv, xv).unwrap();
    let loss = tape.sum(sq).unwrap();
    let grads = tape.backward(loss, &mut ParamStore::new()).unwrap();
    let g = grads.get(xv).unwrap();
    for (gv, xv) in g.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn softmax_cross_entropy_grad_is_p_minus_y() {
    let mut r = rng(5);
    let logits = Tensor::randn(&[1, 4], 1.0, &mut r);
    let y = t(&[1, 4], &[0.0, 0.0, 1.0, 0.0]);
    let mut tape = Tape::new();
    let lv = tape.input(logits.clone());
    let loss = tape.cross_entropy(lv, &y).unwrap();
    let grads = tape.backward(loss, &mut ParamStore::new()).unwrap();
    let s = tape.constant(logits);
    let p = tape.softmax_last(s).unwrap();
    let expected: Vec<f64> = tape
        .value(p)
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, y)| p - y)
        .collect();
    assert!(grads.get(lv).unwrap().max_abs_diff(&t(&[1, 4], &expected)) < 1e-15);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(&[2]));
    assert!(matches!(
        tape.backward(x, &mut ParamStore::new()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2], 800.0));
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
}

/// Loss that mixes every output element with distinct weights, so that a
/// wrong adjoint in any position shows up.
fn probe_loss(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn check_unary<F>(name: &str, inputs: Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let report = gradcheck::check(&mut store, &inputs, 64, &mut rng(9), |tape, _, vars| {
        let y = f(tape, vars)?;
        probe_loss(tape, y, 77)
    })
    .unwrap();
    assert!(
        report.max_rel_err < 1e-5,
        "{name}: rel err {} at {}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut r = rng(6);
    let mut rn = |s: &[usize]| Tensor::randn(s, 1.0, &mut r);
    check_unary("matmul", vec![rn(&[3, 4]), rn(&[4, 2])], |tp, v| tp.matmul(v[0], v[1]));
    check_unary("bmm", vec![rn(&[2, 3, 3, 4]), rn(&[2, 3, 4, 2])], |tp, v| {
        tp.matmul(v[0], v[1])
    });
    check_unary("add_bcast", vec![rn(&[3, 2, 4]), rn(&[2, 4])], |tp, v| tp.add(v[0], v[1]));
    check_unary("mul", vec![rn(&[5]), rn(&[5])], |tp, v| tp.mul(v[0], v[1]));
    check_unary("scale", vec![rn(&[4])], |tp, v| tp.scale(v[0], -2.5));
    check_unary("permute", vec![rn(&[2, 3, 4])], |tp, v| tp.permute(v[0], &[2, 0, 1]));
    check_unary("pad+slice", vec![rn(&[3, 4])], |tp, v| {
        let p = tp.pad(v[0], 1, 2, 1)?;
        tp.slice(p, 1, 1, 4)
    });
    check_unary("roll", vec![rn(&[3, 5])], |tp, v| tp.roll(v[0], 1, -2));
    check_unary("reshape", vec![rn(&[3, 4])], |tp, v| tp.reshape(v[0], &[2, 6]));
    check_unary("softmax", vec![rn(&[3, 5])], |tp, v| tp.softmax_last(v[0]));
    check_unary("layer_norm", vec![rn(&[4, 6]), rn(&[6]), rn(&[6])], |tp, v| {
        tp.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check_unary("gelu", vec![rn(&[10])], |tp, v| tp.gelu(v[0]));
    check_unary("exp", vec![rn(&[6])], |tp, v| tp.exp(v[0]));
    check_unary("conv2d", vec![rn(&[2, 5, 5]), rn(&[3, 2, 3, 3]), rn(&[3])], |tp, v| {
        tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    });
    check_unary("conv2d_stride", vec![rn(&[2, 6, 6]), rn(&[3, 2, 2, 2])], |tp, v| {
        tp.conv2d(v[0], v[1], None, 2, 0)
    });
    check_unary("upsample", vec![rn(&[2, 2, 3])], |tp, v| tp.upsample2x(v[0]));
    check_unary("maxpool", vec![rn(&[2, 4, 5])], |tp, v| tp.maxpool2x2(v[0]));
    check_unary("stack", vec![rn(&[2, 3]), rn(&[2, 3]), rn(&[2, 3])], |tp, v| {
        let s = tp.stack_last(v)?;
        tp.select_last(s, 1)
    });

    let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    check_unary("bce", vec![rn(&[2, 3])], |tp, v| tp.bce_with_logits(v[0], &targets));
    let reg_t = Tensor::new(vec![6], vec![0.1, 2.0, -1.0, 0.5, 3.0, 0.0]).unwrap();
    let mask = [true, true, false, true, true, false];
    check_unary("smooth_l1", vec![rn(&[6])], |tp, v| {
        tp.smooth_l1(v[0], &reg_t, &mask, 2.0, 1.0)
    });
    let ce_t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.2, 0.3, 0.5]).unwrap();
    check_unary("cross_entropy", vec![rn(&[2, 3])], |tp, v| tp.cross_entropy(v[0], &ce_t));
}

#[test]
fn composite_graph_with_parameters_matches_finite_differences() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    store.insert("w1", Tensor::randn(&[4, 5], 0.5, &mut r)).unwrap();
    store.insert("b1", Tensor::randn(&[5], 0.5, &mut r)).unwrap();
    store.insert("g", Tensor::randn(&[5], 0.5, &mut r)).unwrap();
    store.insert("beta", Tensor::randn(&[5], 0.5, &mut r)).unwrap();
    store.insert("w2", Tensor::randn(&[5, 3], 0.5, &mut r)).unwrap();
    let x = Tensor::randn(&[6, 4], 1.0, &mut r);
    let labels = Tensor::new(
        vec![6, 3],
        (0..18).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let report = gradcheck::check(&mut store, &[x], 100, &mut r, |tp, s, v| {
        let (w1, b1) = (tp.param(s, "w1")?, tp.param(s, "b1")?);
        let h = tp.linear(v[0], w1, Some(b1))?;
        let (g, beta) = (tp.param(s, "g")?, tp.param(s, "beta")?);
        let h = tp.layer_norm(h, g, beta, 1e-5)?;
        let h = tp.gelu(h)?;
        let w2 = tp.param(s, "w2")?;
        let z = tp.matmul(h, w2)?;
        let sm = tp.softmax_last(z)?;
        let extra = tp.mean(sm)?;
        let ce = tp.bce_with_logits(z, &labels)?;
        tp.add(ce, extra)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn repeated_passes_are_bit_identical() {
    let run = || {
        let mut r = rng(11);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::randn(&[8, 8], 1.0, &mut r)).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let w = tape.param(&store, "w").unwrap();
        let y = tape.matmul(xv, w).unwrap();
        let y = tape.softmax_last(y).unwrap();
        let y = tape.gelu(y).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss, &mut store).unwrap();
        (
            tape.value(loss).data()[0].to_bits(),
            g.get(xv).unwrap().clone(),
            store.by_name("w").unwrap().grad.clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.2, b.2);
}

#[test]
fn shared_parameter_accumulates_both_uses() {
    let mut store = ParamStore::new();
    store.insert("p", Tensor::full(&[1], 3.0)).unwrap();
    let mut tape = Tape::new();
    let p1 = tape.param(&store, "p").unwrap();
    let p2 = tape.param(&store, "p").unwrap();
    assert_eq!(p1, p2);
    let y = tape.mul(p1, p2).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.by_name("p").unwrap().grad.data(), &[6.0]);
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permute_shape_algebra(shape in shape_strategy(), seed in any::<u64>()) {
        let r = shape.len();
        let mut perm: Vec<usize> = (0..r).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng(seed));
        let mut inv = vec![0; r];
        for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
        let x = Tensor::randn(&shape, 1.0, &mut rng(seed));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = tape.permute(xv, &perm).unwrap();
        let expected: Vec<usize> = perm.iter().map(|&i| shape[i]).collect();
        prop_assert_eq!(tape.shape(p), expected.as_slice());
        let back = tape.permute(p, &inv).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn pad_slice_roll_shapes(shape in shape_strategy(), before in 0usize..3, after in 0usize..3, shift in -7isize..7) {
        let axis = shape.len() - 1;
        let x = Tensor::randn(&shape, 1.0, &mut rng(1));
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = tape.pad(xv, axis, before, after).unwrap();
        prop_assert_eq!(tape.shape(p)[axis], shape[axis] + before + after);
        let s = tape.slice(p, axis, before, shape[axis]).unwrap();
        prop_assert_eq!(tape.value(s), &x);
        let rolled = tape.roll(xv, axis, shift).unwrap();
        prop_assert_eq!(tape.shape(rolled), shape.as_slice());
        let back = tape.roll(rolled, axis, -shift).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn matmul_and_conv_shapes(m in 1usize..6, k in 1usize..6, n in 1usize..6,
                              cin in 1usize..3, h in 3usize..7, w in 3usize..7,
                              ksz in 1usize..4, stride in 1usize..3, pad in 0usize..2) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[m, k]));
        let b = tape.constant(Tensor::zeros(&[k, n]));
        let c = tape.matmul(a, b).unwrap();
        prop_assert_eq!(tape.shape(c), &[m, n]);
        let x = tape.constant(Tensor::zeros(&[cin, h, w]));
        let wt = tape.constant(Tensor::zeros(&[2, cin, ksz, ksz]));
        let y = tape.conv2d(x, wt, None, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, (h + 2 * pad - ksz) / stride + 1, (w + 2 * pad - ksz) / stride + 1]);
    }
}
