use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(11)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Reduce `y` to a scalar with fixed random weights so upstream grads are non-uniform.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check_op(shapes: &[&[usize]], bound: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let mut store = ParameterStore::<f64>::new();
    let mut r = rng();
    for (i, s) in shapes.iter().enumerate() {
        store.add(&format!("p{i}"), Tensor::uniform(s, bound, &mut r)).unwrap();
    }
    let report = grad_check(&mut store, 1e-5, |tape, store| {
        let vars: Vec<Var> = (0..store.len()).map(|i| tape.param(store, i)).collect();
        let y = f(tape, &vars)?;
        weighted_sum(tape, y, 99)
    })
    .unwrap();
    assert!(
        report.max_rel_error < 1e-6,
        "worst {} at {}[{}]",
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
}

#[test]
fn masked_softmax_example() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
    let mask = Mask::new(1, 3, vec![true, true, false]);
    let y = tape.masked_softmax(x, &mask).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5, 0.0]);
}

#[test]
fn fully_masked_row_is_zero_and_rows_sum_to_one() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::uniform(&[2, 3, 4], 3.0, &mut rng()));
    let mask = Mask::from_fn(3, 4, |r, c| r > 0 && c <= r);
    let y = tape.masked_softmax(x, &mask).unwrap();
    for (row, vals) in tape.value(y).chunks(4).enumerate() {
        let r = row % 3;
        if r == 0 {
            assert!(vals.iter().all(|&v| v == 0.0));
        } else {
            assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (c, &v) in vals.iter().enumerate() {
                assert_eq!(v == 0.0, c > r);
            }
        }
    }
    let loss = weighted_sum(&mut tape, y, 1).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    // masked entries and fully masked rows get no gradient
    assert!(g[..4].iter().all(|&v| v == 0.0));
    assert_eq!(g[4 + 3], 0.0);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 5], 3.7));
    let g = tape.constant(Tensor::full(&[5], 1.0));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng();
    let a = Tensor::<f64>::uniform(&[2, 3], 1.0, &mut r);
    let b = Tensor::<f64>::uniform(&[3, 2], 1.0, &mut r);
    let mut expect = [0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..3 {
                expect[i * 2 + j] += a.data[i * 3 + k] * b.data[k * 2 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[2, 2]);
    for (x, y) in tape.value(c).iter().zip(expect) {
        assert!((x - y).abs() < 1e-14);
    }

    // batched with per-batch right operand
    let a3 = Tensor::<f64>::uniform(&[4, 2, 3], 1.0, &mut r);
    let b3 = Tensor::<f64>::uniform(&[4, 3, 5], 1.0, &mut r);
    let (va, vb) = (tape.constant(a3.clone()), tape.constant(b3.clone()));
    let c = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.shape(c), &[4, 2, 5]);
    let out = tape.value(c);
    for n in 0..4 {
        for i in 0..2 {
            for j in 0..5 {
                let e: f64 = (0..3)
                    .map(|k| a3.data[n * 6 + i * 3 + k] * b3.data[n * 15 + k * 5 + j])
                    .sum();
                assert!((out[n * 10 + i * 5 + j] - e).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    assert!(tape.reshape(a, &[5]).is_err());
    assert!(tape.slice(a, 1, 2, 4).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::zeros(&[3]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn sum_and_square_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[3], &[1.0, -2.0, 0.5]));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.variable(t(&[3], &[1.0, -2.0, 0.5]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(t(&[2], &[1.0, 2.0]));
    let x = tape.variable(t(&[2], &[3.0, 4.0]));
    let y = tape.mul(c, x).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn grad_check_elementwise_ops() {
    check_op(&[&[2, 3], &[2, 3]], 1.0, |tp, v| tp.add(v[0], v[1]));
    check_op(&[&[2, 3], &[3]], 1.0, |tp, v| tp.add(v[0], v[1]));
    check_op(&[&[2, 3], &[3]], 1.0, |tp, v| tp.sub(v[0], v[1]));
    check_op(&[&[4, 2, 3], &[2, 3]], 1.0, |tp, v| tp.mul(v[0], v[1]));
    check_op(&[&[5]], 1.0, |tp, v| Ok(tp.scale(v[0], -2.5)));
    check_op(&[&[5]], 1.0, |tp, v| Ok(tp.div_scalar(v[0], 3.0)));
    check_op(&[&[5]], 2.0, |tp, v| Ok(tp.exp(v[0])));
    check_op(&[&[5]], 2.0, |tp, v| {
        let e = tp.exp(v[0]);
        Ok(tp.log(e))
    });
    check_op(&[&[5]], 2.0, |tp, v| Ok(tp.tanh(v[0])));
    check_op(&[&[5]], 4.0, |tp, v| Ok(tp.sigmoid(v[0])));
    check_op(&[&[7]], 2.0, |tp, v| Ok(tp.relu(v[0])));
    check_op(&[&[7]], 8.0, |tp, v| Ok(tp.softplus(v[0])));
    check_op(&[&[7]], 2.0, |tp, v| Ok(tp.abs(v[0])));
    check_op(&[&[9]], 2.0, |tp, v| Ok(tp.clamp(v[0], -1.0, 0.5)));
}

#[test]
fn grad_check_reductions_and_structure() {
    check_op(&[&[2, 3]], 1.0, |tp, v| {
        let s = tp.sum(v[0]);
        let m = tp.mean(v[0]);
        let p = tp.mul(s, m)?;
        tp.reshape(p, &[1])
    });
    check_op(&[&[2, 3, 2], &[2, 1, 2], &[2, 4, 2]], 1.0, |tp, v| tp.concat(v, 1));
    check_op(&[&[3, 5, 2]], 1.0, |tp, v| tp.slice(v[0], 1, 1, 4));
    check_op(&[&[2, 3, 4]], 1.0, |tp, v| tp.transpose(v[0], 0, 2));
    check_op(&[&[2, 3, 4]], 1.0, |tp, v| tp.reshape(v[0], &[6, 4]));
    check_op(&[&[4, 3]], 1.0, |tp, v| tp.embedding(v[0], &[2, 0, 2, 3]));
}

#[test]
fn grad_check_matmul_and_normalisation() {
    check_op(&[&[2, 4, 3], &[3, 5]], 1.0, |tp, v| tp.matmul(v[0], v[1]));
    check_op(&[&[2, 4, 3], &[2, 3, 5]], 1.0, |tp, v| tp.matmul(v[0], v[1]));
    let mask = Mask::from_fn(3, 4, |r, c| c <= r + 1 && r != 1);
    check_op(&[&[2, 3, 4]], 2.0, move |tp, v| tp.masked_softmax(v[0], &mask));
    check_op(&[&[3, 4]], 2.0, |tp, v| Ok(tp.log_softmax(v[0])));
    check_op(&[&[3, 6], &[6], &[6]], 1.0, |tp, v| tp.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut r = rng();
    let mut store = ParameterStore::<f64>::new();
    store.add("w1", Tensor::uniform(&[4, 8], 0.5, &mut r)).unwrap();
    store.add("b1", Tensor::uniform(&[8], 0.5, &mut r)).unwrap();
    store.add("w2", Tensor::uniform(&[8, 3], 0.5, &mut r)).unwrap();
    store.add("b2", Tensor::uniform(&[3], 0.5, &mut r)).unwrap();
    let x = Tensor::<f64>::uniform(&[5, 4], 1.0, &mut r);
    let report = grad_check(&mut store, 1e-5, |tape, store| {
        let x = tape.constant(x.clone());
        let p: Vec<Var> = (0..4).map(|i| tape.param(store, i)).collect();
        let h = tape.matmul(x, p[0])?;
        let h = tape.add(h, p[1])?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, p[2])?;
        let o = tape.add(o, p[3])?;
        let l = tape.log_softmax(o);
        let m = tape.mean(l);
        Ok(tape.scale(m, -1.0))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.entries_checked, 32 + 8 + 24 + 3);
}

#[test]
fn grad_check_linear_and_ignored_parameter() {
    let mut store = ParameterStore::<f64>::new();
    store.add("used", Tensor::uniform(&[4], 1.0, &mut rng())).unwrap();
    store.add("ignored", Tensor::zeros(&[2])).unwrap();
    let report = grad_check(&mut store, 1e-5, |tape, store| {
        let w = tape.param(store, 0);
        let _unused = tape.param(store, 1);
        let c = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        let y = tape.mul(w, c)?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");

    let mut tape = Tape::new();
    let w = tape.param(&store, 0);
    let u = tape.param(&store, 1);
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    tape.accumulate_param_grads(&mut store);
    assert!(tape.grad(u).is_none());
    assert!(store.get(1).grad.iter().all(|&g| g == 0.0));
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    };
    let mut store = ParameterStore::<f64>::new();
    store.add("w", Tensor::scalar(2.0)).unwrap();
    store.adam_step(&cfg);
    assert_eq!(store.get(0).value.data[0], 2.0);
    assert_eq!(store.step, 1);

    let mut store = ParameterStore::<f64>::new();
    store.add("w", Tensor::scalar(2.0)).unwrap();
    store.get_mut(0).grad[0] = 1.0;
    store.adam_step(&cfg);
    assert!((store.get(0).value.data[0] - 1.9).abs() < 1e-6);

    // clipping: grad norm 10 becomes 1, so the stored first moment is 0.1 * 0.1 * 10
    let mut store = ParameterStore::<f64>::new();
    store.add("w", Tensor::from_vec(vec![0.0, 0.0])).unwrap();
    store.get_mut(0).grad = vec![6.0, 8.0];
    let norm = store.adam_step(&AdamConfig::default());
    assert_eq!(norm, 10.0);
    assert!((store.get(0).m[0] - 0.1 * 0.6).abs() < 1e-12);
    assert!((store.get(0).m[1] - 0.1 * 0.8).abs() < 1e-12);
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::uniform(&[3, 8, 16], 1.0, &mut rng()));
        let w = tape.constant(Tensor::uniform(&[16, 16], 1.0, &mut rng()));
        let y = tape.matmul(x, w).unwrap();
        let z = tape.masked_softmax(y, &Mask::all(8, 16)).unwrap();
        tape.value(z).to_vec()
    };
    assert_eq!(run(), run());
}

/// Reference attention built from the primitive ops.
fn attention_reference(tape: &mut Tape<f64>, qkv: Var, heads: usize, mask: &Mask) -> Result<Var> {
    let s = tape.shape(qkv).to_vec();
    let (b, n, d) = (s[0], s[1], s[2] / 3);
    let dh = d / heads;
    let part = |tape: &mut Tape<f64>, i: usize| -> Result<Var> {
        let x = tape.slice(qkv, 2, i * d, (i + 1) * d)?;
        let x = tape.reshape(x, &[b, n, heads, dh])?;
        tape.transpose(x, 1, 2)
    };
    let (q, k, v) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
    let kt = tape.transpose(k, 2, 3)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let p = tape.masked_softmax(scores, mask)?;
    let o = tape.matmul(p, v)?;
    let o = tape.transpose(o, 1, 2)?;
    tape.reshape(o, &[b, n, d])
}

#[test]
fn fused_attention_matches_reference() {
    let mask = Mask::from_fn(6, 6, |r, c| c / 2 <= r / 2);
    let x = Tensor::<f64>::uniform(&[2, 6, 12], 1.0, &mut rng());
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let fused = tape.attention(xv, 2, &mask).unwrap();
    let reference = attention_reference(&mut tape, xv, 2, &mask).unwrap();
    for (a, b) in tape.value(fused).iter().zip(tape.value(reference)) {
        assert!((a - b).abs() < 1e-12);
    }
    let w = tape.attention_weights(fused).unwrap();
    assert_eq!(w.len(), 2 * 2 * 36);
    for (i, &p) in w.iter().enumerate() {
        let (r, c) = ((i / 6) % 6, i % 6);
        if !mask.get(r, c) {
            assert_eq!(p, 0.0);
        }
    }
    check_op(&[&[2, 6, 12]], 1.0, move |tp, v| tp.attention(v[0], 2, &mask));
}
