use mcrpl::numcore::{kernels, Adam, NumError, Tape, Tensor, Var, WarmupSchedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central-difference check of every input element, in f64. Elements whose
/// ±h evaluations cross a ReLU/abs kink are skipped.
fn check_grad<F>(inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let h = 1e-3;
    let eval = |ins: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad(grad)))
            .collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = eval(&inputs, true);
    let base_sig = tape.kink_signature();
    tape.backward(loss).unwrap();
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].values_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].values_mut()[j] -= h;
            let (tp, _, lp) = eval(&plus, false);
            let (tm, _, lm) = eval(&minus, false);
            if tp.kink_signature() != base_sig || tm.kink_signature() != base_sig {
                continue;
            }
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
            let a = analytic[j];
            if a.abs().max(fd.abs()) > 1e-4 {
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                assert!(rel < 1e-3, "input {i} elem {j}: analytic {a} vs fd {fd}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0, "no element was checked");
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&mut rng, shape));
    let p = tape.mul(v, w).unwrap();
    tape.sum_all(p)
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::<f32>::new();
    let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).values(), &[3.0, 4.0]);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 1]);
    assert_eq!(tape.value(c).item(), 11.0);
}

#[test]
fn matmul_rejects_mismatch() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(NumError::Shape(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_tensor(&mut rng, vec![3, 4]);
    let b = random_tensor(&mut rng, vec![4, 2]);
    check_grad(vec![a, b], |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, c, 11)
    });
}

#[test]
fn batch_matmul_gradients_both_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_tensor(&mut rng, vec![2, 3, 4]);
    let b = random_tensor(&mut rng, vec![2, 4, 5]);
    let bt = random_tensor(&mut rng, vec![2, 5, 4]);
    check_grad(vec![a.clone(), b], |t, v| {
        let c = t.batch_matmul(v[0], v[1], false).unwrap();
        weighted_sum(t, c, 12)
    });
    check_grad(vec![a, bt], |t, v| {
        let c = t.batch_matmul(v[0], v[1], true).unwrap();
        weighted_sum(t, c, 13)
    });
}

#[test]
fn batch_matmul_transposed_equals_explicit_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, vec![1, 3, 4]);
    let b = random_tensor(&mut rng, vec![1, 2, 4]);
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let c = tape.batch_matmul(av, bv, true).unwrap();
    let expected = kernels::gemm(a.values(), &kernels::transpose(b.values(), 2, 4), 3, 4, 2);
    assert_eq!(tape.value(c).values(), expected.as_slice());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax(x, None).unwrap();
    assert_eq!(tape.value(y).values(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, None).unwrap();
    let v = tape.value(y).values();
    assert_eq!(v[0], 1.0);
    assert_eq!(v[1], 0.0);
    assert!(tape.value(y).all_finite());
}

#[test]
fn masked_softmax_zeroes_excluded_entries() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let keep = [true, false, true, false, false, false];
    let y = tape.softmax(x, Some(&keep)).unwrap();
    let v = tape.value(y).values();
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-6);
    assert_eq!(&v[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, vec![3, 5]);
    let keep: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
    check_grad(vec![x.clone()], |t, v| {
        let y = t.softmax(v[0], None).unwrap();
        weighted_sum(t, y, 14)
    });
    check_grad(vec![x], move |t, v| {
        let y = t.softmax(v[0], Some(&keep)).unwrap();
        weighted_sum(t, y, 15)
    });
}

#[test]
fn relu_examples_and_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap().with_grad(true));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
    let s = tape.sum_all(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-3.0, -0.5, -2.0]).unwrap());
    let y = tape.relu(x);
    assert!(tape.value(y).values().iter().all(|&v| v == 0.0));

    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap().with_grad(true));
    let y = tape.relu(x);
    let s = tape.sum_all(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
    let y = tape.l2_normalize_rows(x);
    let v = tape.value(y).values();
    assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    assert_eq!(&v[2..], &[0.0, 0.0]);
}

#[test]
fn normalization_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, vec![4, 6]);
    check_grad(vec![x.clone()], |t, v| {
        let y = t.l2_normalize_rows(v[0]);
        weighted_sum(t, y, 16)
    });
    check_grad(vec![x], |t, v| {
        let y = t.layer_normalize_rows(v[0]);
        weighted_sum(t, y, 17)
    });
}

#[test]
fn gather_rows_examples() {
    let mut tape = Tape::<f32>::new();
    let table = tape.leaf(
        Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])
            .unwrap()
            .with_grad(true),
    );
    let g = tape.gather_rows(table, &[0, 0]).unwrap();
    assert_eq!(tape.value(g).values(), &[1.0, 2.0, 1.0, 2.0]);
    let s = tape.sum_all(g);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0]);

    let mut tape = Tape::<f32>::new();
    let table = tape.constant(Tensor::zeros(vec![3, 5]));
    let e = tape.gather_rows(table, &[]).unwrap();
    assert_eq!(tape.value(e).shape(), &[0, 5]);
    assert!(matches!(
        tape.gather_rows(table, &[3]),
        Err(NumError::Index { index: 3, bound: 3 })
    ));
}

#[test]
fn gather_rows_copies_source_rows_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = random_tensor(&mut rng, vec![6, 3]).cast::<f32>();
    let ids: Vec<usize> = (0..10).map(|_| rng.random_range(0..6)).collect();
    let mut tape = Tape::new();
    let tv = tape.constant(t.clone());
    let g = tape.gather_rows(tv, &ids).unwrap();
    for (r, &id) in ids.iter().enumerate() {
        assert_eq!(tape.value(g).row(r), t.row(id));
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let loss = tape.cross_entropy(l, &[Some(0)]).unwrap();
    assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let l = tape.constant(Tensor::new(vec![1, 2], vec![20.0, 0.0]).unwrap());
    let loss = tape.cross_entropy(l, &[Some(0)]).unwrap();
    let v = tape.value(loss).item();
    assert!(v > 0.0 && (v - 2.061e-9).abs() < 1e-11, "{v}");

    assert!(matches!(
        tape.cross_entropy(l, &[Some(2)]),
        Err(NumError::Index { index: 2, bound: 2 })
    ));
}

#[test]
fn cross_entropy_matches_composed_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random_tensor(&mut rng, vec![4, 7]);
    let targets = [3usize, 0, 6, 2];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape
        .cross_entropy(l, &targets.iter().map(|&t| Some(t)).collect::<Vec<_>>())
        .unwrap();
    let mut expected = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expected -= (row[t].exp() / z).ln();
    }
    expected /= 4.0;
    assert!((tape.value(loss).item() - expected).abs() < 1e-6);
}

#[test]
fn cross_entropy_ignores_masked_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let logits = random_tensor(&mut rng, vec![3, 4]);
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone().with_grad(true));
    let loss = tape.cross_entropy(l, &[None, Some(1), None]).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(l).unwrap();
    assert!(g[..4].iter().chain(&g[8..]).all(|&v| v == 0.0));

    check_grad(vec![logits], |t, v| t.cross_entropy(v[0], &[Some(2), None, Some(0)]).unwrap());
}

#[test]
fn linear_cross_entropy_matches_unfused_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // more rows than one internal block
    let h = random_tensor(&mut rng, vec![70, 3]);
    let w = random_tensor(&mut rng, vec![5, 3]);
    let bias = random_tensor(&mut rng, vec![5]);
    let targets: Vec<usize> = (0..70).map(|i| (i * 7 + 3) % 5).collect();

    let run = |fused: bool| {
        let mut tape = Tape::new();
        let vs: Vec<Var> = [&h, &w, &bias].iter().map(|t| tape.leaf((*t).clone().with_grad(true))).collect();
        let loss = if fused {
            tape.linear_cross_entropy(vs[0], vs[1], vs[2], &targets).unwrap()
        } else {
            let wt = tape.transpose(vs[1]).unwrap();
            let z = tape.matmul(vs[0], wt).unwrap();
            let z = tape.add_row(z, vs[2]).unwrap();
            tape.cross_entropy(z, &targets.iter().map(|&t| Some(t)).collect::<Vec<_>>()).unwrap()
        };
        let scaled = tape.scale(loss, 1.7);
        tape.backward(scaled).unwrap();
        let grads: Vec<Vec<f64>> = vs.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();
        (tape.value(loss).item(), grads)
    };
    let (lf, gf) = run(true);
    let (lu, gu) = run(false);
    assert!((lf - lu).abs() < 1e-12, "{lf} vs {lu}");
    for (a, b) in gf.iter().zip(&gu) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    let small = random_tensor(&mut rng, vec![4, 3]);
    check_grad(vec![small, w, bias], |t, v| t.linear_cross_entropy(v[0], v[1], v[2], &[0, 4, 2, 2]).unwrap());
}

#[test]
fn remaining_primitives_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, vec![4, 3]);
    let b = random_tensor(&mut rng, vec![2, 3]);
    let bias = random_tensor(&mut rng, vec![3]);
    let cube = random_tensor(&mut rng, vec![2, 4, 3]);
    check_grad(vec![a.clone(), b.clone(), bias.clone()], |t, v| {
        let c = t.concat_rows(v[0], v[1]).unwrap();
        let s = t.slice_rows(c, 1, 5).unwrap();
        let r = t.add_row(s, v[2]).unwrap();
        let tr = t.transpose(r).unwrap();
        let rs = t.reshape(tr, vec![12]).unwrap();
        let ab = t.abs(rs);
        let sc = t.scale(ab, 0.7);
        weighted_sum(t, sc, 18)
    });
    check_grad(vec![cube], |t, v| {
        let m = t.mean_axis1(v[0]).unwrap();
        let s = t.sum_last(m).unwrap();
        let sq = t.mul(s, s).unwrap();
        t.sum_all(sq)
    });
    check_grad(vec![a.clone(), a], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let r = t.relu(s);
        weighted_sum(t, r, 19)
    });
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad(true));
    let s = tape.sum_all(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.backward(s), Err(NumError::BackwardTwice));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, vec![3, 4]);
    let w = random_tensor(&mut rng, vec![4, 4]);
    let (ca, cb) = (0.3, -1.7);
    let build = |tape: &mut Tape<f64>, xv: Var, wv: Var| {
        let h = tape.matmul(xv, wv).unwrap();
        let p = tape.softmax(h, None).unwrap();
        let l1 = tape.sum_all(p);
        let r = tape.relu(h);
        let sq = tape.mul(r, r).unwrap();
        let l2 = tape.sum_all(sq);
        (l1, l2)
    };
    let grad_of = |which: u8| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_grad(true));
        let wv = tape.leaf(w.clone().with_grad(true));
        let (l1, l2) = build(&mut tape, xv, wv);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => {
                let a = tape.scale(l1, ca);
                let b = tape.scale(l2, cb);
                tape.add(a, b).unwrap()
            }
        };
        tape.backward(loss).unwrap();
        tape.grad(wv).unwrap().to_vec()
    };
    let (g1, g2, gc) = (grad_of(1), grad_of(2), grad_of(0));
    for i in 0..gc.len() {
        let expected = ca * g1[i] + cb * g2[i];
        assert!((gc[i] - expected).abs() < 1e-12 * (1.0 + expected.abs()));
    }
}

#[test]
fn operations_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&mut rng, vec![5, 8]).cast::<f32>();
        let w = random_tensor(&mut rng, vec![8, 8]).cast::<f32>();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.with_grad(true));
        let wv = tape.leaf(w.with_grad(true));
        let h = tape.matmul(xv, wv).unwrap();
        let n = tape.l2_normalize_rows(h);
        let loss = tape.cross_entropy(n, &[Some(1), Some(2), None, Some(7), Some(0)]).unwrap();
        tape.backward(loss).unwrap();
        (tape.value(n).clone(), tape.grad(wv).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.values(), b.values());
    assert_eq!(ga, gb);
}

#[test]
fn adam_first_step_is_sign_like() {
    let mut adam = Adam::<f64>::new(&[3]);
    let mut p = vec![1.0, 1.0, 1.0];
    let g = [0.5, -2.0, 1e-3];
    adam.step(&mut [&mut p], &[&g], 0.01).unwrap();
    for (pj, gj) in p.iter().zip(g) {
        let expected = 1.0 - 0.01 * gj / (gj.abs() + 1e-8);
        assert!((pj - expected).abs() < 1e-12);
    }
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut adam = Adam::<f32>::new(&[2]);
    let mut p = vec![0.25f32, -3.0];
    adam.step(&mut [&mut p], &[&[0.0, 0.0]], 0.001).unwrap();
    assert_eq!(p, vec![0.25, -3.0]);
}

#[test]
fn adam_two_steps_match_moment_recursion() {
    let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 0.05, 0.3);
    let mut adam = Adam::<f64>::new(&[1]);
    let mut p = vec![2.0];
    adam.step(&mut [&mut p], &[&[g]], lr).unwrap();
    adam.step(&mut [&mut p], &[&[g]], lr).unwrap();

    let mut expected = 2.0;
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=2 {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        expected -= lr * mh / (vh.sqrt() + eps);
    }
    assert!((p[0] - expected).abs() < 1e-6);
    assert_eq!(adam.step_count(), 2);
    assert_eq!(adam.state().first[0].len(), 1);
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut adam = Adam::<f32>::new(&[2]);
    let mut p = vec![0.0f32; 3];
    assert!(matches!(
        adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], 0.1),
        Err(NumError::Shape(_))
    ));
}

#[test]
fn warmup_reaches_max_after_warmup_epochs() {
    let s = WarmupSchedule::new(0.001, 10);
    for e in 1..=30u32 {
        let expected = 0.001 * (e as f64 / 10.0).min(1.0);
        assert_eq!(s.lr(e), expected);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f32..50.0, 1..40)) {
        let n = row.len();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, n], row).unwrap());
        let y = tape.softmax(x, None).unwrap();
        let v = tape.value(y).values();
        prop_assert!(v.iter().all(|&p| p >= 0.0));
        let s: f64 = v.iter().map(|&p| p as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l2_rows_have_unit_norm(row in proptest::collection::vec(-10.0f32..10.0, 1..20)) {
        let n = row.len();
        let zero = row.iter().all(|&v| v == 0.0);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, n], row).unwrap());
        let y = tape.l2_normalize_rows(x);
        let norm: f64 = tape.value(y).values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if zero {
            prop_assert_eq!(norm, 0.0);
        } else if tape.value(x).values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() > 1e-8 {
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
