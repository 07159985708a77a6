use ffr_core::tensor::gradcheck::{self, DEFAULT_STEP};
use ffr_core::tensor::{Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn assert_grad(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> ffr_core::tensor::Result<Var>) {
    let r = gradcheck::check(inputs, DEFAULT_STEP, build).unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

/// Runs `build` against 20 random draws of inputs with the given shapes.
fn sweep(shapes: &[&[usize]], build: &dyn Fn(&mut Tape, &[Var]) -> ffr_core::tensor::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        assert_grad(&inputs, build);
    }
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let i = tape.constant(Tensor::eye(3));
    let y = tape.matmul(i, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[19., 22., 43., 50.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b).unwrap_err() {
        TensorError::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn matmul_gradient() {
    sweep(&[&[3, 4], &[4, 2]], &|t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum_all(c))
    });
    // batched with broadcast from a rank-2 operand
    sweep(&[&[2, 3, 4], &[4, 3]], &|t, v| {
        let c = t.matmul(v[0], v[1])?;
        let c2 = t.square(c);
        Ok(t.sum_all(c2))
    });
    sweep(&[&[2, 1, 3, 2], &[1, 2, 2, 3]], &|t, v| {
        let c = t.matmul(v[0], v[1])?;
        let s = t.sigmoid(c);
        Ok(t.sum_all(s))
    });
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);

    let x = tape.constant(t(&[1, 1], &[-2.0]));
    let a = tape.constant(t(&[1], &[0.25]));
    let p = tape.prelu(x, a).unwrap();
    assert_eq!(tape.value(p).item(), -0.5);

    let h = tape.constant(t(&[2], &[-0.1, 0.3]));
    let hh = tape.hinge(h);
    assert_eq!(tape.value(hh).data(), &[0.0, 0.3]);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(tape.log(x), Err(TensorError::Domain { .. })));
}

#[test]
fn elementwise_gradients() {
    sweep(&[&[2, 3]], &|t, v| {
        let s = t.sigmoid(v[0]);
        Ok(t.sum_all(s))
    });
    sweep(&[&[2, 3]], &|t, v| {
        let s = t.exp(v[0]);
        Ok(t.sum_all(s))
    });
    sweep(&[&[2, 3]], &|t, v| {
        let e = t.exp(v[0]);
        let l = t.log(e)?;
        let l2 = t.square(l);
        Ok(t.sum_all(l2))
    });
    sweep(&[&[2, 3], &[3]], &|t, v| {
        let a = t.mul(v[0], v[1])?;
        let b = t.sub(a, v[1])?;
        let c = t.add(b, v[0])?;
        let d = t.square(c);
        Ok(t.sum_all(d))
    });
    sweep(&[&[2, 3], &[2, 1]], &|t, v| {
        let den = t.exp(v[1]);
        let q = t.div(v[0], den)?;
        Ok(t.sum_all(q))
    });
    // prelu: per-channel slope and scalar slope, derivative in both arguments
    sweep(&[&[2, 3, 2], &[3]], &|t, v| {
        let p = t.prelu(v[0], v[1])?;
        let q = t.square(p);
        Ok(t.sum_all(q))
    });
    sweep(&[&[4, 3], &[1]], &|t, v| {
        let p = t.prelu(v[0], v[1])?;
        Ok(t.sum_all(p))
    });
    sweep(&[&[5]], &|t, v| {
        let h = t.hinge(v[0]);
        Ok(t.sum_all(h))
    });
    sweep(&[&[5]], &|t, v| {
        let e = t.exp(v[0]);
        let s = t.sqrt(e)?;
        Ok(t.sum_all(s))
    });
}

#[test]
fn shape_op_examples() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.constant(random(&mut rng, &[2, 3, 4, 5]));
    let f1 = tape.flip(x, 3).unwrap();
    let f2 = tape.flip(f1, 3).unwrap();
    assert_eq!(tape.value(f2), tape.value(x));

    let y = tape.constant(random(&mut rng, &[2, 6, 4, 5]));
    let c = tape.concat(&[x, y], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 9, 4, 5]);

    let k = tape.constant(Tensor::full(&[3, 4], 2.5));
    let m = tape.mean(k, &[0, 1], false).unwrap();
    assert_eq!(tape.value(m).item(), 2.5);

    let bad = tape.constant(Tensor::zeros(&[2, 6, 3, 5]));
    assert!(matches!(tape.concat(&[x, bad], 1), Err(TensorError::Shape { .. })));
    assert!(tape.reshape(x, &[7, 7]).is_err());
}

#[test]
fn shape_op_gradients() {
    let w = t(
        &[2, 3, 2],
        &[0.3, -0.2, 0.5, 0.7, -0.9, 0.1, 0.4, 0.6, -0.5, 0.8, 0.2, -0.3],
    );
    sweep(&[&[2, 3, 2], &[2, 1, 2]], &|t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let f = t.flip(c, 2)?;
        let s = t.slice(f, 1, 1, 3)?;
        let p = t.permute(s, &[2, 0, 1])?;
        let r = t.reshape(p, &[2, 6])?;
        let m = t.mean(r, &[1], false)?;
        let q = t.square(m);
        let w = t.constant(w.clone());
        let x = t.mul(s, w)?;
        let xs = t.sum_all(x);
        let qs = t.sum_all(q);
        t.add(xs, qs)
    });
    sweep(&[&[3, 4]], &|t, v| {
        let s = t.sum(v[0], &[0], true)?;
        let b = t.mul(v[0], s)?;
        let tr = t.transpose_last(b)?;
        let sq = t.square(tr);
        t.mean(sq, &[0, 1], false)
    });
}

#[test]
fn cosine_examples() {
    let mut tape = Tape::new();
    let u = tape.constant(t(&[3], &[0.3, -1.2, 2.0]));
    let c = tape.cosine_similarity(u, u, 1e-12).unwrap();
    assert!((tape.value(c).item() - 1.0).abs() < 1e-15);
    let a = tape.constant(t(&[2], &[1.0, 0.0]));
    let b = tape.constant(t(&[2], &[0.0, 1.0]));
    let c = tape.cosine_similarity(a, b, 1e-12).unwrap();
    assert_eq!(tape.value(c).item(), 0.0);
    let z = tape.constant(Tensor::zeros(&[2]));
    let c = tape.cosine_similarity(z, a, 1e-12).unwrap();
    assert_eq!(tape.value(c).item(), 0.0);
}

#[test]
fn cosine_and_norm_gradients() {
    sweep(&[&[6], &[6]], &|t, v| t.cosine_similarity(v[0], v[1], 1e-12));
    sweep(&[&[3, 4], &[3, 4]], &|t, v| {
        let c = t.cosine_similarity(v[0], v[1], 1e-12)?;
        let s = t.square(c);
        Ok(t.sum_all(s))
    });
    sweep(&[&[3, 4]], &|t, v| {
        let n = t.l2_norm(v[0], 1)?;
        Ok(t.sum_all(n))
    });
    sweep(&[&[2, 3, 4]], &|t, v| {
        let n = t.l2_normalize(v[0], 1, 1e-12)?;
        let w = t.exp(v[0]);
        let p = t.mul(n, w)?;
        Ok(t.sum_all(p))
    });
}

#[test]
fn conv_gradients() {
    sweep(&[&[2, 2, 5, 5], &[3, 2, 3, 3]], &|t, v| {
        let y = t.conv2d(v[0], v[1], 1, 1)?;
        let s = t.square(y);
        Ok(t.sum_all(s))
    });
    sweep(&[&[1, 2, 6, 6], &[2, 2, 3, 3]], &|t, v| {
        let y = t.conv2d(v[0], v[1], 2, 1)?;
        let s = t.sigmoid(y);
        Ok(t.sum_all(s))
    });
    sweep(&[&[2, 3, 2, 2], &[2, 3, 1, 1]], &|t, v| {
        let y = t.conv2d(v[0], v[1], 1, 0)?;
        let s = t.square(y);
        Ok(t.sum_all(s))
    });
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 3, 6, 5]);
    let w = random(&mut rng, &[4, 3, 3, 3]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, 2, 1).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), &[2, 4, 3, 3]);
    for n in 0..2 {
        for o in 0..4 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..6).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.at(&[n, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[n, o, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.7));
    let z = tape.add(x, x).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 2.0);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
}

#[test]
fn sum_sigmoid_wx_gradient() {
    sweep(&[&[3, 4], &[4, 2]], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        let s = t.sigmoid(y);
        Ok(t.sum_all(s))
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let p = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(c, p).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap().item(), 2.0);
}

#[test]
fn shared_subexpression_equals_expanded_tree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xv = random(&mut rng, &[4]);
    // DAG: s = sigmoid(x) reused three times
    let mut dag = Tape::new();
    let x = dag.param(xv.clone());
    let s = dag.sigmoid(x);
    let a = dag.mul(s, s).unwrap();
    let b = dag.add(a, s).unwrap();
    let root = dag.sum_all(b);
    let gd = dag.backward(root).unwrap();
    // tree: each use recomputed
    let mut tree = Tape::new();
    let x2 = tree.param(xv);
    let s1 = tree.sigmoid(x2);
    let s2 = tree.sigmoid(x2);
    let s3 = tree.sigmoid(x2);
    let a = tree.mul(s1, s2).unwrap();
    let b = tree.add(a, s3).unwrap();
    let root = tree.sum_all(b);
    let gt = tree.backward(root).unwrap();
    assert!(gd.get(x).unwrap().max_abs_diff(gt.get(x2).unwrap()) < 1e-15);
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.param(random(&mut rng, &[2, 3, 5, 5]));
        let w = tape.param(random(&mut rng, &[4, 3, 3, 3]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let s = tape.sigmoid(y);
        let l = tape.mean_all(s);
        let g = tape.backward(l).unwrap();
        (tape.value(l).clone(), g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn flip_is_involution(data in prop::collection::vec(-10.0f64..10.0, 24), axis in 0usize..3) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3, 4], data).unwrap());
        let a = tape.flip(x, axis).unwrap();
        let b = tape.flip(a, axis).unwrap();
        prop_assert_eq!(tape.value(b), tape.value(x));
    }

    #[test]
    fn concat_then_slice_round_trips(a in prop::collection::vec(-5.0f64..5.0, 12), b in prop::collection::vec(-5.0f64..5.0, 8)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3, 2], a).unwrap());
        let y = tape.constant(Tensor::new(&[2, 2, 2], b).unwrap());
        let c = tape.concat(&[x, y], 1).unwrap();
        let xs = tape.slice(c, 1, 0, 3).unwrap();
        let ys = tape.slice(c, 1, 3, 2).unwrap();
        prop_assert_eq!(tape.value(xs), tape.value(x));
        prop_assert_eq!(tape.value(ys), tape.value(y));
    }

    #[test]
    fn reshape_preserves_values(data in prop::collection::vec(-5.0f64..5.0, 24)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 6], data.clone()).unwrap());
        let r = tape.reshape(x, &[2, 3, 4]).unwrap();
        let mut a = data;
        let mut b = tape.value(r).data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cosine_stays_in_range(u in prop::collection::vec(-3.0f64..3.0, 7), v in prop::collection::vec(-3.0f64..3.0, 7)) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[7], u).unwrap());
        let b = tape.constant(Tensor::new(&[7], v).unwrap());
        let c = tape.cosine_similarity(a, b, 1e-12).unwrap();
        let c = tape.value(c).item();
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
    }
}
