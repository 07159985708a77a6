use ffr_core::losses::{
    id_loss1, id_loss2, margin_softmax, total_loss, triplet_cosine, CosFaceHead, Embedding, HeadConfig, LossWeights,
    MarginKind, SimilarityTerms, COSFACE_MARGIN, COSFACE_SCALE, TRIPLET_MARGIN,
};
use ffr_core::nn::{check_input_gradients, check_param_gradients, BnConfig, Mode, NnError, ParamRegistry, Session};
use ffr_core::rectifier::self_similarity;
use ffr_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// log(1 + e^-12), evaluated with 40-digit arithmetic.
const LOG1P_EXP_M12: f64 = 6.144193477732805e-6;

fn brute_id1(a0: &Tensor, a1: &Tensor, f0: &Tensor) -> f64 {
    let n = f0.shape()[0];
    let d = f0.len() / n;
    let dist = |x: &Tensor, i: usize| {
        (0..d)
            .map(|k| (x.data()[i * d + k] - f0.data()[i * d + k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    (0..n).map(|i| dist(a1, i) + dist(a0, i)).sum::<f64>() / n as f64
}

#[test]
fn id_loss1_examples() {
    let f0 = random(1, &[3, 2, 2, 2]);
    let mut tape = Tape::new();
    let (a, b, c) = (
        tape.constant(f0.clone()),
        tape.constant(f0.clone()),
        tape.constant(f0.clone()),
    );
    let l = id_loss1(&mut tape, a, b, c).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let mut shifted = f0.clone();
    for i in 0..3 {
        let v = shifted.at(&[i, 0, 0, 0]);
        shifted.set(&[i, 0, 0, 0], v + 1.0);
    }
    let s1 = tape.constant(shifted);
    let l = id_loss1(&mut tape, a, s1, c).unwrap();
    assert!((tape.value(l).item() - 1.0).abs() < 1e-15);

    let (x0, x1) = (random(2, &[3, 2, 2, 2]), random(3, &[3, 2, 2, 2]));
    let (v0, v1) = (tape.constant(x0.clone()), tape.constant(x1.clone()));
    let l = id_loss1(&mut tape, v0, v1, c).unwrap();
    assert!((tape.value(l).item() - brute_id1(&x0, &x1, &f0)).abs() <= 1e-10);

    let short = tape.constant(random(4, &[2, 2, 2, 2]));
    assert!(matches!(id_loss1(&mut tape, a, short, c), Err(NnError::Usage(_))));
}

#[test]
fn id_loss2_examples() {
    let mut tape = Tape::new();
    let f = random(5, &[2, 3, 2, 2]);
    let v = tape.constant(f);
    let s = self_similarity(&mut tape, v).unwrap();
    let l = id_loss2(&mut tape, &s, &s, &s, SimilarityTerms::Both).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    let constant = |tape: &mut Tape, c: f64| {
        let v = tape.constant(Tensor::full(&[2, 3, 2, 2], c));
        self_similarity(tape, v).unwrap()
    };
    let (a, b, c) = (
        constant(&mut tape, 0.2),
        constant(&mut tape, 1.5),
        constant(&mut tape, -3.0),
    );
    let l = id_loss2(&mut tape, &a, &b, &c, SimilarityTerms::Both).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);

    let x: Vec<_> = (0..3)
        .map(|k| {
            let v = tape.constant(random(10 + k, &[2, 3, 2, 2]));
            self_similarity(&mut tape, v).unwrap()
        })
        .collect();
    let both = id_loss2(&mut tape, &x[0], &x[1], &x[2], SimilarityTerms::Both).unwrap();
    let sp = id_loss2(&mut tape, &x[0], &x[1], &x[2], SimilarityTerms::Spatial).unwrap();
    let ch = id_loss2(&mut tape, &x[0], &x[1], &x[2], SimilarityTerms::Channel).unwrap();
    let val = |v| tape.value(v).clone();
    let expect_sp = brute_id1(&val(x[0].spatial), &val(x[1].spatial), &val(x[2].spatial));
    let expect_ch = brute_id1(&val(x[0].channel), &val(x[1].channel), &val(x[2].channel));
    assert!((tape.value(sp).item() - expect_sp).abs() <= 1e-10);
    assert!((tape.value(ch).item() - expect_ch).abs() <= 1e-10);
    assert!((tape.value(both).item() - expect_sp - expect_ch).abs() <= 1e-10);
}

fn triplet_of(a: &[f64], p: &[f64], n: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let d = a.len();
    let a = tape.constant(Tensor::new(&[1, d], a.to_vec()).unwrap());
    let p = tape.constant(Tensor::new(&[1, d], p.to_vec()).unwrap());
    let n = tape.constant(Tensor::new(&[1, d], n.to_vec()).unwrap());
    let l = triplet_cosine(&mut tape, a, p, n, TRIPLET_MARGIN).unwrap();
    tape.value(l).item()
}

#[test]
fn triplet_examples() {
    assert_eq!(TRIPLET_MARGIN, 0.1);
    // mirrored positive and negative give identical cosines
    assert_eq!(triplet_of(&[1.0, 0.0], &[0.3, 0.8], &[0.3, -0.8]), 0.1);
    assert_eq!(triplet_of(&[1.0, 0.0], &[2.0, 0.0], &[0.5, 0.75f64.sqrt()]), 0.0);
    assert_eq!(
        triplet_of(&[1.0, 0.0], &[0.7, 0.51f64.sqrt()], &[0.5, -(0.75f64.sqrt())]),
        0.0
    );
    // p = 0.5, n = 0.3 gives hinge(0.3)
    let l = triplet_of(&[1.0, 0.0], &[0.5, 0.75f64.sqrt()], &[0.7, 0.51f64.sqrt()]);
    assert!((l - 0.3).abs() < 1e-12);
}

#[test]
fn triplet_tie_is_exact_for_any_batch() {
    for n in 1..=40 {
        let mut tape = Tape::new();
        let a = tape.constant(random(30 + n as u64, &[n, 7]));
        let p = tape.constant(random(90 + n as u64, &[n, 7]));
        let l = triplet_cosine(&mut tape, a, p, p, TRIPLET_MARGIN).unwrap();
        assert_eq!(tape.value(l).item(), 0.1, "batch {n}");
    }
}

#[test]
fn triplet_scale_invariance() {
    let (a, p, n) = (random(20, &[4, 6]), random(21, &[4, 6]), random(22, &[4, 6]));
    let eval = |a: &Tensor, p: &Tensor, n: &Tensor| {
        let mut tape = Tape::new();
        let (a, p, n) = (
            tape.constant(a.clone()),
            tape.constant(p.clone()),
            tape.constant(n.clone()),
        );
        let l = triplet_cosine(&mut tape, a, p, n, 0.3).unwrap();
        tape.value(l).item()
    };
    let base = eval(&a, &p, &n);
    assert!(base > 0.0);
    for lam in [0.01, 3.0, 250.0] {
        let s = |t: &Tensor| t.map(|v| v * lam);
        assert!((eval(&s(&a), &p, &n) - base).abs() <= 1e-9);
        assert!((eval(&a, &s(&p), &n) - base).abs() <= 1e-9);
        assert!((eval(&a, &p, &s(&n)) - base).abs() <= 1e-9);
    }
}

fn softmax_of(cos: &[f64], label: usize, head: &HeadConfig) -> f64 {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::new(&[1, cos.len()], cos.to_vec()).unwrap());
    let l = margin_softmax(&mut tape, c, &[label], head).unwrap();
    tape.value(l).item()
}

#[test]
fn cosface_examples() {
    let head = HeadConfig::default();
    assert_eq!((head.scale, head.margin), (30.0, 0.4));
    assert_eq!((COSFACE_SCALE, COSFACE_MARGIN), (30.0, 0.4));
    let l = softmax_of(&[0.9, 0.1], 0, &head);
    assert!((l - LOG1P_EXP_M12).abs() <= 1e-15, "{l}");
    let l = softmax_of(&[0.5, 0.1], 0, &head);
    assert!((l - 2f64.ln()).abs() <= 1e-9);
    let l = softmax_of(&[-0.3, 0.1], 1, &head);
    assert!((l - 2f64.ln()).abs() <= 1e-9);
}

#[test]
fn cosface_rejects_bad_labels() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::new(&[1, 2], vec![0.1, 0.2]).unwrap());
    let r = margin_softmax(&mut tape, c, &[2], &HeadConfig::default());
    assert!(matches!(r, Err(NnError::Usage(_))));
}

#[test]
fn cosface_strictly_decreases_with_target_cosine() {
    let head = HeadConfig::default();
    let mut prev = f64::INFINITY;
    for k in 0..=40 {
        let t = -1.0 + k as f64 * 0.05;
        let l = softmax_of(&[t, 0.2, -0.4], 0, &head);
        assert!(l < prev && l >= 0.0);
        prev = l;
    }
}

fn head_registry(kind: HeadConfig) -> (CosFaceHead, ParamRegistry) {
    let head = CosFaceHead::new("head", 5, 6, kind).unwrap();
    let mut reg = ParamRegistry::new();
    head.register(&mut reg).unwrap();
    reg.init_params("", 7);
    (head, reg)
}

#[test]
fn cosface_scale_invariance() {
    let (head, reg) = head_registry(HeadConfig::default());
    let labels = [0, 3, 4, 1];
    let e = random(30, &[4, 6]);
    let eval = |reg: &ParamRegistry, e: &Tensor| {
        let mut s = Session::new(reg, Mode::Eval);
        let v = s.input(e.clone());
        let l = head.loss(&mut s, v, &labels).unwrap();
        s.value(l).item()
    };
    let base = eval(&reg, &e);
    for lam in [0.05, 7.0] {
        assert!((eval(&reg, &e.map(|v| v * lam)) - base).abs() <= 1e-9);
        let mut scaled = reg.clone();
        let w = reg.value("head.w").unwrap().map(|v| v * lam);
        scaled.set_value("head.w", w).unwrap();
        assert!((eval(&scaled, &e) - base).abs() <= 1e-9);
    }
}

#[test]
fn arcface_adds_angular_margin() {
    let head = HeadConfig::arcface();
    assert_eq!(head.kind, MarginKind::ArcFace);
    // target at θ = π/3 plus margin; other class fixed
    let theta: f64 = std::f64::consts::FRAC_PI_3;
    let l = softmax_of(&[theta.cos(), 0.2], 0, &head);
    let zt = 30.0 * (theta + head.margin).cos();
    let expected = ((zt).exp() + (30.0f64 * 0.2).exp()).ln() - zt;
    assert!((l - expected).abs() <= 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let reg = ParamRegistry::new();
    let step = 1e-5;
    for seed in 0..5 {
        let xs = [
            random(seed, &[2, 3, 2, 2]),
            random(seed + 100, &[2, 3, 2, 2]),
            random(seed + 200, &[2, 3, 2, 2]),
        ];
        let r = check_input_gradients(&reg, &xs, Mode::Eval, step, &|s, v| {
            id_loss1(&mut s.tape, v[0], v[1], v[2])
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "id1 {r:?}");
        let r = check_input_gradients(&reg, &xs, Mode::Eval, step, &|s, v| {
            let a = self_similarity(&mut s.tape, v[0])?;
            let b = self_similarity(&mut s.tape, v[1])?;
            let c = self_similarity(&mut s.tape, v[2])?;
            id_loss2(&mut s.tape, &a, &b, &c, SimilarityTerms::Both)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "id2 {r:?}");
        let flat: Vec<Tensor> = xs.iter().map(|x| x.reshape(&[2, 12]).unwrap()).collect();
        let r = check_input_gradients(&reg, &flat, Mode::Eval, step, &|s, v| {
            triplet_cosine(&mut s.tape, v[0], v[1], v[2], 0.9)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "triplet {r:?}");
        let cos = [random(seed + 300, &[3, 4]).map(|v| v * 0.9)];
        for head in [HeadConfig::default(), HeadConfig::arcface()] {
            let small = HeadConfig { scale: 4.0, ..head };
            let r = check_input_gradients(&reg, &cos, Mode::Eval, step, &|s, v| {
                margin_softmax(&mut s.tape, v[0], &[1, 0, 3], &small)
            })
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "softmax {r:?}");
        }
    }
}

#[test]
fn head_and_embedding_gradients() {
    let head = CosFaceHead::new(
        "head",
        4,
        3,
        HeadConfig {
            scale: 5.0,
            ..HeadConfig::default()
        },
    )
    .unwrap();
    let emb = Embedding::new("emb", 8, 3, BnConfig::default());
    let mut reg = ParamRegistry::new();
    head.register(&mut reg).unwrap();
    emb.register(&mut reg).unwrap();
    reg.init_params("", 3);
    let x = random(40, &[5, 2, 2, 2]);
    let labels = [0, 1, 2, 3, 1];
    let build = |s: &mut Session| {
        let xv = s.input(x.clone());
        let e = emb.forward(s, xv)?;
        head.loss(s, e, &labels)
    };
    let r = check_param_gradients(
        &reg,
        &["head.w", "emb.proj.w", "emb.bn.scale", "emb.proj.b"],
        Mode::Train,
        1e-5,
        &build,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-5, "{r:?}");
}

#[test]
fn total_loss_is_linear_in_components() {
    let mut tape = Tape::new();
    let cs: Vec<_> = [1.5, 2.0, 0.25, 4.0]
        .iter()
        .map(|&v| tape.constant(Tensor::scalar(v)))
        .collect();
    let comps = [cs[0], cs[1], cs[2], cs[3]];
    let t = total_loss(&mut tape, comps, &LossWeights::default()).unwrap();
    assert_eq!(tape.value(t).item(), 7.75);
    let only = LossWeights {
        id1: 0.0,
        id2: 0.0,
        triplet: 1.0,
        cls: 0.0,
    };
    let t = total_loss(&mut tape, comps, &only).unwrap();
    assert_eq!(tape.value(t).item(), 0.25);
    let none = LossWeights {
        id1: 0.0,
        id2: 0.0,
        triplet: 0.0,
        cls: 0.0,
    };
    assert!(matches!(total_loss(&mut tape, comps, &none), Err(NnError::Config(_))));

    // gradient of the total equals the weighted sum of component gradients
    let w = LossWeights {
        id1: 0.3,
        id2: 2.0,
        triplet: 0.0,
        cls: 1.7,
    };
    let x0 = random(50, &[3, 4]);
    let components = |tape: &mut Tape, x| {
        let sq = tape.square(x);
        let a = tape.sum_all(sq);
        let e = tape.exp(x);
        let b = tape.mean_all(e);
        let s = tape.sigmoid(x);
        let c = tape.sum_all(s);
        let n = tape.l2_norm(x, 1).unwrap();
        let d = tape.sum_all(n);
        [a, b, c, d]
    };
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let comps = components(&mut tape, x);
    let t = total_loss(&mut tape, comps, &w).unwrap();
    let g_total = tape.backward(t).unwrap().get(x).unwrap().clone();
    let mut expected = Tensor::zeros(&[3, 4]);
    for (k, wk) in w.as_array().into_iter().enumerate() {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let c = components(&mut tape, x)[k];
        let g = tape.backward(c).unwrap().get(x).unwrap().clone();
        for (e, gv) in expected.data_mut().iter_mut().zip(g.data()) {
            *e += wk * gv;
        }
    }
    assert!(g_total.max_abs_diff(&expected) <= 1e-8);
}

#[test]
fn losses_are_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for trial in 0..50 {
        let mut tape = Tape::new();
        let xs: Vec<_> = (0..3)
            .map(|k| tape.constant(random(trial * 3 + k, &[2, 3, 2, 2])))
            .collect();
        let l = id_loss1(&mut tape, xs[0], xs[1], xs[2]).unwrap();
        assert!(tape.value(l).item() > 0.0);
        let f: Vec<_> = xs.iter().map(|&x| tape.reshape(x, &[2, 12]).unwrap()).collect();
        let m = rng.gen_range(0.0..1.0);
        let l = triplet_cosine(&mut tape, f[0], f[1], f[2], m).unwrap();
        assert!(tape.value(l).item() >= 0.0);
        let cos = tape.constant(random(trial + 500, &[2, 3]));
        let l = margin_softmax(&mut tape, cos, &[0, 2], &HeadConfig::default()).unwrap();
        assert!(tape.value(l).item() >= 0.0);
    }
}
