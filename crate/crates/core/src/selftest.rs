//! Built-in checks run by `ffr selftest`: a finite-difference sweep over
//! every differentiable operation and layer, and a set of structural
//! invariants on freshly initialized modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::evaluator::{enhanced_score, SweepResult};
use crate::losses::{id_loss1, id_loss2, margin_softmax, triplet_cosine, Embedding, HeadConfig, SimilarityTerms};
use crate::nn::{
    check_input_gradients, check_param_gradients, BatchNorm, BnConfig, ConvBlock, LinearBlock, Mode, NnError,
    ParamKind, ParamRegistry, ResidualStack, Session,
};
use crate::rectifier::{apply_channel, apply_spatial, flipped_fusion, self_similarity, Rectifier, RectifierConfig};
use crate::synth::derive_seed;
use crate::tensor::gradcheck::{self, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{Tape, Tensor, Var};

/// Largest relative error a gradient check may show.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Largest relative error seen (gradient suite only).
    pub worst: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            passed: 0,
            total: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.passed == self.total
    }

    fn record(&mut self, name: &str, outcome: std::result::Result<(), String>) {
        self.total += 1;
        match outcome {
            Ok(()) => self.passed += 1,
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }
}

type Check = Box<dyn Fn(u64) -> crate::nn::Result<GradCheckReport> + Sync>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `y` against fixed, position-dependent weights so every output
/// coordinate contributes a distinct amount to the scalar.
fn project(t: &mut Tape, y: Var) -> crate::tensor::Result<Var> {
    let w = Tensor::from_fn(t.shape(y), |i| (1.3 * i as f64 + 0.7).sin());
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

fn tape_case(shapes: Vec<Vec<usize>>, build: fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>) -> Check {
    Box::new(move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        Ok(gradcheck::check(&inputs, DEFAULT_STEP, &|t, v| {
            let y = build(t, v)?;
            project(t, y)
        })?)
    })
}

/// Randomizes every entry, including zero-initialized residual scales and
/// running statistics (kept positive for variances).
fn randomize(reg: &mut ParamRegistry, seed: u64) {
    let names: Vec<(String, ParamKind)> = reg.iter().map(|(n, e)| (n.to_string(), e.kind)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (n, kind) in names {
        let shape = reg.value(&n).expect("listed").shape().to_vec();
        let t = match kind {
            ParamKind::RunningVar | ParamKind::BnScale => Tensor::from_fn(&shape, |_| rng.gen_range(0.5..1.5)),
            _ => random(&mut rng, &shape),
        };
        reg.set_value(&n, t).expect("same shape");
    }
}

fn worst(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    if b.max_rel_error > a.max_rel_error || b.max_rel_error.is_nan() {
        b
    } else {
        a
    }
}

/// Checks input and parameter gradients of a session-level function.
fn session_case(
    register: fn(&mut ParamRegistry) -> crate::nn::Result<()>,
    shapes: Vec<Vec<usize>>,
    mode: Mode,
    build: fn(&mut Session, &[Var]) -> crate::nn::Result<Var>,
) -> Check {
    Box::new(move |seed| {
        let mut reg = ParamRegistry::new();
        register(&mut reg)?;
        randomize(&mut reg, derive_seed(seed, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let projected = |s: &mut Session, v: &[Var]| -> crate::nn::Result<Var> {
            let y = build(s, v)?;
            Ok(project(&mut s.tape, y)?)
        };
        let by_input = check_input_gradients(&reg, &inputs, mode, DEFAULT_STEP, &projected)?;
        let names: Vec<String> = reg
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let fixed = inputs.clone();
        let by_param = check_param_gradients(&reg, &names, mode, DEFAULT_STEP, &|s| {
            let vs: Vec<Var> = fixed.iter().map(|t| s.input(t.clone())).collect();
            projected(s, &vs)
        })?;
        Ok(worst(by_input, by_param))
    })
}

fn no_params(_: &mut ParamRegistry) -> crate::nn::Result<()> {
    Ok(())
}

fn small_rectifier() -> Rectifier {
    let cfg = RectifierConfig {
        channels: 3,
        height: 2,
        width: 3,
        groups: 1,
        units_per_group: 1,
        chn_hidden: 3,
        spc_hidden: 2,
        ..RectifierConfig::default()
    };
    Rectifier::new("r", cfg).expect("valid config")
}

fn head(kind: &str) -> HeadConfig {
    match kind {
        "arcface" => HeadConfig::arcface(),
        _ => HeadConfig::default(),
    }
}

/// Every differentiable operation and composite, by name.
pub fn gradient_cases() -> Vec<(&'static str, Check)> {
    let v = |s: &[&[usize]]| s.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    vec![
        (
            "add_broadcast",
            tape_case(v(&[&[2, 3], &[3]]), |t, x| t.add(x[0], x[1])),
        ),
        (
            "sub_broadcast",
            tape_case(v(&[&[2, 3], &[2, 1]]), |t, x| t.sub(x[0], x[1])),
        ),
        (
            "mul_broadcast",
            tape_case(v(&[&[2, 3], &[1, 3]]), |t, x| t.mul(x[0], x[1])),
        ),
        (
            "div",
            tape_case(v(&[&[2, 3], &[2, 3]]), |t, x| {
                let d = t.exp(x[1]);
                t.div(x[0], d)
            }),
        ),
        (
            "scale_neg_add_scalar",
            tape_case(v(&[&[4]]), |t, x| {
                let a = t.scale(x[0], 2.5);
                let b = t.neg(a);
                Ok(t.add_scalar(b, 0.3))
            }),
        ),
        ("sigmoid", tape_case(v(&[&[2, 3]]), |t, x| Ok(t.sigmoid(x[0])))),
        ("exp", tape_case(v(&[&[2, 3]]), |t, x| Ok(t.exp(x[0])))),
        (
            "log",
            tape_case(v(&[&[2, 3]]), |t, x| {
                let e = t.exp(x[0]);
                let e = t.add_scalar(e, 0.1);
                t.log(e)
            }),
        ),
        (
            "sqrt",
            tape_case(v(&[&[2, 3]]), |t, x| {
                let e = t.exp(x[0]);
                t.sqrt(e)
            }),
        ),
        ("hinge", tape_case(v(&[&[6]]), |t, x| Ok(t.hinge(x[0])))),
        ("clamp_min", tape_case(v(&[&[6]]), |t, x| Ok(t.clamp_min(x[0], 0.1)))),
        ("square", tape_case(v(&[&[2, 3]]), |t, x| Ok(t.square(x[0])))),
        ("prelu", tape_case(v(&[&[2, 3, 2], &[3]]), |t, x| t.prelu(x[0], x[1]))),
        ("matmul", tape_case(v(&[&[3, 4], &[4, 2]]), |t, x| t.matmul(x[0], x[1]))),
        (
            "matmul_batched",
            tape_case(v(&[&[2, 3, 4], &[2, 4, 2]]), |t, x| t.matmul(x[0], x[1])),
        ),
        (
            "transpose_last",
            tape_case(v(&[&[2, 3, 4]]), |t, x| t.transpose_last(x[0])),
        ),
        (
            "conv2d",
            tape_case(v(&[&[2, 2, 4, 4], &[3, 2, 3, 3]]), |t, x| t.conv2d(x[0], x[1], 1, 1)),
        ),
        (
            "conv2d_strided",
            tape_case(v(&[&[1, 2, 5, 5], &[2, 2, 3, 3]]), |t, x| t.conv2d(x[0], x[1], 2, 1)),
        ),
        (
            "reshape_permute",
            tape_case(v(&[&[2, 3, 4]]), |t, x| {
                let r = t.reshape(x[0], &[6, 4])?;
                let r = t.reshape(r, &[2, 12])?;
                let r = t.reshape(r, &[2, 3, 4])?;
                t.permute(r, &[2, 0, 1])
            }),
        ),
        (
            "concat_slice",
            tape_case(v(&[&[2, 3], &[2, 2]]), |t, x| {
                let c = t.concat(&[x[0], x[1]], 1)?;
                t.slice(c, 1, 1, 3)
            }),
        ),
        ("flip", tape_case(v(&[&[2, 3, 4]]), |t, x| t.flip(x[0], 2))),
        (
            "sum_mean",
            tape_case(v(&[&[2, 3, 4]]), |t, x| {
                let s = t.sum(x[0], &[1], true)?;
                let m = t.mean(x[0], &[0, 2], false)?;
                let m = t.reshape(m, &[1, 3, 1])?;
                let y = t.mul(s, m)?;
                let a = t.sum_all(y);
                let b = t.mean_all(x[0]);
                t.mul(a, b)
            }),
        ),
        (
            "l2_normalize",
            tape_case(v(&[&[2, 3, 4]]), |t, x| t.l2_normalize(x[0], 1, 1e-12)),
        ),
        ("l2_norm", tape_case(v(&[&[2, 3, 4]]), |t, x| t.l2_norm(x[0], 2))),
        (
            "cosine_similarity",
            tape_case(v(&[&[3, 5], &[3, 5]]), |t, x| t.cosine_similarity(x[0], x[1], 1e-12)),
        ),
        (
            "self_similarity",
            tape_case(v(&[&[2, 3, 2, 2]]), |t, x| {
                let s = self_similarity(t, x[0]).map_err(|e| crate::tensor::TensorError::Usage(e.to_string()))?;
                let a = t.reshape(s.spatial, &[2, 16])?;
                let b = t.reshape(s.channel, &[2, 9])?;
                t.concat(&[a, b], 1)
            }),
        ),
        (
            "rectification_products",
            tape_case(v(&[&[2, 3, 3], &[2, 3, 2, 2], &[2, 4, 4]]), |t, x| {
                let err = |e: NnError| crate::tensor::TensorError::Usage(e.to_string());
                let c = apply_channel(t, x[0], x[1]).map_err(err)?;
                let s = apply_spatial(t, x[1], x[2]).map_err(err)?;
                t.add(c, s)
            }),
        ),
        (
            "flipped_fusion",
            tape_case(v(&[&[2, 3, 2, 3]]), |t, x| {
                flipped_fusion(t, x[0]).map_err(|e| crate::tensor::TensorError::Usage(e.to_string()))
            }),
        ),
        (
            "batch_norm_train",
            session_case(
                |r| {
                    BatchNorm {
                        name: "bn".into(),
                        channels: 3,
                        config: BnConfig::default(),
                    }
                    .register(r)
                },
                v(&[&[4, 3, 2]]),
                Mode::Train,
                |s, x| {
                    BatchNorm {
                        name: "bn".into(),
                        channels: 3,
                        config: BnConfig::default(),
                    }
                    .forward(s, x[0])
                },
            ),
        ),
        (
            "batch_norm_eval",
            session_case(
                |r| {
                    BatchNorm {
                        name: "bn".into(),
                        channels: 3,
                        config: BnConfig::default(),
                    }
                    .register(r)
                },
                v(&[&[2, 3, 2, 2]]),
                Mode::Eval,
                |s, x| {
                    BatchNorm {
                        name: "bn".into(),
                        channels: 3,
                        config: BnConfig::default(),
                    }
                    .forward(s, x[0])
                },
            ),
        ),
        (
            "conv_block",
            session_case(
                |r| ConvBlock::new("cb", 2, 3, 3, 2, BnConfig::default()).register(r),
                v(&[&[3, 2, 4, 4]]),
                Mode::Train,
                |s, x| ConvBlock::new("cb", 2, 3, 3, 2, BnConfig::default()).forward(s, x[0]),
            ),
        ),
        (
            "linear_block",
            session_case(
                |r| LinearBlock::new("lb", 4, 5, 3).register(r),
                v(&[&[2, 4]]),
                Mode::Train,
                |s, x| LinearBlock::new("lb", 4, 5, 3).forward(s, x[0]),
            ),
        ),
        (
            "residual_conv_stack",
            session_case(
                |r| ResidualStack::conv("rs", 2, 3, 2, 2, 1, 3, BnConfig::default())?.register(r),
                v(&[&[2, 2, 3, 3]]),
                Mode::Train,
                |s, x| ResidualStack::conv("rs", 2, 3, 2, 2, 1, 3, BnConfig::default())?.forward(s, x[0]),
            ),
        ),
        (
            "residual_linear_stack",
            session_case(
                |r| ResidualStack::linear("rl", 4, 5, 3, 2, 2)?.register(r),
                v(&[&[2, 4]]),
                Mode::Train,
                |s, x| ResidualStack::linear("rl", 4, 5, 3, 2, 2)?.forward(s, x[0]),
            ),
        ),
        (
            "rectifier",
            session_case(
                |r| small_rectifier().register(r),
                v(&[&[2, 3, 2, 3]]),
                Mode::Train,
                |s, x| Ok(small_rectifier().forward(s, x[0])?.rectified),
            ),
        ),
        (
            "embedding",
            session_case(
                |r| Embedding::new("e", 12, 4, BnConfig::default()).register(r),
                v(&[&[3, 3, 2, 2]]),
                Mode::Train,
                |s, x| Embedding::new("e", 12, 4, BnConfig::default()).forward(s, x[0]),
            ),
        ),
        (
            "id_loss1",
            session_case(
                no_params,
                v(&[&[2, 2, 2, 2], &[2, 2, 2, 2], &[2, 2, 2, 2]]),
                Mode::Train,
                |s, x| id_loss1(&mut s.tape, x[0], x[1], x[2]),
            ),
        ),
        (
            "id_loss2",
            session_case(
                no_params,
                v(&[&[2, 3, 2, 2], &[2, 3, 2, 2], &[2, 3, 2, 2]]),
                Mode::Train,
                |s, x| {
                    let a = self_similarity(&mut s.tape, x[0])?;
                    let b = self_similarity(&mut s.tape, x[1])?;
                    let c = self_similarity(&mut s.tape, x[2])?;
                    id_loss2(&mut s.tape, &a, &b, &c, SimilarityTerms::Both)
                },
            ),
        ),
        (
            "triplet_cosine",
            session_case(no_params, v(&[&[4, 5], &[4, 5], &[4, 5]]), Mode::Train, |s, x| {
                // a large margin keeps every hinge active, away from its kink
                triplet_cosine(&mut s.tape, x[0], x[1], x[2], 3.0)
            }),
        ),
        (
            "cosface",
            session_case(no_params, v(&[&[4, 3]]), Mode::Train, |s, x| {
                let c = s.tape.scale(x[0], 0.9);
                margin_softmax(&mut s.tape, c, &[0, 2, 1, 2], &head("cosface"))
            }),
        ),
        (
            "arcface",
            session_case(no_params, v(&[&[4, 3]]), Mode::Train, |s, x| {
                let c = s.tape.scale(x[0], 0.9);
                margin_softmax(&mut s.tape, c, &[0, 2, 1, 2], &head("arcface"))
            }),
        ),
    ]
}

/// Runs every gradient case on `instances` random draws.
pub fn gradient_suite(instances: usize, seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("gradients");
    for (name, check) in gradient_cases() {
        for k in 0..instances {
            let outcome = match check(derive_seed(derive_seed(seed, k as u64), name.len() as u64)) {
                Ok(r) => {
                    report.worst = report.worst.max(r.max_rel_error);
                    if r.max_rel_error <= GRAD_TOLERANCE {
                        Ok(())
                    } else {
                        Err(format!(
                            "instance {k}: relative error {:.3e} (analytic {}, numeric {})",
                            r.max_rel_error, r.analytic, r.numeric
                        ))
                    }
                }
                Err(e) => Err(format!("instance {k}: {e}")),
            };
            report.record(name, outcome);
        }
    }
    report
}

fn check_that(cond: bool, what: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

/// Structural invariants of freshly initialized modules and of the
/// evaluation arithmetic.
pub fn invariant_suite(seed: u64) -> SuiteReport {
    let mut report = SuiteReport::new("invariants");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = random(&mut rng, &[3, 4, 3, 3]);

    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    match self_similarity(&mut tape, fv) {
        Ok(sim) => {
            for (name, v, d) in [("spatial", sim.spatial, 9), ("channel", sim.channel, 4)] {
                let t = tape.value(v);
                let mut ok = true;
                for n in 0..3 {
                    for i in 0..d {
                        let at = |i: usize, j: usize| t.data()[n * d * d + i * d + j];
                        ok &= (at(i, i) - 1.0).abs() <= 1e-12;
                        for j in 0..d {
                            ok &= at(i, j) == at(j, i) && at(i, j).abs() <= 1.0 + 1e-12;
                        }
                    }
                }
                report.record(
                    "self_similarity",
                    check_that(ok, || format!("{name} matrix is not a cosine Gram matrix")),
                );
            }
        }
        Err(e) => report.record("self_similarity", Err(e.to_string())),
    }

    let flipped = {
        let mut t = Tape::new();
        let x = t.constant(f.clone());
        let y = flipped_fusion(&mut t, x).map(|y| t.value(y).clone());
        let xf = t.flip(x, 3).map_err(NnError::from);
        let yf = xf.and_then(|xf| flipped_fusion(&mut t, xf)).map(|v| t.value(v).clone());
        (y, yf)
    };
    let outcome = match flipped {
        (Ok(a), Ok(b)) => {
            let d = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            check_that(d <= 1e-12, || format!("flip changes the fused map by {d:e}"))
        }
        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
    };
    report.record("flipped_fusion", outcome);

    let rect = Rectifier::new(
        "r",
        RectifierConfig {
            channels: 4,
            height: 3,
            width: 3,
            ..RectifierConfig::default()
        },
    );
    let outcome = rect.map_err(|e| e.to_string()).and_then(|r| {
        let mut reg = ParamRegistry::new();
        r.register(&mut reg).map_err(|e| e.to_string())?;
        reg.init_params("", seed);
        let mut s = Session::new(&reg, Mode::Eval);
        let x = s.input(f.clone());
        let out = r.forward(&mut s, x).map_err(|e| e.to_string())?;
        for m in [out.m_c, out.m_s].into_iter().flatten() {
            let bad = s.value(m).data().iter().any(|&v| !(v > 0.0 && v < 1.0));
            check_that(!bad, || "rectification matrix leaves (0, 1)".into())?;
        }
        Ok(())
    });
    report.record("rectification_range", outcome);

    let mut ok = true;
    for _ in 0..1000 {
        let s: f64 = rng.gen_range(-1.0..1.0);
        let h: f64 = rng.gen_range(-1.0..1.0);
        let want = if s > h { s + h } else { 2.0 * h };
        ok &= enhanced_score(s, h).to_bits() == want.to_bits();
    }
    report.record(
        "enhanced_score",
        check_that(ok, || "enhanced score differs from max(s, ŝ) + ŝ".into()),
    );

    let acc: Vec<f64> = (0..11).map(|_| rng.gen_range(0..=250) as f64 / 250.0).collect();
    let outcome = SweepResult::from_accuracies(acc.clone())
        .map_err(|e| e.to_string())
        .and_then(|s| {
            check_that(s.mask_free == acc[0] && s.masked == acc[10], || {
                "sweep endpoints".into()
            })?;
            let constant = SweepResult::from_accuracies(vec![acc[3]; 11]).map_err(|e| e.to_string())?;
            check_that(constant.avg == acc[3], || "constant sweep average".into())
        });
    report.record("sweep_identities", outcome);
    report
}
