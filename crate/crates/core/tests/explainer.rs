use gradcore::gradcheck::check_gradients;
use gradcore::{Tape, Tensor, Var};
use ibts::classifier::train_classifier;
use ibts::classifier::{ClassifierConfig, ClassifierModel, Dims};
use ibts::datagen::{gen_signaling, generate, Dataset, GeneratorConfig, Kind, Splits};
use ibts::explainer::losses::{loss_dr, loss_kl_dist, loss_lc, loss_mask, PI_CLAMP};
use ibts::explainer::{
    bernoulli_prior_from_budget, load_explainer, load_explanations, make_reference, save_explainer, save_explanations,
    signaling_mask, step_losses, train_explainer, BaselineDistribution, Explainer, ExplainerConfig, InferenceMode,
    StepNoise, StepOutput,
};
use ibts::metrics::{aup_aur, DEFAULT_THRESHOLDS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Term = (&'static str, fn(&StepOutput) -> Var);

/// Random two-class dataset with `T = 6`, `D = 2`.
fn tiny_dataset() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10;
    let x = (0..n * 12).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Dataset {
        name: "tiny".into(),
        n,
        t: 6,
        d: 2,
        c: 2,
        x,
        y: (0..n).map(|i| i % 2).collect(),
        q: None,
        splits: Splits::contiguous(6, 2, 2),
    }
}

fn small_setup() -> (Dataset, ClassifierModel, Explainer) {
    let ds = tiny_dataset();
    let ccfg = ClassifierConfig {
        hidden: 4,
        ..Default::default()
    };
    let mut f = ClassifierModel::new(
        ccfg,
        Dims {
            t: ds.t,
            d: ds.d,
            c: ds.c,
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    f.set_param("head.weight", Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0)))
        .unwrap();
    f.freeze();
    let ecfg = ExplainerConfig {
        extractor_width: 4,
        conditioner_width: 4,
        ..Default::default()
    };
    let base = BaselineDistribution::fit(&ds).unwrap();
    let expl = Explainer::new(ecfg, base, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    (ds, f, expl)
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let (ds, f, expl) = small_setup();
    let x = ds.batch(&ds.splits.train);
    let orig = f.predict_proba(&x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = StepNoise::draw(x.shape(), &mut rng);
    let pi = expl.extract_probs(&x).unwrap();
    let frozen = noise.frozen_at(&pi);

    let terms: [Term; 6] = [
        ("L_M", |o| o.l_m),
        ("L_con", |o| o.l_con),
        ("L_dr", |o| o.l_dr),
        ("L_KL", |o| o.l_kl),
        ("L_LC", |o| o.l_lc),
        ("total", |o| o.total),
    ];
    for (name, pick) in terms {
        let build = |tape: &mut Tape, p: &[Var]| -> gradcore::Result<Var> {
            let out = step_losses(tape, &expl, p, &f, &x, &orig, &frozen).map_err(|e| match e {
                ibts::Error::Grad(g) => g,
                other => panic!("{other}"),
            })?;
            Ok(pick(&out))
        };
        let report = check_gradients(&build, expl.params().tensors(), 1e-5).unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }

    // frozen residual reproduces the sampled mask and the STE gradient
    let mut t1 = Tape::new();
    let p1 = expl.params().bind(&mut t1, true);
    let s1 = step_losses(&mut t1, &expl, &p1, &f, &x, &orig, &noise).unwrap();
    let g1 = t1.backward(s1.total).unwrap();
    let mut t2 = Tape::new();
    let p2 = expl.params().bind(&mut t2, true);
    let s2 = step_losses(&mut t2, &expl, &p2, &f, &x, &orig, &frozen).unwrap();
    let g2 = t2.backward(s2.total).unwrap();
    assert_eq!(
        t1.value(s1.mask).data(),
        t2.value(s2.mask)
            .data()
            .iter()
            .map(|v| v.round())
            .collect::<Vec<_>>()
            .as_slice()
    );
    for (&a, &b) in p1.iter().zip(&p2) {
        for (u, v) in g1.wrt(a).data().iter().zip(g2.wrt(b).data()) {
            assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }
}

fn tiny_cfg() -> ExplainerConfig {
    ExplainerConfig {
        extractor_width: 4,
        conditioner_width: 4,
        epochs: 3,
        batch_size: 4,
        ..Default::default()
    }
}

#[test]
fn param_gradients_of_pi_and_conditioner() {
    let (ds, _, expl) = small_setup();
    let x = ds.batch(&[0, 1, 2]);
    let m = Tensor::from_fn(x.shape(), |i| (i % 3 == 0) as u8 as f64);
    let build_pi = |tape: &mut Tape, p: &[Var]| -> gradcore::Result<Var> {
        let xv = tape.constant(x.clone());
        let pi = expl.extract_on_tape(tape, p, xv).map_err(grad_err)?;
        tape.mean(pi)
    };
    let r = check_gradients(&build_pi, expl.params().tensors(), 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    let build_cond = |tape: &mut Tape, p: &[Var]| -> gradcore::Result<Var> {
        let xv = tape.constant(x.clone());
        let mv = tape.constant(m.clone());
        let out = expl.condition_on_tape(tape, p, mv, xv).map_err(grad_err)?;
        let sq = tape.square(out)?;
        tape.sum(sq)
    };
    let r = check_gradients(&build_cond, expl.params().tensors(), 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn grad_err(e: ibts::Error) -> gradcore::GradError {
    match e {
        ibts::Error::Grad(g) => g,
        other => panic!("{other}"),
    }
}

#[test]
fn baseline_statistics() {
    let mut ds = tiny_dataset();
    let base = BaselineDistribution::fit(&ds).unwrap();
    assert_eq!((base.t, base.d, base.mu.len(), base.sigma.len()), (6, 2, 12, 12));
    // two instances {0, 2} at every cell
    ds.splits = Splits::contiguous(2, 0, 0);
    ds.x[..12].fill(0.0);
    ds.x[12..24].fill(2.0);
    let base = BaselineDistribution::fit(&ds).unwrap();
    assert!(base.mu.iter().all(|&m| m == 1.0) && base.sigma.iter().all(|&s| s == 1.0));
    ds.x[12..24].fill(0.0);
    let base = BaselineDistribution::fit(&ds).unwrap();
    assert!(base
        .sigma
        .iter()
        .all(|&s| (s - ibts::explainer::SIGMA_FLOOR).abs() < 1e-12));
    ds.splits.train.clear();
    assert!(BaselineDistribution::fit(&ds).is_err());
}

#[test]
fn reference_instances() {
    let ds = tiny_dataset();
    let base = BaselineDistribution::fit(&ds).unwrap();
    let x = ds.batch(&[0, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = base.draw(2, &mut rng);
    assert_eq!(make_reference(&x, &Tensor::ones(x.shape()), &b), x);
    let mixed = Tensor::from_fn(x.shape(), |i| (i % 2) as f64);
    let r = make_reference(&x, &mixed, &b);
    for ((&rv, &xv), &m) in r.data().iter().zip(x.data()).zip(mixed.data()) {
        if m == 1.0 {
            assert_eq!(rv, xv);
        }
    }
    // all-zero mask: pure baseline draws concentrate on mu
    let n = 10_000;
    let draws = base.draw(n, &mut rng);
    let cells = 12;
    for c in 0..cells {
        let mean = draws.data().iter().skip(c).step_by(cells).sum::<f64>() / n as f64;
        assert!((mean - base.mu[c]).abs() < 3.0 * base.sigma[c] / 100.0, "cell {c}");
    }
    let zero = make_reference(&x, &Tensor::zeros(x.shape()), &b);
    assert_eq!(zero, b);
}

#[test]
fn extractor_and_conditioner_basics() {
    let (ds, _, expl) = small_setup();
    let x = ds.batch(&[0, 1, 2, 3]);
    let pi = expl.extract_probs(&x).unwrap();
    assert_eq!(pi.shape(), x.shape());
    assert!(pi.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    assert_eq!(pi, expl.extract_probs(&x).unwrap());
    let m = pi.map(|p| (p >= 0.5) as u8 as f64);
    let c = expl.condition(&m, &x).unwrap();
    assert_eq!(c.shape(), x.shape());
    assert_eq!(c, expl.condition(&m, &x).unwrap());
    let bad = Tensor::zeros(&[1, 5, 2]);
    assert!(expl.extract_probs(&bad).is_err());
}

#[test]
fn threshold_mode_ignores_the_rng() {
    let (ds, _, expl) = small_setup();
    let x = ds.batch(&[0, 1, 2]);
    let a = expl.explain(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = expl.explain(&x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!((&a.pi, &a.mask, &a.conditioned), (&b.pi, &b.mask, &b.conditioned));
    for e in [&a, &b] {
        for ((&r, &xv), &m) in e.reference.data().iter().zip(x.data()).zip(e.mask.data()) {
            assert!(m == 0.0 || m == 1.0);
            if m == 1.0 {
                assert_eq!(r, xv);
            }
        }
    }
}

#[test]
fn sampling_with_degenerate_pi_matches_threshold() {
    let (ds, _, mut expl) = small_setup();
    // decoder output fixed at +50 on channel 0 and -50 on channel 1
    expl.set_param("extractor.decoder.weight", Tensor::zeros(&[4, 2]))
        .unwrap();
    expl.set_param(
        "extractor.decoder.bias",
        Tensor::new(vec![2], vec![50.0, -50.0]).unwrap(),
    )
    .unwrap();
    let x = ds.batch(&[0, 1, 2]);
    let thr = expl.explain(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut sampled = expl.clone();
    let cfg = ExplainerConfig {
        inference: InferenceMode::Sample,
        ..expl.config().clone()
    };
    sampled = Explainer::new(cfg, sampled.baseline().clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for (name, t) in expl.params().names().iter().zip(expl.params().tensors()) {
        sampled.set_param(name, t.clone()).unwrap();
    }
    let smp = sampled.explain(&x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(thr.mask, smp.mask);
    assert_eq!(thr.conditioned, smp.conditioned);
}

#[test]
fn training_contract() {
    let (ds, f, _) = small_setup();
    let before = f.params().to_bytes();
    let (e1, h1) = train_explainer(&f, &ds, &tiny_cfg()).unwrap();
    let (e2, h2) = train_explainer(&f, &ds, &tiny_cfg()).unwrap();
    assert_eq!(f.params().to_bytes(), before);
    assert_eq!(h1, h2);
    assert_eq!(e1.params(), e2.params());
    assert_eq!(h1.len(), 3);
    let cfg = tiny_cfg();
    for h in &h1 {
        let total = h.l_lc + cfg.alpha * h.l_m + cfg.beta * (h.l_kl + h.l_dr);
        assert!((h.total - total).abs() < 1e-9);
        for v in [h.l_lc, h.l_m, h.l_con, h.l_kl, h.l_dr] {
            assert!(v >= 0.0);
        }
        assert!(h.l_lc <= std::f64::consts::LN_2);
    }
}

#[test]
fn unfrozen_classifier_is_refused() {
    let ds = tiny_dataset();
    let f = ClassifierModel::new(
        ClassifierConfig {
            hidden: 4,
            ..Default::default()
        },
        Dims { t: 6, d: 2, c: 2 },
    )
    .unwrap();
    let err = train_explainer(&f, &ds, &tiny_cfg()).unwrap_err();
    assert_eq!(err.to_string(), "classifier must be frozen");
}

#[test]
fn heavy_mask_weight_pulls_pi_to_the_prior() {
    let (ds, f, _) = small_setup();
    let cfg = ExplainerConfig {
        alpha: 100.0,
        r: 0.3,
        lr: 1e-2,
        epochs: 200,
        ..tiny_cfg()
    };
    let (expl, _) = train_explainer(&f, &ds, &cfg).unwrap();
    let pi = expl.extract_probs(&ds.batch(&ds.splits.train)).unwrap();
    let mean = pi.data().iter().sum::<f64>() / pi.numel() as f64;
    assert!((mean - 0.3).abs() < 0.05, "{mean}");
}

#[test]
fn mask_loss_falls_during_training() {
    let mut g = GeneratorConfig::new(Kind::FreqShapes, 4).sizes(64, 8, 16);
    g.narma_order = 10;
    let ds = generate(&g).unwrap();
    let ccfg = ClassifierConfig {
        epochs: 4,
        ..Default::default()
    };
    let (f, _) = train_classifier(&ccfg, &ds).unwrap();
    let cfg = ExplainerConfig {
        epochs: 6,
        batch_size: 16,
        lr: 5e-3,
        ..Default::default()
    };
    let (_, h) = train_explainer(&f, &ds, &cfg).unwrap();
    assert!(
        h.last().unwrap().l_m < h[0].l_m,
        "{:?}",
        h.iter().map(|b| b.l_m).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, f, _) = small_setup();
    let (expl, _) = train_explainer(&f, &ds, &tiny_cfg()).unwrap();
    save_explainer(&expl, dir.path()).unwrap();
    for file in ["explainer.json", "mu.bin", "sigma.bin"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let back = load_explainer(dir.path()).unwrap();
    assert_eq!(back.params(), expl.params());
    assert_eq!(back.baseline(), expl.baseline());
    assert_eq!(back.config(), expl.config());
    let x = ds.batch(&ds.splits.test);
    assert_eq!(back.extract_probs(&x).unwrap(), expl.extract_probs(&x).unwrap());

    let pi = expl.extract_probs(&x).unwrap();
    save_explanations(&pi, &ds.splits.test, &dir.path().join("ex")).unwrap();
    let (pi2, idx) = load_explanations(&dir.path().join("ex")).unwrap();
    assert_eq!(idx, ds.splits.test);
    assert_eq!(pi2, pi.map(|v| v as f32 as f64));

    std::fs::remove_file(dir.path().join("sigma.bin")).unwrap();
    assert!(load_explainer(dir.path()).is_err());
}

#[test]
fn signaling_mask_misses_the_signal() {
    let ds = gen_signaling(7, 20, 200, 0, 0, 1).unwrap();
    let idx: Vec<usize> = (0..ds.n).collect();
    let m = signaling_mask(&ds.batch(&idx), &ds.labels(&idx)).unwrap();
    let truth = ds.q.clone().unwrap();
    let (_, aur) = aup_aur(m.data(), &truth, DEFAULT_THRESHOLDS).unwrap();
    assert!(aur < 0.1, "{aur}");
    for row in m.data().chunks(20) {
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }
}

#[test]
fn closed_form_losses() {
    let mut tape = Tape::new();
    // Bernoulli KL against the analytic per-element formula
    for r in [0.1, 0.5, 0.8] {
        for k in 0..=20 {
            let p = k as f64 / 20.0;
            let pi = tape.constant(Tensor::full(&[1, 1, 1], p));
            let (lm, _) = loss_mask(&mut tape, pi, r, 0.0).unwrap();
            let pc = p.clamp(PI_CLAMP, 1.0 - PI_CLAMP);
            let expect = pc * (pc / r).ln() + (1.0 - pc) * ((1.0 - pc) / (1.0 - r)).ln();
            assert!((tape.value(lm).data()[0] - expect).abs() < 1e-9, "r {r} p {p}");
        }
    }
    let pi = tape.constant(Tensor::new(vec![1, 4, 1], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
    let (_, con) = loss_mask(&mut tape, pi, 0.5, 1.0).unwrap();
    assert!((tape.value(con).data()[0] - 0.75).abs() < 1e-6);
    let a = tape.constant(Tensor::full(&[2, 3, 1], 1.0));
    let b = tape.constant(Tensor::full(&[2, 3, 1], 3.0));
    let dr = loss_dr(&mut tape, a, b).unwrap();
    assert!((tape.value(dr).data()[0] - 4.0).abs() < 1e-12);
    assert!(bernoulli_prior_from_budget(2.0, 1.0, 1.0).unwrap() == 0.5);
    let r = bernoulli_prior_from_budget(3.0, 1.0, 1.0).unwrap();
    assert!((-r.log2() - (1.0 - r).log2() - 3.0).abs() < 1e-9);
    assert!(bernoulli_prior_from_budget(1.9, 1.0, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn js_is_bounded_and_symmetric(a in proptest::collection::vec(0.01f64..1.0, 3), b in proptest::collection::vec(0.01f64..1.0, 3)) {
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(&a), norm(&b));
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::new(vec![1, 3], p.clone()).unwrap());
        let qv = tape.constant(Tensor::new(vec![1, 3], q.clone()).unwrap());
        let pq = loss_lc(&mut tape, pv, qv).unwrap();
        let qp = loss_lc(&mut tape, qv, pv).unwrap();
        let pp = loss_lc(&mut tape, pv, pv).unwrap();
        let (pq, qp, pp) = (tape.value(pq).data()[0], tape.value(qp).data()[0], tape.value(pp).data()[0]);
        prop_assert!((pq - qp).abs() < 1e-12);
        prop_assert!((-1e-15..=std::f64::consts::LN_2 + 1e-12).contains(&pq));
        prop_assert!(pp.abs() < 1e-12);
    }

    #[test]
    fn mask_terms_are_nonnegative(pis in proptest::collection::vec(0.0f64..=1.0, 12), r in 0.01f64..0.99, lam in 0.0f64..3.0) {
        let mut tape = Tape::new();
        let pi = tape.constant(Tensor::new(vec![2, 3, 2], pis).unwrap());
        let (lm, con) = loss_mask(&mut tape, pi, r, lam).unwrap();
        prop_assert!(tape.value(con).data()[0] >= 0.0);
        prop_assert!(tape.value(lm).data()[0] >= tape.value(con).data()[0] - 1e-12);
    }

    #[test]
    fn distribution_kl_vanishes_on_identical_batches(vals in proptest::collection::vec(-3.0f64..3.0, 24)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 3, 2], vals).unwrap());
        let kl = loss_kl_dist(&mut tape, x, x).unwrap();
        prop_assert!(tape.value(kl).data()[0].abs() < 1e-9);
    }
}
