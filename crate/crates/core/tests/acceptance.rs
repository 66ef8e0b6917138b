//! Acceptance suite: one test per shipped guarantee, each printing a
//! PASS line with its measured figures and asserting the stated tolerance
//! and runtime budget.

use komatsu_core::diophantine::{CfPattern, ContinuedFraction};
use komatsu_core::numeric::ln_factorial;
use komatsu_core::operator::{
    default_n_grid, diophantine_fit, kernel_census, smoothness_fit, Consistency, Coupling,
    DivisorSpectrum, FitMode, Shift, Truncation, VectorFieldSpec,
};
use komatsu_core::perturbation::{
    exp_derivative_bound_check, reduce, s3_example_q, ConjugationChecker,
};
use komatsu_core::solver::{
    adversarial_field, apply, check_admissible, classify_decay, solve, AdversarialMode,
    DecayLabel,
};
use komatsu_core::transforms::{
    h_fn, synthesize, trace_field, CoefficientField, EulerPoint, FreqKey, ProductBand,
};
use komatsu_core::weights::{log_grid, AssociatedFunction, WeightSequence};
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use std::sync::Arc;
use std::time::Instant;

fn gevrey(s: f64, kmax: usize) -> AssociatedFunction {
    AssociatedFunction::new(Arc::new(WeightSequence::gevrey(s, kmax).unwrap()))
}

fn budget(t0: Instant, secs: f64, name: &str) {
    let took = t0.elapsed().as_secs_f64();
    assert!(took < secs, "{name} took {took:.1}s, budget {secs}s");
}

#[test]
fn criterion_01_associated_function_oracle() {
    let t0 = Instant::now();
    let radii = log_grid(1.0, 1e6, 50);
    let mut worst_abs = 0.0f64;
    let mut worst_ratio: (f64, f64) = (f64::INFINITY, 0.0);
    for s in [1.0, 2.0, 3.0] {
        // Table path against the brute-force sup over the same k range.
        let logs: Vec<f64> = (0..=2000).map(|k| s * ln_factorial(k)).collect();
        let table = AssociatedFunction::new(Arc::new(
            WeightSequence::from_log_values(logs).unwrap(),
        ));
        for &r in &radii {
            let brute = (0..=2000u64)
                .map(|k| k as f64 * r.ln() - s * ln_factorial(k))
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0);
            let got = table.value(r);
            worst_abs = worst_abs.max((got - brute).abs());
        }
        // Closed-form path: M(r) / (s r^(1/s)) in [0.8, 1.2] past 1e4.
        let analytic = gevrey(s, 128);
        for &r in &radii {
            if r >= 1e4 {
                let ratio = analytic.value(r) / (s * r.powf(1.0 / s));
                worst_ratio = (worst_ratio.0.min(ratio), worst_ratio.1.max(ratio));
                assert!(
                    (0.8..=1.2).contains(&ratio),
                    "s={s} r={r}: ratio {ratio}"
                );
            }
        }
    }
    assert!(worst_abs <= 1e-10, "oracle mismatch {worst_abs:e}");
    budget(t0, 5.0, "criterion 1");
    println!(
        "PASS criterion 1: associated-function oracle, max |diff| = {worst_abs:.2e}, \
         asymptotic ratio in [{:.3}, {:.3}]",
        worst_ratio.0, worst_ratio.1
    );
}

#[test]
fn criterion_02_inequality_suite() {
    let t0 = Instant::now();
    let mut worst_violation = f64::NEG_INFINITY;
    let mut cases = 0;
    for s in [1.0, 2.0, 3.0] {
        let af = gevrey(s, 128);
        for (p, q, delta) in [(0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (3.0, 0.5, 0.5), (2.0, 2.0, 0.25)]
        {
            let fit = af.polynomial_domination(p, q, delta);
            assert!(fit.c.is_finite() && fit.c > 0.0, "s={s} p={p}");
            cases += 1;
        }
        for q in [0.5, 1.0, 3.0] {
            let chk = af.halving_check(q);
            worst_violation = worst_violation.max(chk.max_violation);
            assert!(
                chk.max_violation <= 1e-10,
                "s={s} q={q}: violation {:e}",
                chk.max_violation
            );
            cases += 1;
        }
    }
    budget(t0, 5.0, "criterion 2");
    println!(
        "PASS criterion 2: {cases} inequality cases, max halving violation = {worst_violation:.2e}"
    );
}

fn s3_operator(shift: Shift, kmax: i64, lmax: i64) -> DivisorSpectrum {
    DivisorSpectrum::new(
        VectorFieldSpec::t1_su2(Coupling::Cf(CfPattern::FactorialPow10), shift),
        Truncation {
            g1_limit: kmax,
            g2_limit: 2 * lmax,
        },
        256,
    )
    .unwrap()
}

#[test]
fn criterion_03_s3_kernel_census() {
    let t0 = Instant::now();
    let sp = s3_operator(Shift::half_i(), 20_000, 200);
    let census = kernel_census(&sp);
    assert!(census.empty, "half-i shift must have an empty kernel");

    let sp1 = s3_operator(Shift::alpha_i(), 20_000, 200);
    let census1 = kernel_census(&sp1);
    assert!(
        census1.count >= 200,
        "alpha-i shift kernel has {} zero pairs, expected >= 200",
        census1.count
    );
    budget(t0, 60.0, "criterion 3");
    println!(
        "PASS criterion 3: kernel census empty for q0 = i/2; {} zero pairs for q0 = alpha i",
        census1.count
    );
}

#[test]
fn criterion_04_gevrey_vs_smooth_separation() {
    let t0 = Instant::now();
    let sp = s3_operator(Shift::half_i(), 20_000, 200);

    // Polynomial side at N' = 10: collapse witnesses at convergent scales.
    let smooth = smoothness_fit(&sp, &[10.0]).unwrap();
    assert_eq!(smooth.verdict, Consistency::Violated);
    assert!(
        smooth.collapse_witnesses.len() >= 3,
        "need >= 3 collapse witnesses, got {}",
        smooth.collapse_witnesses.len()
    );
    // Convergent denominators of the coupling (q_1 = 100 is in reach).
    let mut cf = ContinuedFraction::new(CfPattern::FactorialPow10).unwrap();
    cf.extend_to(2).unwrap();
    let q1: i64 = cf.convergent(1).1.try_into().unwrap();
    for w in &smooth.collapse_witnesses {
        // |D| w^10 < 1e-3 * (initial C at the same scale).
        assert!(
            w.log_value < w.log_initial_c - 1000f64.ln(),
            "witness too shallow: {} vs {}",
            w.log_value,
            w.log_initial_c
        );
        // Twice the symbol row value is an odd multiple of q_1: the
        // half-shift pushes the small divisors to half-convergent scales.
        let two_mu = (2.0 * w.record.mu).round() as i64;
        assert_eq!(two_mu.abs() % q1, 0, "witness mu = {}", w.record.mu);
        assert!((two_mu.abs() / q1) % 2 == 1);
    }

    // Gevrey-2 side: all fits stable, and stable across the top two
    // decades of the truncation by the checkpoint trend.
    let af = gevrey(2.0, 256);
    let dio = diophantine_fit(&sp, &af, FitMode::Roumieu, &[0.25, 0.5, 1.0, 2.0]).unwrap();
    assert_eq!(dio.verdict, Consistency::ConditionConsistent);
    for fit in &dio.fits {
        assert!(fit.stable, "N = {} unstable", fit.n);
        let len = fit.checkpoints.len();
        if len >= 3 {
            let last = fit.checkpoints[len - 1].1;
            let prior = fit.checkpoints[len - 3].1;
            assert!(
                last >= prior - 10f64.ln(),
                "N = {}: C dropped {:.2}x across the top two decades",
                fit.n,
                (prior - last).exp()
            );
        }
    }
    budget(t0, 120.0, "criterion 4");
    println!(
        "PASS criterion 4: {} collapse witnesses at odd multiples of q_1/2 under N'=10, \
         Gevrey-2 fits stable across the top decades",
        smooth.collapse_witnesses.len()
    );
}

#[test]
fn criterion_05_solver_round_trip() {
    let t0 = Instant::now();
    let op_sqrt2 = DivisorSpectrum::new(
        VectorFieldSpec::t2(
            Coupling::Cf(CfPattern::Periodic { head: vec![1], cycle: vec![2] }),
            Shift::default(),
        ),
        Truncation { g1_limit: 40, g2_limit: 40 },
        128,
    )
    .unwrap();
    let op_s3 = s3_operator(Shift::half_i(), 12, 4);
    let op_rat = DivisorSpectrum::new(
        VectorFieldSpec::t2(
            Coupling::Rational(BigRational::new(BigInt::from(5), BigInt::from(3))),
            Shift {
                re: BigRational::zero(),
                im: BigRational::new(BigInt::from(1), BigInt::from(2)),
                im_alpha: BigRational::zero(),
            },
        ),
        Truncation { g1_limit: 40, g2_limit: 40 },
        128,
    )
    .unwrap();

    let mut worst_rt = 0.0f64;
    let mut worst_lin = 0.0f64;
    let mut field_count = 0;
    let mut run = |sp: &DivisorSpectrum, band: ProductBand, seeds: std::ops::Range<u64>| {
        for seed in seeds {
            let mut f = CoefficientField::random(band, seed, |_| 1.0);
            // Clear any kernel entries so f is admissible.
            let report = check_admissible(&f, sp).unwrap();
            for off in &report.offending {
                let key = (freq_key(&off.xi), freq_key(&off.eta));
                let block = f.blocks.get_mut(&key).unwrap();
                block.set(off.i, off.j, Complex64::new(0.0, 0.0));
            }
            let u = solve(&f, sp).unwrap();
            let back = apply(sp, &u).unwrap();
            // Entrywise relative error against the nonzero entries of f.
            for (key, fb) in &f.blocks {
                let bb = &back.blocks[key];
                for (x, y) in fb.entries.iter().zip(bb.entries.iter()) {
                    if x.norm() > 0.0 {
                        worst_rt = worst_rt.max((x - y).norm() / x.norm());
                    }
                }
            }
            // Linearity against a second field.
            let mut g = CoefficientField::random(band, seed + 1000, |_| 1.0);
            let rep = check_admissible(&g, sp).unwrap();
            for off in &rep.offending {
                let key = (freq_key(&off.xi), freq_key(&off.eta));
                g.blocks.get_mut(&key).unwrap().set(off.i, off.j, Complex64::new(0.0, 0.0));
            }
            let a = Complex64::new(0.6, -1.1);
            let b = Complex64::new(-0.4, 0.9);
            let lhs = solve(&f.scale(a).add(&g.scale(b)), sp).unwrap();
            let rhs = solve(&f, sp).unwrap().scale(a).add(&solve(&g, sp).unwrap().scale(b));
            let scale = rhs.max_abs().max(1e-300);
            worst_lin = worst_lin.max(lhs.max_block_diff(&rhs) / scale);
            field_count += 1;
        }
    };
    run(&op_sqrt2, ProductBand::t2(30, 30), 0..7);
    run(&op_s3, ProductBand::t1_su2(10, 8), 7..14);
    run(&op_rat, ProductBand::t2(30, 30), 14..20);
    assert!(field_count == 20);
    assert!(worst_rt <= 1e-12, "round-trip relative error {worst_rt:e}");
    assert!(worst_lin <= 1e-14, "linearity error {worst_lin:e}");
    budget(t0, 10.0, "criterion 5");
    println!(
        "PASS criterion 5: 20 fields on 3 operators, round-trip rel err = {worst_rt:.2e}, \
         linearity err = {worst_lin:.2e}"
    );
}

fn freq_key(rep: &komatsu_core::duals::RepIndex) -> FreqKey {
    match rep {
        komatsu_core::duals::RepIndex::Torus(k) => FreqKey::Torus(k[0]),
        komatsu_core::duals::RepIndex::Su2(l) => FreqKey::Su2(l.0),
    }
}

#[test]
fn criterion_06_regularity_transfer() {
    let t0 = Instant::now();
    let seq = Arc::new(WeightSequence::gevrey(2.0, 200).unwrap());
    let af = AssociatedFunction::new(seq.clone());
    let h = seq.stability().h_doubling;
    let sp = DivisorSpectrum::new(
        VectorFieldSpec::t2(
            Coupling::Cf(CfPattern::Periodic { head: vec![1], cycle: vec![2] }),
            Shift::default(),
        ),
        Truncation { g1_limit: 64, g2_limit: 64 },
        128,
    )
    .unwrap();
    let verdict = diophantine_fit(&sp, &af, FitMode::Roumieu, &default_n_grid()).unwrap();
    assert_eq!(verdict.verdict, Consistency::ConditionConsistent);

    let band = ProductBand::t2(60, 60);
    let mut f = CoefficientField::random(band, 99, |w| (-af.value(2.0 * w)).exp());
    f.set_scalar(0, 0, Complex64::new(0.0, 0.0));
    let vf = classify_decay(&f, &af, &default_n_grid()).unwrap();
    assert_eq!(vf.label, DecayLabel::RoumieuFunction);

    let u = solve(&f, &sp).unwrap();
    let vu = classify_decay(&u, &af, &default_n_grid()).unwrap();
    assert_eq!(vu.label, DecayLabel::RoumieuFunction, "{:?}", vu.passing);
    let n = vu.function_side.best_n.unwrap();
    let (lo, hi) = (2.0 / (h * h), 2.0 * h * h);
    assert!(
        (lo..=hi).contains(&n),
        "fitted N = {n} outside [{lo}, {hi}]"
    );
    budget(t0, 10.0, "criterion 6");
    println!(
        "PASS criterion 6: solve maps exp(-M(2w)) data to a Roumieu function, \
         fitted N = {n} in [{lo}, {hi}]"
    );
}

#[test]
fn criterion_07_conjugation_identity() {
    let t0 = Instant::now();
    // d/dpsi applied to the trace reproduces h pointwise.
    let tr = trace_field();
    let sp_psi = DivisorSpectrum::new(
        VectorFieldSpec::t1_su2(Coupling::one(), Shift::default()),
        Truncation { g1_limit: 2, g2_limit: 2 },
        64,
    )
    .unwrap();
    // X tr with X the full L = d/dt + d/dpsi: the trace has no t
    // dependence, so L tr = d/dpsi tr = h.
    let xtr = apply(&sp_psi, &tr).unwrap();
    let mut rng = 123456789u64;
    let mut next = move || {
        rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (rng >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut worst_pt = 0.0f64;
    for _ in 0..1000 {
        let p = EulerPoint::t1_su2(
            next() * std::f64::consts::TAU,
            next() * std::f64::consts::TAU,
            next() * std::f64::consts::PI,
            next() * 2.0 * std::f64::consts::TAU,
        );
        let got = synthesize(&xtr, &p);
        worst_pt = worst_pt.max((got - h_fn(&p)).norm());
    }
    assert!(worst_pt <= 1e-12, "d/dpsi tr vs h: {worst_pt:e}");

    // Conjugation identity on the worked example, 10 random fields with
    // band |k| <= 4, l <= 2.
    let q = s3_example_q(Complex64::new(0.0, 0.5));
    let base = VectorFieldSpec::t1_su2(Coupling::Cf(CfPattern::FactorialPow10), Shift::default());
    let prob = reduce(&q, &base, 256).unwrap();
    let checker = ConjugationChecker::new(&prob, 256).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let v = CoefficientField::random(ProductBand::t1_su2(4, 4), seed, |_| 1.0);
        worst = worst.max(checker.residual(&v).unwrap());
    }
    assert!(worst <= 1e-8, "conjugation residual {worst:e}");
    budget(t0, 30.0, "criterion 7");
    println!(
        "PASS criterion 7: conjugation residual = {worst:.2e} over 10 fields, \
         d/dpsi tr = h to {worst_pt:.2e} at 1000 points"
    );
}

#[test]
fn criterion_08_exponential_envelope() {
    let t0 = Instant::now();
    let seq = WeightSequence::gevrey(1.0, 64).unwrap();
    let f_hat = vec![
        (1i64, Complex64::new(0.0, -0.5)),
        (-1i64, Complex64::new(0.0, 0.5)),
    ];
    let report = exp_derivative_bound_check(&f_hat, 1.0, &seq, 10, 512);
    assert!(report.per_order.len() == 11);
    assert!(report.max_k <= 10.0, "fitted K = {}", report.max_k);
    budget(t0, 5.0, "criterion 8");
    println!(
        "PASS criterion 8: derivatives of exp(sin t) fit K (2h)^p p! with K = {:.3}",
        report.max_k
    );
}

#[test]
fn criterion_09_continued_fraction_profile() {
    let t0 = Instant::now();
    let digits: Vec<BigInt> = [10u64, 100, 1_000_000].iter().map(|&d| BigInt::from(d)).collect();
    let mut cf = ContinuedFraction::new(CfPattern::Explicit(digits)).unwrap();
    let conv = cf.convergents(2).unwrap();
    // Recurrence by hand: p = a p' + p'', q likewise.
    assert_eq!(conv[0], (BigInt::from(10), BigInt::from(1)));
    assert_eq!(conv[1], (BigInt::from(1001), BigInt::from(100)));
    assert_eq!(
        conv[2],
        (BigInt::from(1_001_000_010u64), BigInt::from(100_000_001u64))
    );
    // |q1 a - p1| bracketed by [1/(q1(q1+q2)), 1/q2], exactly in rationals.
    let a = BigRational::new(conv[2].0.clone(), conv[2].1.clone());
    let gap = (BigRational::from_integer(conv[1].1.clone()) * &a
        - BigRational::from_integer(conv[1].0.clone()))
    .abs();
    let lo = BigRational::new(
        BigInt::from(1),
        &conv[1].1 * (&conv[1].1 + &conv[2].1),
    );
    let hi = BigRational::new(BigInt::from(1), conv[2].1.clone());
    assert!(lo <= gap && gap <= hi, "gap {gap} outside [{lo}, {hi}]");
    budget(t0, 1.0, "criterion 9");
    println!("PASS criterion 9: convergents exact, |q1 a - p1| = {gap} inside the sandwich");
}

#[test]
fn criterion_10_adversarial_constructions() {
    let t0 = Instant::now();
    let sp = DivisorSpectrum::new(
        VectorFieldSpec::t2(Coupling::Cf(CfPattern::SqrtTower), Shift::default()),
        Truncation { g1_limit: 17_000, g2_limit: 38_000 },
        256,
    )
    .unwrap();
    let af = gevrey(2.0, 256);
    let verdict = diophantine_fit(&sp, &af, FitMode::Roumieu, &default_n_grid()).unwrap();
    assert_eq!(verdict.verdict, Consistency::Violated);
    assert!(!verdict.witnesses.is_empty());

    // The hypoellipticity counterexample: divisor * weight at witnesses,
    // padded with a generic Roumieu background away from the kernel.
    let adv = adversarial_field(&sp, &verdict.witnesses, AdversarialMode::HypoRoumieu).unwrap();
    let mut background =
        CoefficientField::random(ProductBand::t2(40, 40), 7, |w| (-af.value(w / 16.0)).exp());
    background.set_scalar(0, 0, Complex64::new(0.0, 0.0));
    let f = adv.add(&background);
    let vf = classify_decay(&f, &af, &default_n_grid()).unwrap();
    assert!(
        vf.passing.contains(&DecayLabel::RoumieuFunction),
        "f classified {:?}",
        vf.passing
    );

    let u = solve(&f, &sp).unwrap();
    // |u-hat| = w at the witness frequencies.
    for w in &verdict.witnesses {
        let key = (freq_key(&w.record.freq.xi), freq_key(&w.record.freq.eta));
        let got = u.blocks[&key].get(1, 1).norm();
        assert!(
            (got - w.record.weight).abs() <= 1e-9 * w.record.weight,
            "|u| = {got} vs w = {}",
            w.record.weight
        );
    }
    let vu = classify_decay(&u, &af, &default_n_grid()).unwrap();
    assert!(
        !vu.passing.contains(&DecayLabel::Smooth),
        "preimage must not classify smooth: {:?}",
        vu.passing
    );
    assert!(
        vu.passing.contains(&DecayLabel::FiniteOrderDistribution),
        "preimage should be a finite-order distribution: {:?}",
        vu.passing
    );
    budget(t0, 30.0, "criterion 10");
    println!(
        "PASS criterion 10: adversarial data classifies {:?}, canonical preimage {:?} \
         with |u-hat| = w at {} witnesses",
        vf.label,
        vu.label,
        verdict.witnesses.len()
    );
}
