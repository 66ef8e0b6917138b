//! Cross-module invariants, mostly property-based: transform unitarity,
//! solver algebra, convergent structure, and the implication order between
//! the condition checkers.

use komatsu_core::diophantine::{CfPattern, ContinuedFraction};
use komatsu_core::duals::{flatten, unflatten};
use komatsu_core::operator::{
    default_n_grid, diophantine_fit, Consistency, Coupling, DivisorSpectrum, FitMode, Shift,
    Truncation, VectorFieldSpec,
};
use komatsu_core::solver::{apply, check_admissible, solve};
use komatsu_core::transforms::{
    analyze_on_grid, l2_norm_on_grid, synthesize_on_grid, CoefficientField, Grid, ProductBand,
};
use komatsu_core::weights::{AssociatedFunction, WeightSequence};
use num_bigint::BigInt;
use num_complex::Complex64;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::One;
use proptest::prelude::*;
use std::sync::Arc;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn associated_function_monotone_and_inverse(
        s in 1.0f64..3.5,
        r1 in 0.0f64..1e7,
        r2 in 0.0f64..1e7,
    ) {
        let af = AssociatedFunction::new(Arc::new(WeightSequence::gevrey(s, 128).unwrap()));
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(af.value(lo) <= af.value(hi) + 1e-12);
        let m = af.value(hi);
        let inv = af.neg_exp(hi);
        if m < 700.0 {
            prop_assert!((inv * m.exp() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn flatten_is_a_bijection(
        d_xi in 1usize..6,
        d_eta in 1usize..6,
        seed in 0u64..1000,
    ) {
        let m = (seed as usize % d_xi) + 1;
        let n = (seed as usize / 7 % d_xi) + 1;
        let r = (seed as usize / 49 % d_eta) + 1;
        let s = (seed as usize / 343 % d_eta) + 1;
        let idx = flatten(m, n, r, s, d_xi, d_eta).unwrap();
        prop_assert_eq!(unflatten(idx, d_xi, d_eta).unwrap(), (m, n, r, s));
        prop_assert_eq!(idx.i, d_eta * (m - 1) + r);
    }

    #[test]
    fn plancherel_unitarity(seed in 0u64..500) {
        let band = ProductBand::t1_su2(2, 4);
        let f = CoefficientField::random(band, seed, |w| 1.0 / w);
        let grid = Grid::for_bands(band, band).unwrap();
        let vals = synthesize_on_grid(&f, &grid);
        let l2 = l2_norm_on_grid(&vals, &grid);
        let pl = f.plancherel_norm();
        prop_assert!((l2 - pl).abs() <= 1e-8 * pl.max(1e-12));
        // Analysis inverts synthesis on the band.
        let back = analyze_on_grid(&vals, &grid, band).unwrap();
        prop_assert!(f.max_block_diff(&back) < 1e-10);
    }

    #[test]
    fn solve_round_trip_and_projection(seed in 0u64..200) {
        let sp = DivisorSpectrum::new(
            VectorFieldSpec::t2(
                Coupling::Cf(CfPattern::Periodic { head: vec![1], cycle: vec![2] }),
                Shift::default(),
            ),
            Truncation { g1_limit: 20, g2_limit: 20 },
            128,
        )
        .unwrap();
        let mut f = CoefficientField::random(ProductBand::t2(16, 16), seed, |_| 1.0);
        f.set_scalar(0, 0, Complex64::new(0.0, 0.0));
        prop_assert!(check_admissible(&f, &sp).unwrap().admissible);
        let u = solve(&f, &sp).unwrap();
        let back = apply(&sp, &u).unwrap();
        prop_assert!(back.max_block_diff(&f) <= 1e-12 * f.max_abs());
        // solve(apply(u)) zeroes the kernel block and fixes the rest.
        let proj = solve(&back, &sp).unwrap();
        prop_assert!(proj.max_block_diff(&u) <= 1e-12 * u.max_abs());
    }

    #[test]
    fn convergents_reduced_and_alternating(digits in prop::collection::vec(1u64..50, 2..8)) {
        let mut with_head = vec![3u64];
        with_head.extend(digits);
        let mut cf = ContinuedFraction::new(CfPattern::Explicit(
            with_head.iter().map(|&d| BigInt::from(d)).collect(),
        ))
        .unwrap();
        let n = with_head.len() - 1;
        let conv = cf.convergents(n).unwrap();
        for (p, q) in &conv {
            prop_assert!(p.gcd(q).is_one());
        }
        // Even-index convergents increase, odd-index decrease, enclosing
        // the value.
        let value = BigRational::new(conv[n].0.clone(), conv[n].1.clone());
        for (i, (p, q)) in conv.iter().enumerate().take(n) {
            let c = BigRational::new(p.clone(), q.clone());
            if i % 2 == 0 {
                prop_assert!(c <= value);
            } else {
                prop_assert!(c >= value);
            }
        }
    }
}

#[test]
fn fitted_constant_shrinks_with_truncation() {
    let af = AssociatedFunction::new(Arc::new(WeightSequence::gevrey(2.0, 128).unwrap()));
    let spec = VectorFieldSpec::t2(Coupling::Cf(CfPattern::SqrtTower), Shift::default());
    let mut prev = f64::INFINITY;
    for lim in [40i64, 160, 640] {
        let sp = DivisorSpectrum::new(
            spec.clone(),
            Truncation { g1_limit: lim, g2_limit: lim },
            128,
        )
        .unwrap();
        let v = diophantine_fit(&sp, &af, FitMode::Roumieu, &[0.5]).unwrap();
        assert!(v.fits[0].log_c <= prev + 1e-12);
        prev = v.fits[0].log_c;
    }
}

#[test]
fn condition_implication_order() {
    // On identical data: Roumieu-consistent implies Beurling-consistent,
    // and the hypoellipticity shape implies the solvability shape.
    let af = AssociatedFunction::new(Arc::new(WeightSequence::gevrey(2.0, 128).unwrap()));
    let cases = [
        VectorFieldSpec::t2(
            Coupling::Cf(CfPattern::Periodic { head: vec![1], cycle: vec![2] }),
            Shift::default(),
        ),
        VectorFieldSpec::t1_su2(Coupling::Cf(CfPattern::FactorialPow10), Shift::half_i()),
        VectorFieldSpec::t2(Coupling::Cf(CfPattern::SqrtTower), Shift::default()),
    ];
    for spec in cases {
        let sp = DivisorSpectrum::new(
            spec,
            Truncation { g1_limit: 300, g2_limit: 300 },
            256,
        )
        .unwrap();
        let rou = diophantine_fit(&sp, &af, FitMode::Roumieu, &default_n_grid()).unwrap();
        let beu = diophantine_fit(&sp, &af, FitMode::Beurling, &default_n_grid()).unwrap();
        if rou.verdict == Consistency::ConditionConsistent {
            assert_eq!(beu.verdict, Consistency::ConditionConsistent);
        }
        if rou.hypoelliptic_consistent() {
            assert!(rou.solvable_consistent());
        }
    }
}
