//! Wigner small-d matrices d^l_{mn}(theta) for integer and half-integer
//! spin, with rows and columns ordered by ascending label -l..l.
//!
//! Whole matrices come from the stable half-spin coupling recursion seeded
//! at l = 1/2; `element` is the classical factorial sum, kept as an
//! independent slow path for validation.

use crate::numeric::ln_factorial;

/// d^(1/2)(theta) with ascending labels (-1/2, +1/2).
fn seed_half(theta: f64) -> Vec<f64> {
    let c = (theta / 2.0).cos();
    let s = (theta / 2.0).sin();
    vec![c, s, -s, c]
}

/// All matrices d^l for 2l = 0..two_lmax at one angle; `matrices[t]` is the
/// (t+1) x (t+1) matrix for 2l = t, flattened row-major.
pub fn matrices_up_to(two_lmax: i64, theta: f64) -> Vec<Vec<f64>> {
    assert!(two_lmax >= 0);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(two_lmax as usize + 1);
    out.push(vec![1.0]);
    if two_lmax == 0 {
        return out;
    }
    out.push(seed_half(theta));
    let half = seed_half(theta);
    for two_l in 2..=two_lmax {
        let dim = (two_l + 1) as usize;
        let prev = &out[(two_l - 1) as usize];
        let prev_dim = two_l as usize;
        let mut m = vec![0.0; dim * dim];
        // Coupling weights for labels rho = a - l (in halves: 2rho = 2a - 2l):
        // c_plus = sqrt((l+rho)/(2l)), pairing with the previous rho - 1/2.
        let inv = 1.0 / (two_l as f64);
        for a in 0..dim {
            let two_rho_a = 2 * a as i64 - two_l;
            let cp_a = (((two_l + two_rho_a) as f64) * 0.5 * inv).sqrt();
            let cm_a = (((two_l - two_rho_a) as f64) * 0.5 * inv).sqrt();
            for b in 0..dim {
                let two_rho_b = 2 * b as i64 - two_l;
                let cp_b = (((two_l + two_rho_b) as f64) * 0.5 * inv).sqrt();
                let cm_b = (((two_l - two_rho_b) as f64) * 0.5 * inv).sqrt();
                let mut acc = 0.0;
                // (e, e') in {-1/2, +1/2}^2; e = +1/2 uses prev index a-1.
                for (ea, ca) in [(0usize, cm_a), (1usize, cp_a)] {
                    let pa = a as i64 - ea as i64;
                    if pa < 0 || pa >= prev_dim as i64 {
                        continue;
                    }
                    for (eb, cb) in [(0usize, cm_b), (1usize, cp_b)] {
                        let pb = b as i64 - eb as i64;
                        if pb < 0 || pb >= prev_dim as i64 {
                            continue;
                        }
                        let h = half[2 * ea + eb];
                        if ca == 0.0 || cb == 0.0 || h == 0.0 {
                            continue;
                        }
                        acc += ca * cb * h * prev[pa as usize * prev_dim + pb as usize];
                    }
                }
                m[a * dim + b] = acc;
            }
        }
        out.push(m);
    }
    out
}

/// Single matrix d^l(theta), ascending labels, row-major (2l+1)^2.
pub fn matrix(two_l: i64, theta: f64) -> Vec<f64> {
    matrices_up_to(two_l, theta).pop().unwrap()
}

/// d^l_{m'm}(theta) by the factorial sum; labels in halves (2m', 2m).
///
/// Slow and mildly cancellation-prone at large l; meant as the oracle the
/// recursion is checked against, and for one-off evaluations.
pub fn element(two_l: i64, two_mp: i64, two_m: i64, theta: f64) -> f64 {
    assert!(two_l >= 0 && two_mp.abs() <= two_l && two_m.abs() <= two_l);
    assert!((two_l - two_mp) % 2 == 0 && (two_l - two_m) % 2 == 0);
    let c = (theta / 2.0).cos();
    let s = (theta / 2.0).sin();
    // Integer bookkeeping: j+m', j-m', j+m, j-m are all integers.
    let jpmp = (two_l + two_mp) / 2;
    let jmmp = (two_l - two_mp) / 2;
    let jpm = (two_l + two_m) / 2;
    let jmm = (two_l - two_m) / 2;
    let pref = 0.5
        * (ln_factorial(jpmp as u64)
            + ln_factorial(jmmp as u64)
            + ln_factorial(jpm as u64)
            + ln_factorial(jmm as u64));
    let dmm = (two_mp - two_m) / 2; // m' - m
    let t_min = 0.max(-dmm);
    let t_max = jpm.min(jmmp);
    let mut acc = 0.0;
    for t in t_min..=t_max {
        let ln_den = ln_factorial((jpm - t) as u64)
            + ln_factorial(t as u64)
            + ln_factorial((dmm + t) as u64)
            + ln_factorial((jmmp - t) as u64);
        // cos exponent 2j + m - m' - 2t = (j+m) + (j-m') - 2t.
        let cos_exp = jpm + jmmp - 2 * t;
        let sin_exp = dmm + 2 * t;
        let sign = if (dmm + t) % 2 == 0 { 1.0 } else { -1.0 };
        acc += sign * (pref - ln_den).exp() * c.powi(cos_exp as i32) * s.powi(sin_exp as i32);
    }
    acc
}
