//! Scalar statistics: Pearson correlation with an exact two-sided p-value.
//!
//! The p-value needs the regularized incomplete beta function, implemented
//! here (Lanczos log-gamma plus a modified Lentz continued fraction) so the
//! numeric core stays dependency-free and bit-stable.

use crate::error::{Error, Result};

/// Result of a correlation test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value under the t-distribution with `n - 2` degrees of
    /// freedom; `None` when `n < 3` leaves no degrees of freedom.
    pub p_value: Option<f64>,
    pub n: usize,
}

/// Natural log of the gamma function (Lanczos approximation, g = 7, n = 9).
///
/// Accurate to ~1e-13 relative error for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    // Coefficients from the standard g=7 Lanczos fit.
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    assert!(x > 0.0, "ln_gamma defined here for positive arguments only");
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued-fraction kernel for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3.0e-16;
    const TINY: f64 = 1.0e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return h;
        }
    }
    h // converged to working precision for all arguments used here
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "inc_beta requires positive shape parameters");
    assert!((0.0..=1.0).contains(&x), "inc_beta requires x in [0, 1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // Use the continued fraction on the side where it converges fast.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value for a t-statistic with `df` degrees of freedom.
///
/// `P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn t_test_two_sided(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    if !t.is_finite() {
        return 0.0;
    }
    inc_beta(0.5 * df, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Pearson correlation between two equal-length samples.
///
/// Returns an error when fewer than two points are given or either sample
/// has zero variance (the coefficient is undefined there).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "pearson: sample lengths differ ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("pearson: need at least 2 points, got {n}")));
    }
    let nf = n as f64;
    let mean_x = xs.iter().sum::<f64>() / nf;
    let mean_y = ys.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate(
            "pearson: a sample has zero variance, correlation undefined".into(),
        ));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p_value = if n >= 3 {
        let df = nf - 2.0;
        let denom = 1.0 - r * r;
        let p = if denom <= 0.0 {
            0.0 // |r| = 1 exactly: the t-statistic diverges
        } else {
            t_test_two_sided(r * (df / denom).sqrt(), df)
        };
        Some(p)
    } else {
        None
    };
    Ok(Correlation { r, p_value, n })
}

/// Mean of a sample (0 for an empty slice).
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation (n - 1 denominator); 0 when fewer than 2 points.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_factorials_and_half_integers() {
        // Γ(n) = (n-1)!
        for (n, fact) in [(1.0, 1.0), (2.0, 1.0), (3.0, 2.0), (5.0, 24.0), (8.0, 5040.0)] {
            assert!((ln_gamma(n) - f64::ln(fact)).abs() < 1e-12, "Γ({n})");
        }
        // Γ(1/2) = √π
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
    }

    #[test]
    fn inc_beta_closed_forms() {
        // I_x(1, 1) = x
        for x in [0.0, 0.2, 0.5, 0.9, 1.0] {
            assert!((inc_beta(1.0, 1.0, x) - x).abs() < 1e-14);
        }
        // I_x(1, b) = 1 - (1-x)^b
        let x = 0.3;
        let b = 4.0;
        assert!((inc_beta(1.0, b, x) - (1.0 - (1.0 - x).powf(b))).abs() < 1e-14);
        // symmetry: I_x(a, b) = 1 - I_{1-x}(b, a)
        assert!((inc_beta(2.5, 3.5, 0.4) - (1.0 - inc_beta(3.5, 2.5, 0.6))).abs() < 1e-13);
    }

    #[test]
    fn inc_beta_matches_numerical_integration() {
        // Oracle: adaptive-free Simpson integration of the beta density at
        // fine resolution, accurate well past 1e-8.
        fn oracle(a: f64, b: f64, x: f64) -> f64 {
            let steps = 2_000_000usize;
            let h = x / steps as f64;
            // powf handles the endpoints (0^0 = 1), unlike the log form
            let f = |t: f64| -> f64 { t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0) };
            let mut acc = 0.0;
            for i in 0..steps {
                let t0 = i as f64 * h;
                acc += (f(t0) + 4.0 * f(t0 + 0.5 * h) + f(t0 + h)) * h / 6.0;
            }
            acc * (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)).exp()
        }
        for (a, b, x) in [(2.0, 3.0, 0.35), (5.5, 1.5, 0.7), (9.0, 9.0, 0.5), (1.0, 2.5, 0.11)] {
            let got = inc_beta(a, b, x);
            let want = oracle(a, b, x);
            assert!((got - want).abs() < 1e-8, "I_{x}({a},{b}): got {got}, oracle {want}");
        }
    }

    #[test]
    fn pearson_hand_computed_example() {
        // Worked by hand: xs deviations (-1.5,-0.5,0.5,1.5), ys deviations
        // (-25.5,-24.5,-23.5,73.5) about mean 26.5; Σdxdy = 149, Σdx² = 5,
        // Σdy² = 7205 ⇒ r = 149/√36025 = 0.7850264…
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 2.0, 3.0, 100.0];
        let c = pearson(&xs, &ys).unwrap();
        let want = 149.0 / (5.0f64 * 7205.0).sqrt();
        assert!((c.r - want).abs() < 1e-12);
        assert!((c.r - 0.7850264209630101).abs() < 1e-12);
        // With df = 2 the closed form collapses: p = 1 - √(1 - 2/(2+t²)),
        // which simplifies to exactly 1 - |r|.
        let p = c.p_value.unwrap();
        assert!((p - (1.0 - c.r)).abs() < 1e-12);
        assert!((p - 0.2149735790369898).abs() < 1e-12);
    }

    #[test]
    fn pearson_exact_linear_relationship() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 4.0, 6.0, 8.0, 10.0];
        let c = pearson(&xs, &ys).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12, "r = {}", c.r);
        assert!(c.p_value.unwrap() < 1e-12);
        let neg: Vec<f64> = ys.iter().map(|y| -y).collect();
        assert!((pearson(&xs, &neg).unwrap().r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps() {
        let xs = [0.3, 1.9, 2.2, 4.7, 5.1, 8.0];
        let ys = [2.0, 1.0, 4.0, 3.0, 7.0, 6.0];
        let base = pearson(&xs, &ys).unwrap();
        let xs2: Vec<f64> = xs.iter().map(|x| 3.5 * x + 11.0).collect();
        let ys2: Vec<f64> = ys.iter().map(|y| 0.25 * y - 2.0).collect();
        let mapped = pearson(&xs2, &ys2).unwrap();
        assert!((base.r - mapped.r).abs() < 1e-12);
        assert!((base.p_value.unwrap() - mapped.p_value.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pearson_rejects_degenerate_inputs() {
        assert!(pearson(&[1.0], &[2.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[3.0]).is_err());
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn pearson_two_points_has_no_p_value() {
        let c = pearson(&[0.0, 1.0], &[3.0, 5.0]).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        assert_eq!(c.p_value, None);
    }

    #[test]
    fn t_test_matches_known_quantiles() {
        // With df=10, |t|=2.228 is the classic 5% two-sided critical value.
        let p = t_test_two_sided(2.228, 10.0);
        assert!((p - 0.05).abs() < 2e-4, "got {p}");
        // Symmetry in t.
        assert_eq!(t_test_two_sided(1.3, 7.0), t_test_two_sided(-1.3, 7.0));
        // Large |t| drives p toward zero.
        assert!(t_test_two_sided(50.0, 3.0) < 1e-4);
        assert_eq!(t_test_two_sided(0.0, 5.0), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn pearson_is_symmetric_and_affine_equivariant(
            seed in 0u64..500,
            n in 4usize..40,
            scale in proptest::sample::select(vec![-3.0, -0.5, 0.7, 2.0]),
            shift in -5.0..5.0f64,
        ) {
            use proptest::prelude::*;
            let mut r = crate::rng::stream(seed, "stats/prop");
            let xs: Vec<f64> = (0..n).map(|_| crate::rng::uniform(&mut r, -10.0, 10.0)).collect();
            let ys: Vec<f64> = (0..n).map(|_| crate::rng::uniform(&mut r, -10.0, 10.0)).collect();
            let c = pearson(&xs, &ys).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c.r));
            // swapping the samples leaves r unchanged
            let swapped = pearson(&ys, &xs).unwrap();
            prop_assert!((c.r - swapped.r).abs() < 1e-12);
            // an affine map of one sample changes r only by the sign of the scale
            let mapped: Vec<f64> = xs.iter().map(|&x| scale * x + shift).collect();
            let t = pearson(&mapped, &ys).unwrap();
            prop_assert!((t.r - scale.signum() * c.r).abs() < 1e-9, "{} vs {}", t.r, c.r);
            if let (Some(p), Some(q)) = (c.p_value, t.p_value) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}
