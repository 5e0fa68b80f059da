use std::cmp::Ordering;

use nsbohm::hyperreal::{default_cap, Exponent, HyperReal, Magnitude};
use proptest::prelude::*;

fn q(n: i64, d: i64) -> Exponent {
    Exponent::new(n, d)
}

/// Exponents in halves from -2 to 4, coefficients k/8 with 1 <= |k| <= 64, so
/// ring operations on a few terms are exact in binary64.
fn dyadic() -> impl Strategy<Value = HyperReal> {
    prop::collection::vec((-4i64..=8, (1i64..=64), any::<bool>()), 0..5).prop_map(|ts| {
        HyperReal::from_terms(
            ts.into_iter()
                .map(|(e, k, neg)| (q(e, 2), if neg { -(k as f64) } else { k as f64 } / 8.0)),
            default_cap(),
        )
    })
}

fn finite_dyadic() -> impl Strategy<Value = HyperReal> {
    dyadic().prop_map(|a| {
        HyperReal::from_terms(
            a.terms().iter().copied().filter(|t| t.0 >= Exponent::from_integer(0)),
            default_cap(),
        )
    })
}

/// Integer exponents only, for comparisons against numeric instantiation.
fn integral_dyadic() -> impl Strategy<Value = HyperReal> {
    prop::collection::vec((-2i64..=4, (1i64..=64), any::<bool>()), 0..5).prop_map(|ts| {
        HyperReal::from_terms(
            ts.into_iter()
                .map(|(e, k, neg)| (q(e, 1), if neg { -(k as f64) } else { k as f64 } / 8.0)),
            default_cap(),
        )
    })
}

fn generic() -> impl Strategy<Value = HyperReal> {
    prop::collection::vec((-4i64..=8, -10.0f64..10.0), 0..5).prop_map(|ts| {
        HyperReal::from_terms(ts.into_iter().map(|(e, c)| (q(e, 2), c)), default_cap())
    })
}

/// Highest order at which a product of these factors is unaffected by the
/// truncation of intermediate results.
fn trusted_order(xs: &[&HyperReal]) -> Exponent {
    xs.iter().fold(default_cap(), |acc, x| {
        acc + x
            .leading_exponent()
            .map(|e| e.min(Exponent::from_integer(0)))
            .unwrap_or_else(|| Exponent::from_integer(0))
    })
}

fn coef_scale(x: &HyperReal) -> f64 {
    x.terms().iter().map(|t| t.1.abs()).fold(1.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn addition_is_a_commutative_group(a in dyadic(), b in dyadic(), c in dyadic()) {
        prop_assert_eq!(&a + &b, &b + &a);
        prop_assert_eq!(&(&a + &b) + &c, &a + &(&b + &c));
        prop_assert_eq!(&a + &HyperReal::zero(), a.clone());
        prop_assert!((&a + &(-&a)).is_zero());
    }

    #[test]
    fn multiplication_laws(a in dyadic(), b in dyadic(), c in dyadic()) {
        prop_assert_eq!(&a * &b, &b * &a);
        let order = trusted_order(&[&a, &b, &c]);
        prop_assert!((&(&a * &b) * &c).agrees_to(&(&a * &(&b * &c)), order));
        prop_assert!((&a * &(&b + &c)).agrees_to(&(&(&a * &b) + &(&a * &c)), order));
        prop_assert_eq!(&a * &HyperReal::one(), a.clone());
    }

    #[test]
    fn multiplication_commutes_for_any_coefficients(a in generic(), b in generic()) {
        prop_assert_eq!(&a * &b, &b * &a);
    }

    #[test]
    fn multiplicative_inverse(a in dyadic()) {
        prop_assume!(!a.is_zero());
        let inv = a.recip().unwrap();
        let order = trusted_order(&[&a, &a]);
        // Series coefficients can grow large; rounding scales with them.
        let tol = 1e-12 * coef_scale(&a) * coef_scale(&inv);
        prop_assert!((&a * &inv).approx_agrees_to(&HyperReal::one(), order, tol));
    }

    #[test]
    fn div_undoes_mul(a in dyadic(), b in dyadic()) {
        prop_assume!(!b.is_zero());
        // a·b loses the terms of a above cap − lead(b), and dividing by b
        // shifts orders by lead(b).
        let lead_b = b.leading_exponent().unwrap();
        let order = trusted_order(&[&a, &b]) - lead_b.max(-lead_b);
        let back = (&a * &b).try_div(&b).unwrap();
        let tol = 1e-12 * coef_scale(&(&a * &b)) * coef_scale(&b.recip().unwrap());
        prop_assert!(back.approx_agrees_to(&a, order, tol));
    }

    #[test]
    fn sqrt_squares_back(a in dyadic()) {
        prop_assume!(!a.is_zero());
        let a = a.abs();
        let r = a.sqrt().unwrap();
        prop_assert_eq!(r.signum(), Ordering::Greater);
        let order = trusted_order(&[&a, &a]);
        let tol = 1e-12 * coef_scale(&r) * coef_scale(&r);
        prop_assert!((&r * &r).approx_agrees_to(&a, order, tol));
    }

    #[test]
    fn order_is_total_and_compatible(a in dyadic(), b in dyadic(), c in dyadic()) {
        let ab = a.compare(&b);
        prop_assert_eq!(ab, b.compare(&a).reverse());
        prop_assert_eq!(ab == Ordering::Equal, a == b);
        if ab == Ordering::Less {
            prop_assert!(&a + &c < &b + &c);
            if c.signum() == Ordering::Greater {
                prop_assert!(!(&a * &c > &b * &c));
            }
        }
        if a < b && b < c {
            prop_assert!(a < c);
        }
    }

    #[test]
    fn standard_part_is_a_homomorphism(a in finite_dyadic(), b in finite_dyadic()) {
        let (sa, sb) = (a.standard_part().unwrap(), b.standard_part().unwrap());
        prop_assert_eq!((&a + &b).standard_part().unwrap(), sa + sb);
        prop_assert_eq!((&a * &b).standard_part().unwrap(), sa * sb);
    }

    #[test]
    fn compare_agrees_with_small_instantiations(a in integral_dyadic(), b in integral_dyadic()) {
        prop_assume!(a != b);
        let diff = &a - &b;
        for e in [1e-3, 1e-6] {
            let v = diff.instantiate(e);
            prop_assert_eq!(a.compare(&b), v.partial_cmp(&0.0).unwrap());
        }
    }

    #[test]
    fn classify_matches_leading_exponent(a in dyadic()) {
        let m = a.classify();
        match a.leading_exponent() {
            None => prop_assert_eq!(m, Magnitude::Zero),
            Some(e) if e > Exponent::from_integer(0) => prop_assert_eq!(m, Magnitude::Infinitesimal),
            Some(e) if e == Exponent::from_integer(0) => prop_assert_eq!(m, Magnitude::AppreciableFinite),
            Some(_) => prop_assert_eq!(m, Magnitude::Infinite),
        }
    }

    #[test]
    fn serde_round_trip(a in generic()) {
        let s = serde_json::to_string(&a).unwrap();
        let b: HyperReal = serde_json::from_str(&s).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn geometric_series_matches_binary64() {
    let inv = HyperReal::one() / (HyperReal::one() + HyperReal::eps());
    let e: f64 = 1e-4;
    // Truncation at ε⁴ leaves an error of order ε⁵, far below rounding.
    assert!((inv.instantiate(e) - 1.0 / (1.0 + e)).abs() <= 2.0 * f64::EPSILON);
}

#[test]
fn binomial_series_matches_binary64() {
    let two = Exponent::from_integer(2);
    let s = (HyperReal::one() - HyperReal::eps_pow(two)).sqrt().unwrap();
    // Independent oracle: Σ C(1/2, k)(-x)^k for x = ε².
    let oracle = [1.0, -0.5, -0.125];
    for (k, c) in oracle.iter().enumerate() {
        assert_eq!(s.coefficient(Exponent::from_integer(2 * k as i64)), *c);
    }
    let e: f64 = 1e-3;
    assert!((s.instantiate(e) - (1.0 - e * e).sqrt()).abs() < 1e-16);
}

#[test]
fn fractional_powers_instantiate() {
    let a = HyperReal::eps_pow(q(3, 2));
    assert!((a.instantiate(1e-4) - 1e-6).abs() < 1e-20);
    let r = a.sqrt().unwrap();
    assert_eq!(r, HyperReal::eps_pow(q(3, 4)));
}

#[test]
fn infinite_times_infinitesimal() {
    let big = HyperReal::eps_pow(q(-3, 2)).scale(2.0) + HyperReal::from_real(1.0);
    let small = HyperReal::eps_pow(q(3, 2));
    let prod = &big * &small;
    assert_eq!(prod.standard_part().unwrap(), 2.0);
    assert!(prod.infinitely_close(&HyperReal::from_real(2.0)));
}
