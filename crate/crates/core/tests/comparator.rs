mod common;

use auglik::comparator::{fit_cloglog, fit_standard, relative_efficiency, GlmRow};
use auglik::estimation::{fit, FitOptions};
use common::*;
use rand::Rng;

#[test]
fn perfect_classification_matches_grouped_ph() {
    let gap = perfect_classification_gap(800, 5);
    assert!(gap <= 1e-6, "gap {gap:e}");
}

#[test]
fn intercept_only_matches_closed_form() {
    let worst = intercept_closed_form_error(20, 9);
    assert!(worst <= 1e-10, "worst {worst:e}");
}

/// Without auxiliary reports and one visit, the augmented likelihood is the binary
/// cloglog likelihood of the validated status.
#[test]
fn gold_standard_only_equals_binary_cloglog() {
    let mut r = rng(21);
    let subjects: Vec<_> = (0..1500)
        .map(|i| {
            let x: f64 = r.random_range(-1.0..1.0);
            let p = 1.0 - (-(-1.2f64 + 0.5 * x).exp()).exp();
            let y = r.random_bool(p);
            let gs = if i % 7 == 0 { None } else { Some(y) };
            subject(&format!("s{i}"), &[], &[], gs, 1, vec![x])
        })
        .collect();
    let data = dataset(1, subjects, 0.8, 0.9);
    let prop = fit(&data, None, &FitOptions { tol: 1e-11, ..FitOptions::default() }).unwrap();
    let std = fit_standard(&data, None).unwrap();
    assert!(prop.converged && std.converged);
    assert!((prop.params.beta[0] - std.coefficients[1]).abs() < 1e-6);
    assert!((prop.params.lam[0] - std.coefficients[0]).abs() < 1e-6);
    // Same likelihood, same curvature at the optimum up to observed vs expected information.
    let re = relative_efficiency(&prop, &std, 0).unwrap();
    assert!((re - 1.0).abs() < 0.05, "re {re}");
}

#[test]
fn weights_of_two_equal_duplicated_rows() {
    let mut r = rng(8);
    let base: Vec<GlmRow> = (0..300)
        .map(|_| {
            let x: f64 = r.random_range(-1.0..1.0);
            GlmRow { y: r.random_bool(0.3), x: vec![x], weight: 1.0 }
        })
        .collect();
    let doubled: Vec<GlmRow> = base.iter().map(|g| GlmRow { weight: 2.0, ..g.clone() }).collect();
    let dup: Vec<GlmRow> = base.iter().chain(&base).cloned().collect();
    let a = fit_cloglog(&doubled, None).unwrap();
    let b = fit_cloglog(&dup, None).unwrap();
    for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
        assert!((u - v).abs() < 1e-9);
    }
}
