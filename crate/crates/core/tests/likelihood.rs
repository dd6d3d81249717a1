mod common;

use auglik::likelihood::{AugmentedLikelihood, ParamVector, PreparedSubject, SurvivalVector, WeightsMode};
use common::*;
use proptest::prelude::*;

#[test]
fn matches_enumeration_on_small_instances() {
    let worst = max_enumeration_error(300, 11);
    assert!(worst <= 1e-12, "worst relative error {worst:e}");
}

#[test]
fn score_matches_finite_differences() {
    let worst = max_gradient_error(60, 12);
    assert!(worst <= 1e-5, "worst relative gap {worst:e}");
}

#[test]
fn reports_after_first_positive_are_ignored() {
    let base = subject("a", &[1, 2], &[false, true], Some(true), 3, vec![0.4]);
    let extra = subject("a", &[1, 2, 3, 4], &[false, true, false, false], Some(true), 3, vec![0.4]);
    let d = dataset(4, vec![base.clone()], 0.8, 0.9);
    let params = ParamVector::initial(1, 4, 0.3, 0.2);
    let a = PreparedSubject::new(&base, &d.schedule, &d.misclass).unwrap();
    let b = PreparedSubject::new(&extra, &d.schedule, &d.misclass).unwrap();
    assert_eq!(a.likelihood(&params), b.likelihood(&params));
}

#[test]
fn total_is_sum_of_subject_terms_and_weights_scale_survey_mode() {
    let mut r = rng(3);
    let mut subjects: Vec<_> = (0..700).map(|i| random_subject(&mut r, 4, 2, (i % 3) as u8)).collect();
    for (i, s) in subjects.iter_mut().enumerate() {
        s.id = format!("s{i}");
        s.weight = 1.0 + (i % 5) as f64;
    }
    let d = dataset(4, subjects, 0.8, 0.9);
    let lik = AugmentedLikelihood::new(&d).unwrap();
    let params = ParamVector::initial(2, 4, 0.2, 0.3);
    let direct: f64 = lik.subjects().iter().map(|s| s.loglik(&params).unwrap()).sum();
    let weighted: f64 = lik.subjects().iter().map(|s| s.weight * s.loglik(&params).unwrap()).sum();
    let total = lik.loglik_total(&params, WeightsMode::Unweighted).unwrap();
    let survey = lik.loglik_total(&params, WeightsMode::Survey).unwrap();
    assert!((total - direct).abs() <= 1e-9 * direct.abs());
    assert!((survey - weighted).abs() <= 1e-9 * weighted.abs());
    let (v, g) = lik.value_and_gradient(&params, WeightsMode::Unweighted).unwrap();
    assert_eq!(v, total);
    let scores = lik.scores(&params).unwrap();
    for (k, gk) in g.iter().enumerate() {
        let col: f64 = scores.column(k).iter().sum();
        assert!((col - gk).abs() <= 1e-9 * gk.abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn survival_round_trips_through_lam(steps in prop::collection::vec(0.3f64..0.99, 1..7)) {
        let mut s = vec![1.0];
        for f in &steps {
            let last = *s.last().unwrap();
            s.push(last * f);
        }
        let p = ParamVector::from_survival(vec![0.1], &SurvivalVector(s.clone()));
        prop_assert!(p.lam[1..].iter().all(|&l| l >= 0.0));
        let back = p.to_survival();
        for (a, b) in back.0.iter().zip(&s) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn subject_likelihood_is_a_probability(seed in 0u64..5000) {
        let mut r = rng(seed);
        let j = 1 + (seed % 5) as usize;
        let s = random_subject(&mut r, j, 2, (seed % 3) as u8);
        let surv = random_survival(&mut r, j);
        let d = dataset(j, vec![s.clone()], 0.7, 0.85);
        let prepared = PreparedSubject::new(&s, &d.schedule, &d.misclass).unwrap();
        let l = prepared.likelihood(&ParamVector::from_survival(vec![0.3, -0.2], &SurvivalVector(surv)));
        prop_assert!(l > 0.0 && l <= 1.0 + 1e-12);
    }
}
