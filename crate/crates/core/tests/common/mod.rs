#![allow(dead_code)]

use auglik::data::{Dataset, MisclassSpec, SubjectRecord, VisitSchedule};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn subject(id: &str, visits: &[usize], results: &[bool], gs: Option<bool>, v: usize, x: Vec<f64>) -> SubjectRecord {
    SubjectRecord {
        id: id.into(),
        aux_results: results.to_vec(),
        aux_visit_indices: visits.to_vec(),
        gs_visit_index: v,
        gs_status: gs,
        covariates: x,
        weight: 1.0,
        stratum: None,
        cluster: None,
    }
}

pub fn dataset(visits: usize, subjects: Vec<SubjectRecord>, se: f64, sp: f64) -> Dataset {
    Dataset { schedule: VisitSchedule::annual(visits).unwrap(), subjects, misclass: MisclassSpec::new(se, sp).unwrap() }
}

/// Random subject on J visits with reports stopped at the first positive one.
pub fn random_subject(rng: &mut ChaCha8Rng, j: usize, p: usize, branch: u8) -> SubjectRecord {
    let v = rng.random_range(1..=j);
    let mut visits = Vec::new();
    let mut results = Vec::new();
    for k in 1..=j {
        if rng.random_bool(0.75) {
            let y = rng.random_bool(0.3);
            visits.push(k);
            results.push(y);
            if y {
                break;
            }
        }
    }
    let gs = match branch % 3 {
        0 => Some(true),
        1 => Some(false),
        _ => None,
    };
    let x = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
    subject("r", &visits, &results, gs, v, x)
}

/// Strictly decreasing baseline survival S_1 = 1 > S_2 > … > S_{J+1} > 0.
pub fn random_survival(rng: &mut ChaCha8Rng, j: usize) -> Vec<f64> {
    let mut s = vec![1.0];
    for _ in 0..j {
        let last = *s.last().unwrap();
        s.push(last * rng.random_range(0.4..0.97));
    }
    s
}

/// Likelihood by direct enumeration over the true event interval: P(T in j | x) times
/// the probability of every observed report given T in j, times the gold-standard
/// indicator. Interval j (1-based) is (τ_{j-1}, τ_j], and j = J+1 is beyond the last visit.
pub fn enumerate_likelihood(s: &SubjectRecord, j_visits: usize, se: f64, sp: f64, beta: &[f64], surv: &[f64]) -> f64 {
    let eta: f64 = s.covariates.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>().exp();
    let mut total = 0.0;
    for j in 1..=j_visits + 1 {
        let upper = surv[j - 1].powf(eta);
        let lower = if j <= j_visits { surv[j].powf(eta) } else { 0.0 };
        let p_interval = upper - lower;
        let mut p_reports = 1.0;
        for (&k, &y) in s.aux_visit_indices.iter().zip(&s.aux_results) {
            let occurred = j <= k;
            p_reports *= match (occurred, y) {
                (true, true) => se,
                (true, false) => 1.0 - se,
                (false, true) => 1.0 - sp,
                (false, false) => sp,
            };
        }
        let p_gs = match s.gs_status {
            Some(true) => (j <= s.gs_visit_index) as u8 as f64,
            Some(false) => (j > s.gs_visit_index) as u8 as f64,
            None => 1.0,
        };
        total += p_interval * p_reports * p_gs;
    }
    total
}

/// Perfectly classified data: every subject attends every visit until the first positive
/// report, and the gold standard at the last visit agrees. Returns the data and each
/// subject's event interval (`None` when beyond the last visit).
pub fn perfect_data(n: usize, j: usize, beta: f64, seed: u64) -> (Dataset, Vec<Option<usize>>) {
    let mut r = rng(seed);
    let hazard = 0.12;
    let mut subjects = Vec::with_capacity(n);
    let mut intervals = Vec::with_capacity(n);
    for i in 0..n {
        let x: f64 = r.random_range(-1.0..1.0);
        let rate = hazard * (beta * x).exp();
        let u: f64 = r.random();
        let t = -u.ln() / rate;
        let interval = (t <= j as f64).then(|| (t.ceil() as usize).max(1));
        let last = interval.unwrap_or(j);
        let visits: Vec<usize> = (1..=last).collect();
        let results: Vec<bool> = visits.iter().map(|&k| Some(k) == interval).collect();
        subjects.push(subject(&format!("p{i}"), &visits, &results, Some(interval.is_some()), j, vec![x]));
        intervals.push(interval);
    }
    (dataset(j, subjects, 1.0, 1.0), intervals)
}

/// Worst relative discrepancy between the library likelihood and [`enumerate_likelihood`]
/// over `n` random instances with J ≤ 5.
pub fn max_enumeration_error(n: usize, seed: u64) -> f64 {
    use auglik::likelihood::{ParamVector, PreparedSubject, SurvivalVector};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let j = r.random_range(1..=5);
        let p = r.random_range(1..=3);
        let s = random_subject(&mut r, j, p, (i % 3) as u8);
        let se = r.random_range(0.55..0.99);
        let sp = r.random_range(0.55..0.99);
        let beta: Vec<f64> = (0..p).map(|_| r.random_range(-1.0..1.0)).collect();
        let surv = random_survival(&mut r, j);
        let d = dataset(j, vec![s.clone()], se, sp);
        let prepared = PreparedSubject::new(&s, &d.schedule, &d.misclass).unwrap();
        let params = ParamVector::from_survival(beta.clone(), &SurvivalVector(surv.clone()));
        let got = prepared.likelihood(&params);
        let want = enumerate_likelihood(&s, j, se, sp, &beta, &surv);
        worst = worst.max((got - want).abs() / want.abs());
    }
    worst
}

/// Worst relative ∞-norm gap between the analytic subject score and a central finite
/// difference of the subject log-likelihood, cycling through the three branches.
pub fn max_gradient_error(n: usize, seed: u64) -> f64 {
    use auglik::likelihood::{ParamVector, PreparedSubject};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let j = r.random_range(1..=6);
        let p = r.random_range(1..=3);
        let s = random_subject(&mut r, j, p, (i % 3) as u8);
        let d = dataset(j, vec![s.clone()], r.random_range(0.55..0.99), r.random_range(0.55..0.99));
        let prepared = PreparedSubject::new(&s, &d.schedule, &d.misclass).unwrap();
        let beta: Vec<f64> = (0..p).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut lam = vec![r.random_range(-3.0..0.0)];
        lam.extend((1..j).map(|_| r.random_range(0.05..1.0)));
        let params = ParamVector { beta, lam };
        let analytic = prepared.score(&params).unwrap();
        let x = params.to_vec();
        let fd: Vec<f64> = (0..x.len())
            .map(|k| {
                let h = 1e-6 * x[k].abs().max(1.0);
                let mut up = x.clone();
                let mut down = x.clone();
                up[k] += h;
                down[k] -= h;
                let f = |v: &[f64]| prepared.loglik(&ParamVector::from_slice(p, v)).unwrap();
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect();
        let gap = analytic.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = analytic.iter().map(|a| a.abs()).fold(0.0, f64::max).max(1e-3);
        worst = worst.max(gap / scale);
    }
    worst
}

/// |β̂_proposed − β̂_grouped PH| on perfectly classified data with full attendance and
/// a common validation visit.
pub fn perfect_classification_gap(n: usize, seed: u64) -> f64 {
    use auglik::comparator::{fit_cloglog_matrix, person_period, IrlsOptions};
    use auglik::estimation::{fit, FitOptions};
    let j = 4;
    let (data, intervals) = perfect_data(n, j, 1.5f64.ln(), seed);
    let opts = FitOptions { tol: 1e-10, max_iter: 2000, ..FitOptions::default() };
    let prop = fit(&data, None, &opts).unwrap();
    assert!(prop.converged, "proposed fit did not converge");
    let covs: Vec<Vec<f64>> = data.subjects.iter().map(|s| s.covariates.clone()).collect();
    let (x, y) = person_period(&intervals, &covs, j);
    let w = vec![1.0; y.len()];
    let glm = fit_cloglog_matrix(&x, &y, &w, None, &IrlsOptions::default()).unwrap();
    assert!(glm.converged, "person-period fit did not converge");
    (prop.params.beta[0] - glm.coefficients[j]).abs()
}

/// Worst |α̂ − log(−log(1 − k/n))| for intercept-only cloglog fits over `count` random (k, n).
pub fn intercept_closed_form_error(count: usize, seed: u64) -> f64 {
    use auglik::comparator::{fit_cloglog, GlmRow};
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let n = r.random_range(2..=5000usize);
        let k = r.random_range(1..n);
        let rows: Vec<GlmRow> = (0..n).map(|i| GlmRow { y: i < k, x: vec![], weight: 1.0 }).collect();
        let f = fit_cloglog(&rows, None).unwrap();
        assert!(f.converged);
        let want = (-(1.0 - k as f64 / n as f64).ln()).ln();
        worst = worst.max((f.coefficients[0] - want).abs());
    }
    worst
}

/// Relative gap between the fitted survey sandwich with every subject its own cluster and
/// unit weights, and the classical robust `B⁻¹ M B⁻¹ · n/(n − 1)` built from the
/// model-based covariance and the per-subject scores.
pub fn singleton_sandwich_gap(n: usize, seed: u64) -> f64 {
    use auglik::estimation::{fit, FitOptions};
    use auglik::likelihood::AugmentedLikelihood;
    use auglik::survey::SurveyDesign;
    let mut r = rng(seed);
    let subjects: Vec<SubjectRecord> = (0..n)
        .map(|i| {
            let mut s = random_subject(&mut r, 4, 1, (i % 3) as u8);
            s.id = format!("s{i}");
            s.covariates[0] = r.random_range(0.0..2.0);
            s
        })
        .collect();
    let data = dataset(4, subjects, 0.8, 0.9);
    let design = SurveyDesign::independent(&vec![1.0; n]).unwrap();
    let opts = FitOptions::default();
    let model = fit(&data, None, &opts).unwrap();
    let survey = fit(&data, Some(&design), &opts).unwrap();
    assert_eq!(model.params, survey.params);
    assert!(model.boundary.is_empty(), "boundary parameters make the comparison ill-posed");
    let bread_inv = model.full_cov.unwrap();
    let scores = AugmentedLikelihood::new(&data).unwrap().scores(&model.params).unwrap();
    let meat = scores.transpose() * &scores;
    let classical = &bread_inv * meat * &bread_inv * (n as f64 / (n as f64 - 1.0));
    let got = survey.full_cov.unwrap();
    (&got - &classical).abs().max() / classical.abs().max()
}

pub struct MiCheck {
    /// Combined SE with a zero calibration covariance, and the single-fit SE.
    pub zero_cov_se: f64,
    pub single_fit_se: f64,
    pub first: auglik::calibration::MiCombineResult,
    pub repeat: auglik::calibration::MiCombineResult,
    pub one_thread: auglik::calibration::MiCombineResult,
}

/// Runs the proposed-estimator imputation variance on a small HCHS-like sample: once with
/// `delta_cov` zeroed, and three times (twice pooled, once single-threaded) with M = 25.
pub fn mi_check(seed: u64) -> MiCheck {
    use auglik::analysis::prediction_rows;
    use auglik::calibration::{fit_calibration, mi_variance, predict_xhat, MiOptions};
    use auglik::estimation::{fit_prepared, FitOptions};
    use auglik::likelihood::AugmentedLikelihood;
    use auglik::simulation::{generate_hchs_like, ErrorModel, SimDesign};

    let design = SimDesign {
        n_target: 1500,
        error_model: Some(ErrorModel { subset_size: 300, ..ErrorModel::default() }),
        ..SimDesign::hchs_like()
    };
    let sample = generate_hchs_like(&design, seed).unwrap();
    let data = &sample.dataset;
    let targets = prediction_rows(data, 0).unwrap();
    let model = fit_calibration(&sample.subset).unwrap();
    let lik = AugmentedLikelihood::new(data).unwrap();
    let refit = |x: &[f64]| -> Result<(Vec<f64>, Vec<f64>), String> {
        let mut l = lik.clone();
        l.replace_covariate(0, x);
        let r = fit_prepared(&l, None, &FitOptions::default()).map_err(|e| e.to_string())?;
        let v = r.beta_cov().ok_or("no covariance")?.diagonal().iter().copied().collect();
        Ok((r.params.beta, v))
    };

    let (_, v) = refit(&predict_xhat(&model, &targets).unwrap()).unwrap();
    let single_fit_se = v[0].sqrt();
    let mut frozen = model.clone();
    frozen.delta_cov.iter_mut().for_each(|r| r.iter_mut().for_each(|c| *c = 0.0));
    let opts = MiOptions { imputations: 25, seed: 99, ..MiOptions::default() };
    let zero = mi_variance(refit, &frozen, Some(&sample.subset), &targets, &opts).unwrap();

    let first = mi_variance(refit, &model, Some(&sample.subset), &targets, &opts).unwrap();
    let repeat = mi_variance(refit, &model, Some(&sample.subset), &targets, &opts).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let one_thread = pool.install(|| mi_variance(refit, &model, Some(&sample.subset), &targets, &opts).unwrap());
    MiCheck { zero_cov_se: zero.se[0], single_fit_se, first, repeat, one_thread }
}
