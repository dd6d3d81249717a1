//! Limited-memory BFGS with projection onto lower bounds.
//!
//! Coordinates sitting on their bound with a gradient pushing outward are held fixed
//! for the iteration; the two-loop recursion runs over the remaining free coordinates.
//! Steps are projected back onto the box and accepted under an Armijo condition
//! measured along the projected step.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// Stop when the projected gradient ∞-norm falls to this value.
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { tol: 1e-7, max_iter: 500, memory: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

const ARMIJO_C1: f64 = 1e-4;
const AT_BOUND: f64 = 1e-12;

pub fn project(x: &mut [f64], lower: &[Option<f64>]) {
    for (xi, lo) in x.iter_mut().zip(lower) {
        if let Some(l) = lo {
            if *xi < *l {
                *xi = *l;
            }
        }
    }
}

/// Gradient with components that point out of the feasible box zeroed.
pub fn projected_gradient(x: &[f64], g: &[f64], lower: &[Option<f64>]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower)
        .map(|((&xi, &gi), lo)| match lo {
            Some(l) if xi <= l + AT_BOUND && gi > 0.0 => 0.0,
            _ => gi,
        })
        .collect()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` subject to `x_i ≥ lower_i` where a lower bound is given.
///
/// `eval` returns the value and gradient; an error or a non-finite value is treated
/// as an infeasible point and the line search backs off.
pub fn minimize<E>(
    x0: &[f64],
    lower: &[Option<f64>],
    options: &LbfgsOptions,
    mut eval: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
) -> Result<LbfgsResult, E> {
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower);
    let (mut f, mut g) = eval(&x)?;
    let mut evaluations = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;

    let termination = loop {
        let pg = projected_gradient(&x, &g, lower);
        let pg_norm = inf_norm(&pg);
        if pg_norm <= options.tol {
            break Termination::Converged;
        }
        if iterations >= options.max_iter {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let free: Vec<bool> = pg.iter().zip(&g).map(|(p, gi)| !(*p == 0.0 && *gi != 0.0)).collect();
        let mut direction = two_loop(&g, &free, &history);
        if dot(&direction, &g) >= 0.0 {
            history.clear();
            direction = g.iter().zip(&free).map(|(gi, &fr)| if fr { -gi } else { 0.0 }).collect();
        }

        let mut alpha = if history.is_empty() { (1.0 / inf_norm(&direction)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + alpha * di).collect();
            project(&mut trial, lower);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if inf_norm(&step) == 0.0 {
                break;
            }
            if let Ok((ft, gt)) = eval(&trial) {
                evaluations += 1;
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) {
                    let decrease = ft <= f + ARMIJO_C1 * dot(&g, &step);
                    // Near the optimum the change in f drops below rounding; fall back on
                    // a strict reduction of the projected gradient.
                    let flat = (ft - f).abs() <= 1e-14 * f.abs().max(1.0)
                        && inf_norm(&projected_gradient(&trial, &gt, lower)) < 0.5 * pg_norm;
                    if decrease || flat {
                        accepted = Some((trial, ft, gt, step));
                        break;
                    }
                }
            } else {
                evaluations += 1;
            }
            alpha *= 0.5;
        }

        match accepted {
            Some((xn, fnew, gnew, s)) => {
                let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                    if history.len() == options.memory {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                x = xn;
                f = fnew;
                g = gnew;
            }
            None if !history.is_empty() => history.clear(),
            None => break Termination::LineSearchFailed,
        }
        debug_assert_eq!(x.len(), n);
    };

    Ok(LbfgsResult { x, f, grad: g, iterations, evaluations, termination })
}

fn two_loop(g: &[f64], free: &[bool], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(x, &f)| if f { *x } else { 0.0 }).collect() };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let s = mask(s);
        let y = mask(y);
        let a = rho * dot(&s, &q);
        for (qi, yi) in q.iter_mut().zip(&y) {
            *qi -= a * yi;
        }
        alphas.push((a, s, y));
    }
    if let Some((s, y, _)) = history.back() {
        let (s, y) = (mask(s), mask(y));
        let yy = dot(&y, &y);
        let sy = dot(&s, &y);
        if yy > 0.0 && sy > 0.0 {
            let gamma = sy / yy;
            q.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for ((a, s, y), (_, _, rho)) in alphas.into_iter().rev().zip(history.iter()) {
        let b = rho * dot(&y, &q);
        for (qi, si) in q.iter_mut().zip(&s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}
