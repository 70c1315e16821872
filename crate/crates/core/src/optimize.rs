//! BFGS maximisation with a strong-Wolfe line search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A function to maximise.
pub trait Objective: Sync {
    fn value(&self, x: &[f64]) -> f64;

    /// Value and gradient; central differences unless overridden.
    fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        (self.value(x), central_difference_gradient(|y| self.value(y), x, DEFAULT_FD_STEP))
    }

    /// Positive-definite approximation of the inverse of minus the Hessian at `x`, row-major.
    /// When given, it seeds the quasi-Newton matrix and every restart.
    fn initial_inverse_hessian(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Central differences with per-coordinate step `rel_step * max(|x_j|, 1)`.
pub fn central_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|j| {
            let h = rel_step * x[j].abs().max(1.0);
            y[j] = x[j] + h;
            let up = f(&y);
            y[j] = x[j] - h;
            let down = f(&y);
            y[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub max_iterations: usize,
    /// Relative gradient tolerance: max_j |g_j| max(|x_j|, 1) / max(|f|, 1).
    pub gradient_tolerance: f64,
    /// Relative parameter-step tolerance.
    pub step_tolerance: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Gradient,
    Step,
    MaxIterations,
    LineSearch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub reason: StopReason,
}

impl Maximum {
    pub fn gradient_norm(&self) -> f64 {
        self.gradient.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn relative_gradient(x: &[f64], g: &[f64], f: f64) -> f64 {
    let scale = f.abs().max(1.0);
    x.iter()
        .zip(g)
        .map(|(xi, gi)| gi.abs() * xi.abs().max(1.0) / scale)
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Internally the negated objective is minimised.
struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct Minimand<'a, O: Objective + ?Sized> {
    objective: &'a O,
    evaluations: usize,
}

impl<O: Objective + ?Sized> Minimand<'_, O> {
    fn eval(&mut self, x: Vec<f64>) -> Point {
        self.evaluations += 1;
        let (f, g) = self.objective.value_and_gradient(&x);
        Point {
            x,
            f: -f,
            g: g.into_iter().map(|v| -v).collect(),
        }
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LS: usize = 40;

fn step_to(x: &[f64], p: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().zip(p).map(|(a, b)| a + alpha * b).collect()
}

fn finite(p: &Point) -> bool {
    p.f.is_finite() && p.g.iter().all(|v| v.is_finite())
}

fn line_search<O: Objective + ?Sized>(
    m: &mut Minimand<'_, O>,
    start: &Point,
    dir: &[f64],
    first_step: f64,
) -> Option<Point> {
    let d0 = dot(&start.g, dir);
    if !(d0 < 0.0) {
        return None;
    }
    let mut lo = (0.0, start.f, d0);
    let mut alpha = first_step;
    let mut best: Option<Point> = None;
    for i in 0..MAX_LS {
        let trial = m.eval(step_to(&start.x, dir, alpha));
        if !finite(&trial) {
            return zoom(m, start, dir, d0, lo, (alpha, f64::INFINITY), best);
        }
        let dt = dot(&trial.g, dir);
        if trial.f > start.f + C1 * alpha * d0 || (i > 0 && trial.f >= lo.1) {
            return zoom(m, start, dir, d0, lo, (alpha, trial.f), best);
        }
        if dt.abs() <= -C2 * d0 {
            return Some(trial);
        }
        if dt >= 0.0 {
            let hi = (lo.0, lo.1);
            let lo_new = (alpha, trial.f, dt);
            return zoom(m, start, dir, d0, lo_new, hi, Some(trial));
        }
        lo = (alpha, trial.f, dt);
        best = Some(trial);
        alpha *= 2.0;
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn zoom<O: Objective + ?Sized>(
    m: &mut Minimand<'_, O>,
    start: &Point,
    dir: &[f64],
    d0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64),
    mut best: Option<Point>,
) -> Option<Point> {
    for _ in 0..MAX_LS {
        let (a, b) = if lo.0 < hi.0 { (lo.0, hi.0) } else { (hi.0, lo.0) };
        let width = b - a;
        if width <= 1e-16 * b.abs().max(1e-16) {
            break;
        }
        // minimiser of the quadratic through (lo, φ_lo, φ'_lo) and (hi, φ_hi), else bisection
        let span = hi.0 - lo.0;
        let curvature = hi.1 - lo.1 - lo.2 * span;
        let q = lo.0 - lo.2 * span * span / (2.0 * curvature);
        let alpha = if curvature > 0.0 && q.is_finite() && q > a + 0.1 * width && q < b - 0.1 * width {
            q
        } else {
            0.5 * (a + b)
        };
        let trial = m.eval(step_to(&start.x, dir, alpha));
        if !finite(&trial) || trial.f > start.f + C1 * alpha * d0 || trial.f >= lo.1 {
            hi = (alpha, if finite(&trial) { trial.f } else { f64::INFINITY });
            continue;
        }
        let dt = dot(&trial.g, dir);
        if dt.abs() <= -C2 * d0 {
            return Some(trial);
        }
        if dt * (hi.0 - lo.0) >= 0.0 {
            hi = (lo.0, lo.1);
        }
        lo = (alpha, trial.f, dt);
        best = Some(trial);
    }
    best
}

/// Maximises `objective` from `start` with BFGS.
pub fn maximize<O: Objective + ?Sized>(objective: &O, start: &[f64], settings: &Settings) -> Result<Maximum> {
    let n = start.len();
    let mut m = Minimand {
        objective,
        evaluations: 0,
    };
    let mut cur = m.eval(start.to_vec());
    if !finite(&cur) {
        return Err(Error::NonFiniteStart);
    }
    let identity = |n: usize| {
        let mut h = vec![0.0; n * n];
        (0..n).for_each(|i| h[i * n + i] = 1.0);
        h
    };
    let seeded = |x: &[f64]| objective.initial_inverse_hessian(x).filter(|h| h.len() == n * n && h.iter().all(|v| v.is_finite()));
    let (mut hinv, mut fresh) = match seeded(&cur.x) {
        Some(h) => (h, false),
        None => (identity(n), true),
    };
    // restarts since the last successful step: first reseeded, then identity
    let mut restarts = 0;
    let mut iterations = 0;
    let finish = |p: Point, it: usize, ev: usize, converged: bool, reason: StopReason| Maximum {
        x: p.x,
        value: -p.f,
        gradient: p.g.into_iter().map(|v| -v).collect(),
        iterations: it,
        evaluations: ev,
        converged,
        reason,
    };

    loop {
        if relative_gradient(&cur.x, &cur.g, cur.f) < settings.gradient_tolerance {
            return Ok(finish(cur, iterations, m.evaluations, true, StopReason::Gradient));
        }
        if iterations >= settings.max_iterations {
            return Ok(finish(cur, iterations, m.evaluations, false, StopReason::MaxIterations));
        }
        let dir: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| hinv[i * n + j] * cur.g[j]).sum::<f64>())
            .collect();
        let first_step = if fresh {
            let norm = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (1.0 / norm.max(1e-300)).min(1.0)
        } else {
            1.0
        };
        let Some(next) = line_search(&mut m, &cur, &dir, first_step) else {
            if fresh {
                return Ok(finish(cur, iterations, m.evaluations, false, StopReason::LineSearch));
            }
            restarts += 1;
            match seeded(&cur.x).filter(|_| restarts == 1) {
                Some(h) => hinv = h,
                None => {
                    hinv = identity(n);
                    fresh = true;
                }
            }
            continue;
        };
        iterations += 1;
        restarts = 0;
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let rel_step = s
            .iter()
            .zip(&next.x)
            .map(|(si, xi)| si.abs() / xi.abs().max(1.0))
            .fold(0.0, f64::max);
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                hinv.iter_mut().for_each(|h| *h = 0.0);
                (0..n).for_each(|i| hinv[i * n + i] = scale);
            }
            bfgs_update(&mut hinv, &s, &y, sy);
            fresh = false;
        }
        cur = next;
        if rel_step < settings.step_tolerance {
            let converged = relative_gradient(&cur.x, &cur.g, cur.f) < settings.gradient_tolerance.sqrt();
            return Ok(finish(cur, iterations, m.evaluations, converged, StopReason::Step));
        }
    }
}

// H <- (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        center: Vec<f64>,
        scales: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn value(&self, x: &[f64]) -> f64 {
            -x.iter()
                .zip(&self.center)
                .zip(&self.scales)
                .map(|((a, c), s)| s * (a - c).powi(2))
                .sum::<f64>()
                - 0.3 * (x[0] - self.center[0]) * (x[1] - self.center[1])
        }
    }

    #[test]
    fn recovers_quadratic_optimum() {
        let q = Quadratic {
            center: vec![1.5, -2.0, 0.25, 40.0],
            scales: vec![1.0, 3.0, 0.5, 10.0],
        };
        let settings = Settings {
            gradient_tolerance: 1e-10,
            ..Settings::default()
        };
        let m = maximize(&q, &[0.0; 4], &settings).unwrap();
        assert!(m.converged, "{m:?}");
        for (x, c) in m.x.iter().zip(&q.center) {
            assert!((x - c).abs() < 1e-8, "{x} vs {c}");
        }
    }

    struct Rosenbrock;
    impl Objective for Rosenbrock {
        fn value(&self, x: &[f64]) -> f64 {
            -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
        }
        fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
            let g0 = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            let g1 = 200.0 * (x[1] - x[0] * x[0]);
            (self.value(x), vec![-g0, -g1])
        }
    }

    #[test]
    fn solves_rosenbrock_with_analytic_gradient() {
        let m = maximize(&Rosenbrock, &[-1.2, 1.0], &Settings::default()).unwrap();
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
    }

    struct Unbounded;
    impl Objective for Unbounded {
        fn value(&self, x: &[f64]) -> f64 {
            x[0]
        }
    }

    #[test]
    fn unbounded_objective_is_not_reported_converged() {
        let settings = Settings {
            max_iterations: 5,
            ..Settings::default()
        };
        let m = maximize(&Unbounded, &[0.0], &settings).unwrap();
        assert!(!m.converged);
    }

    struct Nan;
    impl Objective for Nan {
        fn value(&self, _: &[f64]) -> f64 {
            f64::NAN
        }
    }

    #[test]
    fn non_finite_start_is_an_error() {
        assert!(matches!(maximize(&Nan, &[0.0], &Settings::default()), Err(Error::NonFiniteStart)));
    }

    #[test]
    fn central_differences_on_cubic() {
        let g = central_difference_gradient(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, -1.0], 1e-6);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }
}
