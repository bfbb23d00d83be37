//! Unconstrained minimization: BFGS with a backtracking line search, and a
//! Nelder-Mead fallback for objectives without usable gradients.
//!
//! The BFGS direction is capped in norm so that a single line search cannot
//! teleport the iterate across the scale of the problem; objectives signal
//! overflow by returning a non-finite value, which the line search treats as
//! an automatic rejection.

use crate::linalg::{dot, norm2, norm_inf, Matrix};

/// Objective returning the value and its gradient.
pub trait Objective {
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>);
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Objective for F {
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTol,
    FunctionStationary,
    MaxIters,
    LineSearchFailed,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub reason: StopReason,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iters: usize,
    pub gradient_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iters: 500, gradient_tol: 1e-8 }
    }
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
/// Relative function improvement below this for three consecutive accepted
/// steps counts as stationarity at machine precision.
const STALL_REL: f64 = 1e-13;

struct Probe {
    step: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

fn probe<O: Objective + ?Sized>(obj: &O, x: &[f64], d: &[f64], step: f64) -> Probe {
    let xn: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + step * di).collect();
    let (f, g) = obj.eval(&xn);
    Probe { step, x: xn, f, g }
}

/// Strong-Wolfe line search (bracket and zoom). A non-finite trial value is
/// treated as violating the sufficient-decrease condition, so the search
/// backs away from overflow regions automatically.
fn wolfe_search<O: Objective + ?Sized>(
    obj: &O,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
) -> Option<Probe> {
    let slope0 = dot(d, g0);
    if slope0 >= 0.0 {
        return None;
    }
    let armijo = |p: &Probe| p.f.is_finite() && p.f <= f0 + WOLFE_C1 * p.step * slope0;

    let zoom = |mut lo: Probe, mut hi_step: f64| -> Option<Probe> {
        for _ in 0..40 {
            let mid = 0.5 * (lo.step + hi_step);
            let p = probe(obj, x, d, mid);
            if !armijo(&p) || p.f >= lo.f {
                hi_step = mid;
            } else {
                let slope = dot(d, &p.g);
                if slope.abs() <= -WOLFE_C2 * slope0 {
                    return Some(p);
                }
                if slope * (hi_step - lo.step) >= 0.0 {
                    hi_step = lo.step;
                }
                lo = p;
            }
            if (hi_step - lo.step).abs() < 1e-16 * lo.step.abs().max(1.0) {
                break;
            }
        }
        if lo.step > 0.0 && armijo(&lo) {
            Some(lo)
        } else {
            None
        }
    };

    let mut prev: Option<Probe> = None;
    let mut step = alpha0;
    // Bounded bracketing: expansion stops after nine doublings and the last
    // sufficient-decrease point is taken, so a one-sided flat cannot pull a
    // single line search arbitrarily far out.
    for _ in 0..9 {
        let p = probe(obj, x, d, step);
        if !armijo(&p) || prev.as_ref().map_or(false, |q| p.f >= q.f) {
            let lo = match prev {
                Some(q) => q,
                None => Probe { step: 0.0, x: x.to_vec(), f: f0, g: g0.to_vec() },
            };
            return zoom(lo, p.step);
        }
        let slope = dot(d, &p.g);
        if slope.abs() <= -WOLFE_C2 * slope0 {
            return Some(p);
        }
        if slope >= 0.0 {
            let hi = prev.unwrap_or(Probe { step: 0.0, x: x.to_vec(), f: f0, g: g0.to_vec() });
            return zoom(p, hi.step);
        }
        prev = Some(p);
        step *= 2.0;
    }
    prev
}

/// Backtracking Armijo fallback when the Wolfe search gives up.
fn backtrack<O: Objective + ?Sized>(
    obj: &O,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    d: &[f64],
    alpha0: f64,
) -> Option<Probe> {
    let slope0 = dot(d, g0);
    let mut step = alpha0;
    for _ in 0..60 {
        let p = probe(obj, x, d, step);
        if p.f.is_finite() && p.f <= f0 + WOLFE_C1 * p.step * slope0 {
            return Some(p);
        }
        step *= 0.5;
    }
    None
}

/// BFGS with a strong-Wolfe line search and scaled initial Hessian.
pub fn bfgs<O: Objective + ?Sized>(obj: &O, x0: &[f64], opts: &BfgsOptions) -> OptimOutcome {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = obj.eval(&x);
    let mut h = Matrix::identity(n);
    let mut stall = 0usize;
    let mut scaled_h = false;

    for it in 0..opts.max_iters {
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return OptimOutcome {
                x,
                value: f,
                gradient_norm: f64::NAN,
                iterations: it,
                converged: false,
                reason: StopReason::NonFinite,
            };
        }
        let gnorm = norm_inf(&g);
        if gnorm <= opts.gradient_tol {
            return OptimOutcome {
                x,
                value: f,
                gradient_norm: gnorm,
                iterations: it,
                converged: true,
                reason: StopReason::GradientTol,
            };
        }

        let mut d: Vec<f64> = h.matvec(&g).iter().map(|v| -v).collect();
        if dot(&d, &g) >= 0.0 {
            // Lost curvature information; restart from steepest descent.
            h = Matrix::identity(n);
            scaled_h = false;
            d = g.iter().map(|v| -v).collect();
        }
        // Until the inverse Hessian carries curvature information the raw
        // direction has gradient scale, not problem scale; start those line
        // searches at unit length.
        let alpha0 = if scaled_h { 1.0 } else { (1.0 / norm2(&d).max(1e-300)).min(1.0) };

        let found =
            wolfe_search(obj, &x, f, &g, &d, alpha0).or_else(|| backtrack(obj, &x, f, &g, &d, alpha0));
        let Some(p) = found else {
            return OptimOutcome {
                x,
                value: f,
                gradient_norm: gnorm,
                iterations: it,
                converged: false,
                reason: StopReason::LineSearchFailed,
            };
        };

        let s: Vec<f64> = d.iter().map(|di| di * p.step).collect();
        let yv: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let rel_impr = (f - p.f) / f.abs().max(1.0);
        x = p.x;
        f = p.f;
        g = p.g;
        if rel_impr < STALL_REL {
            stall += 1;
            if stall >= 3 {
                return OptimOutcome {
                    x,
                    value: f,
                    gradient_norm: norm_inf(&g),
                    iterations: it + 1,
                    converged: true,
                    reason: StopReason::FunctionStationary,
                };
            }
        } else {
            stall = 0;
        }

        let sy = dot(&s, &yv);
        if sy > 1e-10 * norm2(&s) * norm2(&yv) {
            if !scaled_h {
                // Scale the initial inverse Hessian to the first curvature
                // estimate before applying the update.
                let yy = dot(&yv, &yv);
                if yy > 0.0 {
                    let scale = sy / yy;
                    h = Matrix::identity(n);
                    for i in 0..n {
                        h[(i, i)] = scale;
                    }
                }
                scaled_h = true;
            }
            // h <- (I - rho s y') h (I - rho y s') + rho s s'
            let rho = 1.0 / sy;
            let mut v = Matrix::identity(n);
            for i in 0..n {
                for j in 0..n {
                    v[(i, j)] -= rho * s[i] * yv[j];
                }
            }
            let mut hnew = v.matmul(&h).matmul(&v.transpose());
            for i in 0..n {
                for j in 0..n {
                    hnew[(i, j)] += rho * s[i] * s[j];
                }
            }
            h = hnew;
        }
    }
    OptimOutcome {
        x,
        value: f,
        gradient_norm: norm_inf(&g),
        iterations: opts.max_iters,
        converged: false,
        reason: StopReason::MaxIters,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions { max_iters: 2000, f_tol: 1e-12, x_tol: 1e-10, initial_step: 0.5 }
    }
}

/// Nelder-Mead simplex search over the function value alone.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], opts: &NelderMeadOptions) -> OptimOutcome {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    simplex.push((x0.to_vec(), eval(x0)));
    for j in 0..n {
        let mut p = x0.to_vec();
        p[j] += opts.initial_step;
        let v = eval(&p);
        simplex.push((p, v));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    for it in 0..opts.max_iters {
        iterations = it;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let spread = simplex[n].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| {
                p.iter()
                    .zip(&simplex[0].0)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        if spread.abs() < opts.f_tol && size < opts.x_tol {
            return OptimOutcome {
                x: simplex[0].0.clone(),
                value: simplex[0].1,
                gradient_norm: f64::NAN,
                iterations,
                converged: true,
                reason: StopReason::FunctionStationary,
            };
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(p, _)| p[j]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst.0)
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let fr = eval(&reflect);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + gamma * (c - w))
                .collect();
            let fe = eval(&expand);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + rho * (w - c))
                .collect();
            let fc = eval(&contract);
            if fc < worst.1 {
                simplex[n] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = entry
                        .0
                        .iter()
                        .zip(&best)
                        .map(|(pi, bi)| bi + sigma * (pi - bi))
                        .collect();
                    let v = eval(&p);
                    *entry = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    OptimOutcome {
        x: simplex[0].0.clone(),
        value: simplex[0].1,
        gradient_norm: f64::NAN,
        iterations,
        converged: false,
        reason: StopReason::MaxIters,
    }
}
