//! Limited-memory BFGS minimization with a backtracking Armijo line search,
//! plus central finite-difference gradients.

use std::collections::VecDeque;

use nalgebra::DVector;

/// Something to minimize.
pub trait Objective {
    fn value(&mut self, x: &DVector<f64>) -> f64;

    /// Gradient at `x`; `fx` is `value(x)`, already computed.
    fn gradient(&mut self, x: &DVector<f64>, fx: f64) -> DVector<f64>;

    /// Checked once per iteration; `true` stops the run (evaluation budget).
    fn exhausted(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease of the value falls below this.
    pub f_rel_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iter: 200,
            grad_tol: 1e-5,
            f_rel_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

pub fn minimize<O: Objective>(obj: &mut O, x0: DVector<f64>, opts: &LbfgsOptions) -> LbfgsResult {
    let mut x = x0;
    let mut f = obj.value(&x);
    let mut g = obj.gradient(&x, f);
    let mut hist: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut small_steps = 0;
    let mut trace = vec![f];
    for it in 0..opts.max_iter {
        let gnorm = g.amax();
        if gnorm < opts.grad_tol {
            return LbfgsResult { x, value: f, grad_norm: gnorm, iterations: it, converged: true, trace };
        }
        if obj.exhausted() {
            return LbfgsResult { x, value: f, grad_norm: gnorm, iterations: it, converged: false, trace };
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            q *= s.dot(y) / y.dot(y);
        } else {
            // first step: unit-ish length
            q *= 1.0 / gnorm.max(1.0);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = -&g / gnorm.max(1.0);
            slope = g.dot(&dir);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + &dir * t;
            let fnew = obj.value(&xn);
            if fnew.is_finite() && fnew <= f + 1e-4 * t * slope {
                accepted = Some((xn, fnew));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            return LbfgsResult { x, value: f, grad_norm: gnorm, iterations: it, converged: false, trace };
        };
        let gn = obj.gradient(&xn, fnew);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if hist.len() == opts.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let rel = (f - fnew).abs() / f.abs().max(1.0);
        x = xn;
        f = fnew;
        g = gn;
        trace.push(f);
        if rel < opts.f_rel_tol {
            small_steps += 1;
            if small_steps >= 2 {
                return LbfgsResult { x, value: f, grad_norm: g.amax(), iterations: it + 1, converged: true, trace };
            }
        } else {
            small_steps = 0;
        }
    }
    let gnorm = g.amax();
    LbfgsResult { x, value: f, grad_norm: gnorm, iterations: opts.max_iter, converged: gnorm < opts.grad_tol, trace }
}

/// Central-difference gradient with absolute step `h`.
pub fn central_diff<F: FnMut(&DVector<f64>) -> f64>(x: &DVector<f64>, h: f64, mut f: F) -> DVector<f64> {
    let mut xp = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        let xi = x[i];
        xp[i] = xi + h;
        let a = f(&xp);
        xp[i] = xi - h;
        let b = f(&xp);
        xp[i] = xi;
        (a - b) / (2.0 * h)
    })
}
