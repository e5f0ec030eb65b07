//! Covariance kernels over functional covariates, Gram-matrix assembly and
//! analytic gradients with respect to the log-scale hyper-parameters.
//!
//! Four families are supported:
//!
//! * `SeLinear` – squared exponential with per-dimension inverse squared
//!   length-scales `w_q`, signal variance `v` and a non-stationary linear
//!   term `a Σ x_q x'_q`. Parameters `(log w_1..log w_Q, log v, log a)`.
//! * `Matern32` – `σ² (1 + √3 r/ℓ) exp(-√3 r/ℓ)`. Parameters `(log ℓ, log σ²)`.
//! * `RationalQuadratic` – `σ² (1 + r²/(2αℓ²))^(-α)`. Parameters
//!   `(log ℓ, log σ², log α)`.
//! * `PiecewisePoly2` – the compactly supported piecewise polynomial with
//!   `q = 2`, `σ² (1-r/ℓ)_+^(j+2) ((j²+4j+3)(r/ℓ)² + (3j+6)(r/ℓ) + 3)/3`,
//!   `j = ⌊Q/2⌋ + 3`. Parameters `(log ℓ, log σ²)`.
//!
//! `r` is the Euclidean distance between covariate vectors.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    SeLinear,
    Matern32,
    RationalQuadratic,
    PiecewisePoly2,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [
        KernelKind::SeLinear,
        KernelKind::Matern32,
        KernelKind::RationalQuadratic,
        KernelKind::PiecewisePoly2,
    ];

    /// Number of hyper-parameters for covariate dimension `q`.
    pub fn n_params(self, q: usize) -> usize {
        match self {
            KernelKind::SeLinear => q + 2,
            KernelKind::Matern32 | KernelKind::PiecewisePoly2 => 2,
            KernelKind::RationalQuadratic => 3,
        }
    }

    pub fn param_names(self, q: usize) -> Vec<String> {
        match self {
            KernelKind::SeLinear => {
                let mut v: Vec<String> = (1..=q).map(|i| format!("w{i}")).collect();
                v.push("v1".into());
                v.push("a1".into());
                v
            }
            KernelKind::Matern32 | KernelKind::PiecewisePoly2 => {
                vec!["lengthscale".into(), "variance".into()]
            }
            KernelKind::RationalQuadratic => {
                vec!["lengthscale".into(), "variance".into(), "alpha".into()]
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::SeLinear => "se_linear",
            KernelKind::Matern32 => "matern32",
            KernelKind::RationalQuadratic => "rq",
            KernelKind::PiecewisePoly2 => "pp2",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "se_linear" | "se" => Ok(KernelKind::SeLinear),
            "matern32" | "mc" => Ok(KernelKind::Matern32),
            "rq" | "rational_quadratic" => Ok(KernelKind::RationalQuadratic),
            "pp2" | "pp" | "piecewise_poly2" => Ok(KernelKind::PiecewisePoly2),
            other => Err(Error::InvalidParameter(format!("unknown kernel kind '{other}'"))),
        }
    }
}

/// Kernel family plus hyper-parameters stored on the log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    kind: KernelKind,
    input_dim: usize,
    log_params: Vec<f64>,
}

impl KernelParams {
    pub fn new(kind: KernelKind, input_dim: usize, log_params: Vec<f64>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Dimension("kernel input dimension must be >= 1".into()));
        }
        let expected = kind.n_params(input_dim);
        if log_params.len() != expected {
            return Err(Error::Dimension(format!(
                "{kind} with Q={input_dim} takes {expected} parameters, got {}",
                log_params.len()
            )));
        }
        if let Some(bad) = log_params.iter().find(|p| !p.exp().is_finite() || p.exp() <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "log-parameter {bad} does not map to a positive finite value"
            )));
        }
        Ok(Self {
            kind,
            input_dim,
            log_params,
        })
    }

    /// Builds from natural-scale (positive) values.
    pub fn from_natural(kind: KernelKind, input_dim: usize, values: &[f64]) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel parameter {bad} must be positive and finite"
            )));
        }
        Self::new(kind, input_dim, values.iter().map(|v| v.ln()).collect())
    }

    /// SE + linear kernel with one input.
    pub fn se_linear_1d(w: f64, v: f64, a: f64) -> Self {
        Self::from_natural(KernelKind::SeLinear, 1, &[w, v, a]).expect("positive parameters")
    }

    /// Unit hyper-parameters (all log-params zero).
    pub fn unit(kind: KernelKind, input_dim: usize) -> Self {
        Self::new(kind, input_dim, vec![0.0; kind.n_params(input_dim)]).expect("valid dims")
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn log_params(&self) -> &[f64] {
        &self.log_params
    }

    pub fn natural(&self) -> Vec<f64> {
        self.log_params.iter().map(|p| p.exp()).collect()
    }

    pub fn with_log_params(&self, log_params: Vec<f64>) -> Result<Self> {
        Self::new(self.kind, self.input_dim, log_params)
    }

    /// Prior variance `k(x, x)`.
    pub fn variance_at(&self, x: &[f64]) -> f64 {
        self.eval_unchecked(x, x)
    }

    pub(crate) fn eval_unchecked(&self, xi: &[f64], xj: &[f64]) -> f64 {
        let p = &self.log_params;
        match self.kind {
            KernelKind::SeLinear => {
                let q = self.input_dim;
                let mut quad = 0.0;
                let mut lin = 0.0;
                for d in 0..q {
                    let diff = xi[d] - xj[d];
                    quad += p[d].exp() * diff * diff;
                    lin += xi[d] * xj[d];
                }
                p[q].exp() * (-0.5 * quad).exp() + p[q + 1].exp() * lin
            }
            KernelKind::Matern32 => {
                let s = 3f64.sqrt() * dist(xi, xj) / p[0].exp();
                p[1].exp() * (1.0 + s) * (-s).exp()
            }
            KernelKind::RationalQuadratic => {
                let r2 = dist2(xi, xj);
                let (l2, alpha) = ((2.0 * p[0]).exp(), p[2].exp());
                p[1].exp() * (1.0 + r2 / (2.0 * alpha * l2)).powf(-alpha)
            }
            KernelKind::PiecewisePoly2 => {
                let r = dist(xi, xj) / p[0].exp();
                p[1].exp() * pp2_shape(r, pp2_j(self.input_dim))
            }
        }
    }

    /// Gradient of `k(xi, xj)` with respect to each log-parameter.
    fn grad_unchecked(&self, xi: &[f64], xj: &[f64], out: &mut [f64]) {
        let p = &self.log_params;
        match self.kind {
            KernelKind::SeLinear => {
                let q = self.input_dim;
                let mut quad = 0.0;
                let mut lin = 0.0;
                for d in 0..q {
                    let diff = xi[d] - xj[d];
                    quad += p[d].exp() * diff * diff;
                    lin += xi[d] * xj[d];
                }
                let se = p[q].exp() * (-0.5 * quad).exp();
                for d in 0..q {
                    let diff = xi[d] - xj[d];
                    out[d] = -0.5 * se * p[d].exp() * diff * diff;
                }
                out[q] = se;
                out[q + 1] = p[q + 1].exp() * lin;
            }
            KernelKind::Matern32 => {
                let s = 3f64.sqrt() * dist(xi, xj) / p[0].exp();
                let sig2 = p[1].exp();
                let e = (-s).exp();
                out[0] = sig2 * s * s * e;
                out[1] = sig2 * (1.0 + s) * e;
            }
            KernelKind::RationalQuadratic => {
                let r2 = dist2(xi, xj);
                let (l2, alpha, sig2) = ((2.0 * p[0]).exp(), p[2].exp(), p[1].exp());
                let base = 1.0 + r2 / (2.0 * alpha * l2);
                let k = sig2 * base.powf(-alpha);
                out[0] = sig2 * base.powf(-alpha - 1.0) * r2 / l2;
                out[1] = k;
                out[2] = k * (-alpha * base.ln() + r2 / (2.0 * l2 * base));
            }
            KernelKind::PiecewisePoly2 => {
                let r = dist(xi, xj) / p[0].exp();
                let j = pp2_j(self.input_dim);
                let sig2 = p[1].exp();
                out[0] = -sig2 * pp2_shape_deriv(r, j) * r;
                out[1] = sig2 * pp2_shape(r, j);
            }
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

fn pp2_j(q: usize) -> f64 {
    (q / 2) as f64 + 3.0
}

fn pp2_shape(r: f64, j: f64) -> f64 {
    if r >= 1.0 {
        return 0.0;
    }
    let poly = (j * j + 4.0 * j + 3.0) * r * r + (3.0 * j + 6.0) * r + 3.0;
    (1.0 - r).powf(j + 2.0) * poly / 3.0
}

fn pp2_shape_deriv(r: f64, j: f64) -> f64 {
    if r >= 1.0 {
        return 0.0;
    }
    let poly = (j * j + 4.0 * j + 3.0) * r * r + (3.0 * j + 6.0) * r + 3.0;
    let dpoly = 2.0 * (j * j + 4.0 * j + 3.0) * r + (3.0 * j + 6.0);
    (-(j + 2.0) * (1.0 - r).powf(j + 1.0) * poly + (1.0 - r).powf(j + 2.0) * dpoly) / 3.0
}

fn check_dim(params: &KernelParams, len: usize, what: &str) -> Result<()> {
    if len != params.input_dim {
        return Err(Error::Dimension(format!(
            "{what} has {len} covariates, kernel expects {}",
            params.input_dim
        )));
    }
    Ok(())
}

/// `k(x_i, x_j; θ)`.
pub fn kernel_eval(xi: &[f64], xj: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim(params, xi.len(), "x_i")?;
    check_dim(params, xj.len(), "x_j")?;
    Ok(params.eval_unchecked(xi, xj))
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Gram matrix with `jitter` added to the diagonal. Rows of `x` are inputs.
pub fn gram_matrix(x: &DMatrix<f64>, params: &KernelParams, jitter: f64) -> Result<DMatrix<f64>> {
    check_dim(params, x.ncols(), "input matrix")?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite covariate in gram input".into()));
    }
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = params.eval_unchecked(&rows[i], &rows[j]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
        c[(i, i)] += jitter;
    }
    Ok(c)
}

/// `∂C/∂(log θ_k)` for every hyper-parameter, without jitter.
pub fn gram_grad(x: &DMatrix<f64>, params: &KernelParams) -> Result<Vec<DMatrix<f64>>> {
    check_dim(params, x.ncols(), "input matrix")?;
    let n = x.nrows();
    let np = params.log_params.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    let mut out = vec![DMatrix::zeros(n, n); np];
    let mut g = vec![0.0; np];
    for i in 0..n {
        for j in 0..=i {
            params.grad_unchecked(&rows[i], &rows[j], &mut g);
            for (k, m) in out.iter_mut().enumerate() {
                m[(i, j)] = g[k];
                m[(j, i)] = g[k];
            }
        }
    }
    Ok(out)
}

/// Covariances between training inputs and a test input (no jitter).
pub fn cross_cov(x_train: &DMatrix<f64>, x_star: &[f64], params: &KernelParams) -> Result<DVector<f64>> {
    check_dim(params, x_star.len(), "x_star")?;
    if x_train.nrows() > 0 {
        check_dim(params, x_train.ncols(), "training inputs")?;
    }
    Ok(DVector::from_iterator(
        x_train.nrows(),
        (0..x_train.nrows()).map(|i| params.eval_unchecked(&row(x_train, i), x_star)),
    ))
}
