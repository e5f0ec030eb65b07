//! Per-batch latent posterior computations.
//!
//! For one batch with responses `z`, mean `μ` and prior covariance `C`, the
//! latent deviation `τ ~ N(0, C)` enters the likelihood through
//! `η = μ + τ`. The log joint density is
//!
//! ```text
//! Ψ(τ) = Σ log p(z_i | μ_i + τ_i) - N/2 log 2π - ½ log|C| - ½ τᵀ C⁻¹ τ
//! ```
//!
//! Two routes reach its maximizer:
//!
//! * [`find_mode_newton`] iterates `τ ← τ - (C W - I)⁻¹ (C V - τ)` with
//!   `V`, `W` the first and second derivatives of the data term, halving the
//!   step whenever `Ψ` would decrease.
//! * [`gaussian_approx_fisher`] repeatedly solves `(C⁻¹ + D) τ = a` with
//!   `a`, `D` from a second-order expansion of the data term at the previous
//!   iterate, using the symmetric matrix `B = I + D^½ C D^½` so that `C` is
//!   never inverted.
//!
//! [`laplace_log_marginal`] and [`nested_log_marginal`] turn either mode
//! into an approximate `log p(z | μ, C)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::family::{ObservationFamily, MIN_CURVATURE};
use crate::linalg::{chol_logdet, cholesky_with_jitter, solve_lower, sup_norm, DEFAULT_JITTER, MAX_JITTER};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gradient sup-norm, per unit of site curvature, above which a stalled line
/// search counts as failure.
const STALL_GRAD: f64 = 1e-5;

/// Stall threshold scaled by the largest site curvature: sharp likelihoods
/// (tiny ordinal noise) carry gradients that are large in absolute terms at
/// working precision.
fn stall_limit(d2: &DVector<f64>) -> f64 {
    STALL_GRAD * d2.iter().fold(1.0f64, |m, v| m.max(-v))
}

/// Per-site log-likelihood terms as a function of the latent deviation.
pub trait SiteLikelihood {
    fn len(&self) -> usize;

    /// `(log p, d/dτ log p, d²/dτ² log p)` for site `i` at `τ_i = tau`.
    fn site(&self, i: usize, tau: f64) -> (f64, f64, f64);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Observed responses with a fixed mean offset.
#[derive(Clone, Copy)]
pub struct ObservedSites<'a> {
    pub family: &'a ObservationFamily,
    pub z: &'a [f64],
    pub mu: &'a [f64],
}

impl SiteLikelihood for ObservedSites<'_> {
    fn len(&self) -> usize {
        self.z.len()
    }

    fn site(&self, i: usize, tau: f64) -> (f64, f64, f64) {
        self.family.terms(self.z[i], self.mu[i] + tau)
    }
}

/// Adds no information: a flat likelihood. The posterior is then the prior.
pub struct FlatSites(pub usize);

impl SiteLikelihood for FlatSites {
    fn len(&self) -> usize {
        self.0
    }

    fn site(&self, _i: usize, _tau: f64) -> (f64, f64, f64) {
        (0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InferenceOptions {
    /// Convergence tolerance (gradient sup-norm for Newton, step sup-norm
    /// for Fisher scoring).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Gaussian approximation `N(τ̃, (C⁻¹ + D)⁻¹)` to the latent full
/// conditional of one batch.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    /// `τ̃`.
    pub mode: DVector<f64>,
    /// `C⁻¹ τ̃`.
    pub alpha: DVector<f64>,
    /// Diagonal of `D`: negative curvature of the data term at the mode,
    /// clamped below at [`MIN_CURVATURE`].
    pub neg_hessian_diag: DVector<f64>,
    /// Prior covariance actually used, including any escalated jitter.
    pub gram: DMatrix<f64>,
    /// Cholesky factor of `I + D^½ C D^½`, which carries `C⁻¹ + D`.
    pub chol_b: Cholesky<f64, Dyn>,
    /// Diagonal jitter added on top of the supplied `C` when `B` failed to
    /// factorize (usually 0).
    pub jitter_added: f64,
    /// Approximate `log p(z | μ, C)`.
    pub log_marginal_contribution: f64,
    pub iterations: usize,
}

impl LatentPosterior {
    /// Rebuilds the factorization from stored summaries. `gram` must
    /// already include `jitter_added`.
    pub fn from_parts(
        gram: DMatrix<f64>,
        mode: DVector<f64>,
        alpha: DVector<f64>,
        neg_hessian_diag: DVector<f64>,
        jitter_added: f64,
        log_marginal_contribution: f64,
    ) -> Result<Self> {
        let n = mode.len();
        check_inputs(n, &gram)?;
        if alpha.len() != n || neg_hessian_diag.len() != n {
            return Err(Error::Dimension("posterior summary lengths differ".into()));
        }
        let s = neg_hessian_diag.map(f64::sqrt);
        let (chol_b, bumped) = factor_b(&gram, &s)?;
        if bumped.is_some() {
            return Err(Error::Conditioning { jitter: jitter_added });
        }
        Ok(Self {
            mode,
            alpha,
            neg_hessian_diag,
            gram,
            chol_b,
            jitter_added,
            log_marginal_contribution,
            iterations: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.mode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mode.is_empty()
    }

    /// `vᵀ (C⁻¹ + D)⁻¹ v`.
    pub fn posterior_quad(&self, v: &DVector<f64>) -> f64 {
        let cv = &self.gram * v;
        let s = self.neg_hessian_diag.map(f64::sqrt);
        let w = solve_lower(&self.chol_b, &s.component_mul(&cv));
        v.dot(&cv) - w.norm_squared()
    }

    /// Dense posterior covariance `(C⁻¹ + D)⁻¹ = C - C S B⁻¹ S C`.
    pub fn posterior_cov(&self) -> DMatrix<f64> {
        let n = self.len();
        let s = self.neg_hessian_diag.map(f64::sqrt);
        let mut sc = self.gram.clone();
        for i in 0..n {
            sc.row_mut(i).scale_mut(s[i]);
        }
        let w = self
            .chol_b
            .l_dirty()
            .solve_lower_triangular(&sc)
            .expect("positive diagonal");
        &self.gram - w.transpose() * w
    }

    /// `log|C⁻¹ + D| + log|C| = log|B|`.
    pub fn log_det_b(&self) -> f64 {
        chol_logdet(&self.chol_b)
    }
}

fn check_inputs(n: usize, c: &DMatrix<f64>) -> Result<()> {
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::Dimension(format!(
            "covariance is {}x{}, expected {n}x{n}",
            c.nrows(),
            c.ncols()
        )));
    }
    Ok(())
}

fn eval_sites<S: SiteLikelihood + ?Sized>(sites: &S, tau: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
    let n = sites.len();
    let mut f = 0.0;
    let mut d1 = DVector::zeros(n);
    let mut d2 = DVector::zeros(n);
    for i in 0..n {
        let (a, b, c) = sites.site(i, tau[i]);
        f += a;
        d1[i] = b;
        d2[i] = c;
    }
    (f, d1, d2)
}

fn curvature(d2: &DVector<f64>) -> DVector<f64> {
    d2.map(|v| (-v).max(MIN_CURVATURE))
}

/// Cholesky of `B = I + S C S`, escalating jitter on `C` if needed. Returns
/// the factor and the (possibly modified) `C`.
fn factor_b(c: &DMatrix<f64>, s: &DVector<f64>) -> Result<(Cholesky<f64, Dyn>, Option<(DMatrix<f64>, f64)>)> {
    let n = c.nrows();
    let build = |c: &DMatrix<f64>| {
        let mut b = DMatrix::from_fn(n, n, |i, j| s[i] * c[(i, j)] * s[j]);
        for i in 0..n {
            b[(i, i)] += 1.0;
        }
        b
    };
    if let Some(ch) = Cholesky::new(build(c)) {
        return Ok((ch, None));
    }
    let mut j = DEFAULT_JITTER;
    loop {
        let mut cj = c.clone();
        for i in 0..n {
            cj[(i, i)] += j;
        }
        if let Some(ch) = Cholesky::new(build(&cj)) {
            return Ok((ch, Some((cj, j))));
        }
        if j >= MAX_JITTER {
            return Err(Error::Conditioning { jitter: j });
        }
        j *= 10.0;
    }
}

/// Newton–Raphson maximization of `Ψ` (see module docs). Returns the mode.
pub fn find_mode_newton(
    z: &[f64],
    mu: &[f64],
    c: &DMatrix<f64>,
    family: &ObservationFamily,
) -> Result<DVector<f64>> {
    check_lengths(z, mu)?;
    let sites = ObservedSites { family, z, mu };
    Ok(newton_mode(&sites, c, &InferenceOptions::default())?.mode)
}

pub(crate) struct NewtonResult {
    pub mode: DVector<f64>,
    /// `Ψ(τ̂)` including the normalizing constants.
    pub psi: f64,
    /// `log|C|` of the (jittered) prior covariance.
    pub log_det_c: f64,
    pub gram: DMatrix<f64>,
}

/// Newton iteration directly in the `τ` parameterization.
pub(crate) fn newton_mode<S: SiteLikelihood + ?Sized>(
    sites: &S,
    c: &DMatrix<f64>,
    opts: &InferenceOptions,
) -> Result<NewtonResult> {
    let n = sites.len();
    check_inputs(n, c)?;
    let fc = cholesky_with_jitter(c, 0.0)?;
    let gram = if fc.jitter > 0.0 {
        let mut g = c.clone();
        for i in 0..n {
            g[(i, i)] += fc.jitter;
        }
        g
    } else {
        c.clone()
    };
    let chol_c = fc.chol;
    let log_det_c = chol_logdet(&chol_c);
    let constant = -0.5 * n as f64 * LN_2PI - 0.5 * log_det_c;
    let psi_of = |tau: &DVector<f64>| -> (f64, DVector<f64>, DVector<f64>, DVector<f64>) {
        let (f, d1, d2) = eval_sites(sites, tau);
        let cinv_tau = chol_c.solve(tau);
        (f - 0.5 * tau.dot(&cinv_tau) + constant, d1, d2, cinv_tau)
    };

    let mut tau = DVector::zeros(n);
    let (mut psi, mut v, mut w, mut cinv_tau) = psi_of(&tau);
    for it in 0..opts.max_iter {
        let grad = &v - &cinv_tau;
        let gnorm = sup_norm(&grad);
        if gnorm < opts.tol {
            return Ok(NewtonResult {
                mode: tau,
                psi,
                log_det_c,
                gram,
            });
        }
        // step = (I - C W)⁻¹ (C V - τ), with W clamped to be negative
        let dneg = curvature(&w);
        let mut m = DMatrix::from_fn(n, n, |i, j| gram[(i, j)] * dneg[j]);
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        let rhs = &gram * &v - &tau;
        let step = m
            .lu()
            .solve(&rhs)
            .ok_or(Error::Conditioning { jitter: fc.jitter })?;
        let mut t = 1.0;
        loop {
            let cand = &tau + &step * t;
            let (p, v2, w2, ct) = psi_of(&cand);
            if p.is_finite() && p >= psi {
                tau = cand;
                psi = p;
                v = v2;
                w = w2;
                cinv_tau = ct;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                // no further ascent at working precision; accept only if
                // we are numerically stationary
                if gnorm > stall_limit(&w) {
                    return Err(Error::Convergence {
                        iterations: it + 1,
                        grad_norm: gnorm,
                    });
                }
                return Ok(NewtonResult {
                    mode: tau,
                    psi,
                    log_det_c,
                    gram,
                });
            }
        }
    }
    // sharp sites leave a gradient floor above `tol`; same rule as a stall
    let gnorm = sup_norm(&(&v - &cinv_tau));
    if gnorm < opts.tol.max(stall_limit(&w)) {
        return Ok(NewtonResult {
            mode: tau,
            psi,
            log_det_c,
            gram,
        });
    }
    Err(Error::Convergence {
        iterations: opts.max_iter,
        grad_norm: gnorm,
    })
}

/// Laplace approximation `Ψ(τ̂) + N/2 log 2π - ½ log|C⁻¹ + K|` at the Newton
/// mode, `K` the negative Hessian of the data term there.
pub fn laplace_log_marginal(
    z: &[f64],
    mu: &[f64],
    c: &DMatrix<f64>,
    family: &ObservationFamily,
) -> Result<f64> {
    check_lengths(z, mu)?;
    let sites = ObservedSites { family, z, mu };
    laplace_sites(&sites, c, &InferenceOptions::default())
}

pub(crate) fn laplace_sites<S: SiteLikelihood + ?Sized>(
    sites: &S,
    c: &DMatrix<f64>,
    opts: &InferenceOptions,
) -> Result<f64> {
    let n = sites.len();
    let nr = newton_mode(sites, c, opts)?;
    let (_, _, d2) = eval_sites(sites, &nr.mode);
    let s = curvature(&d2).map(f64::sqrt);
    // log|C⁻¹ + K| = log|I + S C S| - log|C|
    let (chol_b, _) = factor_b(&nr.gram, &s)?;
    let log_det = chol_logdet(&chol_b) - nr.log_det_c;
    Ok(nr.psi + 0.5 * n as f64 * LN_2PI - 0.5 * log_det)
}

/// Fisher-scoring Gaussian approximation to the latent full conditional.
pub fn gaussian_approx_fisher(
    z: &[f64],
    mu: &[f64],
    c: &DMatrix<f64>,
    family: &ObservationFamily,
) -> Result<LatentPosterior> {
    check_lengths(z, mu)?;
    let sites = ObservedSites { family, z, mu };
    fisher_sites(&sites, c, &InferenceOptions::default(), None)
}

/// Fisher scoring for arbitrary sites, optionally warm-started from a
/// previous `α = C⁻¹ τ`.
pub fn fisher_sites<S: SiteLikelihood + ?Sized>(
    sites: &S,
    c: &DMatrix<f64>,
    opts: &InferenceOptions,
    warm_alpha: Option<&DVector<f64>>,
) -> Result<LatentPosterior> {
    let n = sites.len();
    check_inputs(n, c)?;
    let mut gram = c.clone();
    let mut jitter_added = 0.0;
    let (mut alpha, mut tau) = match warm_alpha {
        Some(a) if a.len() == n => (a.clone(), &gram * a),
        _ => (DVector::zeros(n), DVector::zeros(n)),
    };
    let (mut f, mut d1, mut d2) = eval_sites(sites, &tau);
    let mut obj = f - 0.5 * tau.dot(&alpha);
    let mut iterations = 0;
    let mut converged = n == 0;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let d = curvature(&d2);
        let s = d.map(f64::sqrt);
        // (C⁻¹ + D) τ_new = a with a = V + D τ; τ_new = C α_new and
        // α_new = a - S B⁻¹ S C a
        let a = &d1 + d.component_mul(&tau);
        let (chol_b, bumped) = factor_b(&gram, &s)?;
        if let Some((g, j)) = bumped {
            gram = g;
            jitter_added += j;
        }
        let ca = &gram * &a;
        let corr = chol_b.solve(&s.component_mul(&ca));
        let alpha_new = &a - s.component_mul(&corr);
        let dir = &alpha_new - &alpha;
        let last_step: f64;
        let mut t = 1.0;
        loop {
            let alpha_try = &alpha + &dir * t;
            let tau_try = &gram * &alpha_try;
            let (f2, d1b, d2b) = eval_sites(sites, &tau_try);
            let obj2 = f2 - 0.5 * tau_try.dot(&alpha_try);
            if obj2.is_finite() && (obj2 >= obj || t < 1e-10) {
                last_step = sup_norm(&(&tau_try - &tau));
                alpha = alpha_try;
                tau = tau_try;
                f = f2;
                d1 = d1b;
                d2 = d2b;
                obj = obj2;
                break;
            }
            t *= 0.5;
        }
        if last_step < opts.tol {
            // a collapsed line search also gives a tiny step
            let g = sup_norm(&(&d1 - &alpha));
            if g > stall_limit(&d2) {
                return Err(Error::Convergence {
                    iterations,
                    grad_norm: g,
                });
            }
            converged = true;
        }
    }
    if !converged {
        let g = sup_norm(&(&d1 - &alpha));
        if g > stall_limit(&d2) {
            return Err(Error::Convergence { iterations, grad_norm: g });
        }
    }
    let d = curvature(&d2);
    let s = d.map(f64::sqrt);
    let (chol_b, bumped) = factor_b(&gram, &s)?;
    if let Some((g, j)) = bumped {
        gram = g;
        jitter_added += j;
        tau = &gram * &alpha;
        let (f2, _, _) = eval_sites(sites, &tau);
        f = f2;
    }
    // log p(τ̃, z) - log p_G(τ̃ | z) = Σ g - ½ τ̃ᵀ C⁻¹ τ̃ - ½ log|B|
    let log_marginal = f - 0.5 * tau.dot(&alpha) - 0.5 * chol_logdet(&chol_b);
    Ok(LatentPosterior {
        mode: tau,
        alpha,
        neg_hessian_diag: d,
        gram,
        chol_b,
        jitter_added,
        log_marginal_contribution: log_marginal,
        iterations,
    })
}

/// Nested (Gaussian-approximation) marginal
/// `log p(τ̃, z) - log p̃_G(τ̃ | z)` at the Fisher-scoring fixed point.
pub fn nested_log_marginal(
    z: &[f64],
    mu: &[f64],
    c: &DMatrix<f64>,
    family: &ObservationFamily,
) -> Result<f64> {
    Ok(gaussian_approx_fisher(z, mu, c, family)?.log_marginal_contribution)
}

fn check_lengths(z: &[f64], mu: &[f64]) -> Result<()> {
    if z.len() != mu.len() {
        return Err(Error::Dimension(format!(
            "{} responses but {} mean values",
            z.len(),
            mu.len()
        )));
    }
    Ok(())
}

/// Exact `log N(z; μ, C + σ² I)`, the marginal for the Gaussian family.
pub fn gaussian_log_marginal(z: &[f64], mu: &[f64], c: &DMatrix<f64>, noise_var: f64) -> Result<f64> {
    check_lengths(z, mu)?;
    let n = z.len();
    check_inputs(n, c)?;
    let mut k = c.clone();
    for i in 0..n {
        k[(i, i)] += noise_var;
    }
    let ch = crate::linalg::cholesky(k)?;
    let r = DVector::from_iterator(n, z.iter().zip(mu).map(|(a, b)| a - b));
    let w = solve_lower(&ch, &r);
    Ok(-0.5 * w.norm_squared() - 0.5 * chol_logdet(&ch) - 0.5 * n as f64 * LN_2PI)
}
