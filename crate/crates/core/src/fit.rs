//! Empirical-Bayes fitting: B-spline mean coefficients, kernel
//! hyper-parameters and (ordinal) thresholds are chosen jointly by
//! maximizing the approximate marginal log-likelihood `Σ_m log p(Z_m | Θ)`.
//!
//! Parameters are packed into one flat vector
//! `[vec(B) (row-major, D×p), log θ, threshold encoding, log γ]`, and the
//! objective is maximized by L-BFGS with central finite-difference
//! gradients. Conditioning or convergence failures inside a batch turn into
//! a large penalty so the line search simply backs off.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::basis::{place_knots, KnotMethod, SplineBasis};
use crate::data::{Dataset, FunctionalBatch};
use crate::error::{Error, Result};
use crate::family::{decode_thresholds, encode_thresholds, ObservationFamily};
use crate::kernels::{gram_matrix, KernelKind, KernelParams};
use crate::latent::{fisher_sites, laplace_sites, InferenceOptions, LatentPosterior, ObservedSites};
use crate::linalg::{regret_term, DEFAULT_JITTER};
use crate::optim::{central_diff, minimize, LbfgsOptions, Objective};
use crate::special::norm_quantile;

/// Objective value reported for parameters where a batch fails.
pub const PENALTY: f64 = -1e10;

/// Finite-difference step on the flat parameter vector.
pub const FD_STEP: f64 = 1e-5;

/// Floor on random-effect variances.
pub const GAMMA_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Gaussian approximation at the Fisher-scoring fixed point.
    Nested,
    /// Laplace approximation at the Newton mode.
    Laplace,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Nested => "nested",
            ObjectiveKind::Laplace => "laplace",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nested" => Ok(ObjectiveKind::Nested),
            "laplace" => Ok(ObjectiveKind::Laplace),
            _ => Err(Error::InvalidParameter(format!("unknown objective {s:?} (nested|laplace)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasisDim {
    Fixed(usize),
    /// Choose by BIC over this grid.
    Auto(Vec<usize>),
}

impl BasisDim {
    pub fn default_grid() -> Self {
        BasisDim::Auto((4..=12).collect())
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    /// Observation model; for ordinal data its thresholds are the starting
    /// values (see `auto_thresholds`).
    pub family: ObservationFamily,
    /// Replace the ordinal starting thresholds by values derived from the
    /// empirical category frequencies.
    pub auto_thresholds: bool,
    pub kernel: KernelKind,
    /// Natural-scale starting hyper-parameters; data-driven when `None`.
    pub kernel_init: Option<Vec<f64>>,
    pub basis_dim: BasisDim,
    pub knots: KnotMethod,
    pub objective: ObjectiveKind,
    /// Budget of objective evaluations per optimizer run.
    pub max_evals: usize,
    /// Relative objective change at which the optimizer stops.
    pub tol: f64,
    /// Extra randomly perturbed starts.
    pub restarts: usize,
    pub seed: u64,
    pub jitter: f64,
    /// Center and scale each covariate column before kernel evaluation.
    pub standardize: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            family: ObservationFamily::BernoulliLogit,
            auto_thresholds: false,
            kernel: KernelKind::SeLinear,
            kernel_init: None,
            basis_dim: BasisDim::default_grid(),
            knots: KnotMethod::EqualSpaced,
            objective: ObjectiveKind::Nested,
            max_evals: 20_000,
            tol: 1e-7,
            restarts: 2,
            seed: 0,
            jitter: DEFAULT_JITTER,
            standardize: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if let BasisDim::Fixed(d) = self.basis_dim {
            if d < 4 {
                return Err(Error::InvalidParameter(format!("basis dimension must be >= 4, got {d}")));
            }
        }
        if let BasisDim::Auto(g) = &self.basis_dim {
            if g.is_empty() || g.iter().any(|&d| d < 4) {
                return Err(Error::InvalidParameter("basis grid must be non-empty with entries >= 4".into()));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("optimizer tolerance must be positive".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidParameter("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Affine covariate transform `(x - center) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub(crate) fn from_data(ds: &Dataset) -> Self {
        let q = ds.q();
        let n = ds.n_obs() as f64;
        let mut center = vec![0.0; q];
        let mut scale = vec![0.0; q];
        for b in &ds.batches {
            for j in 0..q {
                center[j] += b.covariates.column(j).sum() / n;
            }
        }
        for b in &ds.batches {
            for j in 0..q {
                scale[j] += b.covariates.column(j).iter().map(|x| (x - center[j]).powi(2)).sum::<f64>() / n;
            }
        }
        let scale = scale.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { center, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.center[j]) / self.scale[j])
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(j, v)| (v - self.center[j]) / self.scale[j]).collect()
    }
}

/// Positions of the parameter blocks inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub d: usize,
    pub p: usize,
    pub n_theta: usize,
    pub n_thresholds: usize,
    pub n_gamma: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.d * self.p + self.n_theta + self.n_thresholds + self.n_gamma
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_range(&self) -> std::ops::Range<usize> {
        let s = self.d * self.p;
        s..s + self.n_theta
    }

    pub fn threshold_range(&self) -> std::ops::Range<usize> {
        let s = self.theta_range().end;
        s..s + self.n_thresholds
    }

    pub fn gamma_range(&self) -> std::ops::Range<usize> {
        let s = self.threshold_range().end;
        s..s + self.n_gamma
    }

    pub fn encode(&self, coef: &DMatrix<f64>, log_theta: &[f64], thresholds: &[f64], log_gamma: &[f64]) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.len());
        for d in 0..self.d {
            for j in 0..self.p {
                v.push(coef[(d, j)]);
            }
        }
        v.extend_from_slice(log_theta);
        v.extend(encode_thresholds(thresholds));
        v.extend_from_slice(log_gamma);
        DVector::from_vec(v)
    }

    pub fn coef(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.p, |d, j| x[d * self.p + j])
    }

    pub fn log_theta<'a>(&self, x: &'a DVector<f64>) -> &'a [f64] {
        &x.as_slice()[self.theta_range()]
    }

    pub fn thresholds(&self, x: &DVector<f64>) -> Vec<f64> {
        decode_thresholds(&x.as_slice()[self.threshold_range()])
    }

    pub fn gamma(&self, x: &DVector<f64>) -> Vec<f64> {
        x.as_slice()[self.gamma_range()].iter().map(|g| g.exp().max(GAMMA_FLOOR)).collect()
    }
}

/// Mean design row for `μ(t) = Φ(t)ᵀ B u`: entry `(d, j)` at `d·p + j` is
/// `Φ_d(t) u_j`.
pub fn mean_design(basis: &SplineBasis, times: &[f64], u: &DVector<f64>) -> DMatrix<f64> {
    let phi = basis.design_matrix(times);
    let p = u.len();
    DMatrix::from_fn(times.len(), basis.dim() * p, |i, k| phi[(i, k / p)] * u[k % p])
}

/// A set of observations sharing one latent covariance: a single batch, or
/// all batches of a cluster.
#[derive(Debug, Clone)]
pub(crate) struct Group {
    pub members: Vec<usize>,
    pub design: DMatrix<f64>,
    pub z: Vec<f64>,
    pub x_blocks: Vec<DMatrix<f64>>,
    pub w: Option<DMatrix<f64>>,
}

impl Group {
    pub fn build(batches: &[FunctionalBatch], members: Vec<usize>, basis: &SplineBasis, stdz: Option<&Standardization>, with_w: bool) -> Self {
        let n: usize = members.iter().map(|&m| batches[m].len()).sum();
        let dp = basis.dim() * batches[members[0]].p();
        let mut design = DMatrix::zeros(n, dp);
        let mut z = Vec::with_capacity(n);
        let mut x_blocks = Vec::new();
        let r = if with_w { batches[members[0]].r().unwrap_or(0) } else { 0 };
        let mut w = DMatrix::zeros(n, r);
        let mut off = 0;
        for &m in &members {
            let b = &batches[m];
            let g = mean_design(basis, &b.times, &b.scalar_covariates);
            design.rows_mut(off, b.len()).copy_from(&g);
            z.extend_from_slice(&b.responses);
            x_blocks.push(match stdz {
                Some(s) => s.apply(&b.covariates),
                None => b.covariates.clone(),
            });
            if r > 0 {
                if let Some(wb) = &b.re_covariates {
                    w.rows_mut(off, b.len()).copy_from(wb);
                }
            }
            off += b.len();
        }
        Self {
            members,
            design,
            z,
            x_blocks,
            w: if r > 0 { Some(w) } else { None },
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    /// Block-diagonal kernel covariance, plus `W Γ Wᵀ` when `gamma` given.
    pub fn covariance(&self, theta: &KernelParams, jitter: f64, gamma: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let n = self.len();
        let mut c = DMatrix::zeros(n, n);
        let mut off = 0;
        for x in &self.x_blocks {
            let k = x.nrows();
            c.view_mut((off, off), (k, k)).copy_from(&gram_matrix(x, theta, jitter)?);
            off += k;
        }
        if let (Some(w), Some(g)) = (&self.w, gamma) {
            let mut wg = w.clone();
            for (j, gj) in g.iter().enumerate() {
                wg.column_mut(j).scale_mut(*gj);
            }
            c += wg * w.transpose();
        }
        Ok(c)
    }
}

/// Everything needed to evaluate the objective for one basis dimension.
pub(crate) struct Problem {
    pub groups: Vec<Group>,
    pub layout: ParamLayout,
    pub family: ObservationFamily,
    pub kernel: KernelKind,
    pub q: usize,
    pub objective: ObjectiveKind,
    pub jitter: f64,
    /// Random-effect variances held fixed (not optimized).
    pub fixed_gamma: Option<Vec<f64>>,
    pub evals: usize,
    pub max_evals: usize,
    pub penalties: usize,
    /// Grams at the last base point, keyed by the covariance parameters.
    cache_key: Vec<f64>,
    cache_grams: Vec<DMatrix<f64>>,
    warm: Vec<Option<DVector<f64>>>,
}

pub(crate) struct Evaluation {
    pub value: f64,
    pub posteriors: Vec<LatentPosterior>,
}

impl Problem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        groups: Vec<Group>,
        layout: ParamLayout,
        family: ObservationFamily,
        kernel: KernelKind,
        q: usize,
        objective: ObjectiveKind,
        jitter: f64,
        fixed_gamma: Option<Vec<f64>>,
        max_evals: usize,
    ) -> Self {
        let g = groups.len();
        Self {
            groups,
            layout,
            family,
            kernel,
            q,
            objective,
            jitter,
            fixed_gamma,
            evals: 0,
            max_evals,
            penalties: 0,
            cache_key: Vec::new(),
            cache_grams: Vec::new(),
            warm: vec![None; g],
        }
    }

    fn cov_key(&self, x: &DVector<f64>) -> Vec<f64> {
        let l = &self.layout;
        x.as_slice()[l.theta_range()].iter().chain(&x.as_slice()[l.gamma_range()]).copied().collect()
    }

    fn grams(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        let l = &self.layout;
        let theta = KernelParams::new(self.kernel, self.q, l.log_theta(x).to_vec())?;
        let gamma = if l.n_gamma > 0 { Some(l.gamma(x)) } else { self.fixed_gamma.clone() };
        self.groups
            .par_iter()
            .map(|g| g.covariance(&theta, self.jitter, gamma.as_deref()))
            .collect()
    }

    fn family_at(&self, x: &DVector<f64>) -> Result<ObservationFamily> {
        if self.layout.n_thresholds > 0 {
            self.family.with_thresholds(self.layout.thresholds(x))
        } else {
            Ok(self.family.clone())
        }
    }

    /// Full evaluation: per-group posteriors and the summed log-marginal.
    pub fn evaluate(&self, x: &DVector<f64>, grams: Option<&[DMatrix<f64>]>, warm: bool) -> Result<Evaluation> {
        let family = self.family_at(x)?;
        let owned;
        let grams = match grams {
            Some(g) => g,
            None => {
                owned = self.grams(x)?;
                &owned
            }
        };
        let b = DVector::from_column_slice(&x.as_slice()[..self.layout.d * self.layout.p]);
        let opts = InferenceOptions::default();
        let posteriors: Result<Vec<LatentPosterior>> = self
            .groups
            .par_iter()
            .zip(grams.par_iter())
            .enumerate()
            .map(|(k, (g, c))| {
                let mu = &g.design * &b;
                let sites = ObservedSites {
                    family: &family,
                    z: &g.z,
                    mu: mu.as_slice(),
                };
                let start = if warm { self.warm[k].as_ref() } else { None };
                let mut post = fisher_sites(&sites, c, &opts, start)?;
                if self.objective == ObjectiveKind::Laplace {
                    post.log_marginal_contribution = laplace_sites(&sites, c, &opts)?;
                }
                Ok(post)
            })
            .collect();
        let posteriors = posteriors?;
        // ordered reduction keeps the sum independent of scheduling
        let value = posteriors.iter().map(|p| p.log_marginal_contribution).sum::<f64>();
        if !value.is_finite() {
            return Err(Error::FitFailed("non-finite objective".into()));
        }
        Ok(Evaluation { value, posteriors })
    }

    /// Objective value, with failures mapped to [`PENALTY`].
    pub fn value_at(&mut self, x: &DVector<f64>) -> f64 {
        self.evals += 1;
        let key = self.cov_key(x);
        let cached = key == self.cache_key;
        let res = if cached {
            self.evaluate(x, Some(&self.cache_grams), true)
        } else {
            self.evaluate(x, None, false)
        };
        match res {
            Ok(e) => e.value,
            Err(_) => {
                self.penalties += 1;
                PENALTY
            }
        }
    }

    /// Central-difference gradient of the log-marginal. Mean and threshold
    /// coordinates reuse the covariance matrices of the base point, and all
    /// perturbed evaluations start from the base modes.
    pub fn gradient_at(&mut self, x: &DVector<f64>) -> DVector<f64> {
        match self.grams(x) {
            Ok(g) => {
                self.cache_key = self.cov_key(x);
                self.cache_grams = g;
                self.warm = match self.evaluate(x, Some(&self.cache_grams), false) {
                    Ok(e) => e.posteriors.into_iter().map(|p| Some(p.alpha)).collect(),
                    Err(_) => vec![None; self.groups.len()],
                };
            }
            Err(_) => {
                self.cache_key.clear();
                self.cache_grams.clear();
            }
        }
        central_diff(x, FD_STEP, |y| self.value_at(y))
    }
}

struct Negated<'a>(&'a mut Problem);

impl Objective for Negated<'_> {
    fn value(&mut self, x: &DVector<f64>) -> f64 {
        -self.0.value_at(x)
    }

    fn gradient(&mut self, x: &DVector<f64>, _fx: f64) -> DVector<f64> {
        -self.0.gradient_at(x)
    }

    fn exhausted(&self) -> bool {
        self.0.evals >= self.0.max_evals
    }
}

/// A fitted model with the training data it was fitted to.
#[derive(Debug, Clone)]
pub struct FittedModel {
    /// Family with the fitted thresholds.
    pub family: ObservationFamily,
    /// `B`, `D × p`.
    pub coef: DMatrix<f64>,
    pub theta: KernelParams,
    /// Random-effect variances (clustered fits).
    pub gamma: Option<Vec<f64>>,
    pub basis: SplineBasis,
    pub knots: KnotMethod,
    pub objective: ObjectiveKind,
    pub jitter: f64,
    pub standardization: Option<Standardization>,
    pub training: Vec<FunctionalBatch>,
    /// Batch indices sharing a latent covariance (singletons unless
    /// clustered).
    pub groups: Vec<Vec<usize>>,
    /// One posterior per group.
    pub per_batch: Vec<LatentPosterior>,
    pub log_marginal: f64,
    pub bic: f64,
    /// Log-marginal at the start and after every optimizer iteration.
    pub fit_trace: Vec<f64>,
    pub evaluations: usize,
    pub penalties: usize,
    pub converged: bool,
    /// `½ log|I + C_m|` summed over groups, divided by the number of
    /// observations.
    pub regret: f64,
}

impl FittedModel {
    pub fn n_params(&self) -> usize {
        self.coef.len()
            + self.theta.log_params().len()
            + self.family.thresholds().map_or(0, |b| b.len())
            + self.gamma.as_ref().map_or(0, |g| g.len())
    }

    /// `μ(t) = Φ(t)ᵀ B u`.
    pub fn mean_at(&self, t: f64, u: &DVector<f64>) -> f64 {
        let phi = self.basis.basis_row(t);
        (0..self.coef.nrows())
            .map(|d| phi[d] * (self.coef.row(d) * u)[0])
            .sum()
    }

    pub fn mean_curve(&self, times: &[f64], u: &DVector<f64>) -> DVector<f64> {
        let g = mean_design(&self.basis, times, u);
        let b = DVector::from_iterator(self.coef.len(), (0..self.coef.nrows()).flat_map(|d| (0..self.coef.ncols()).map(move |j| (d, j))).map(|(d, j)| self.coef[(d, j)]));
        g * b
    }

    /// Covariates as seen by the kernel.
    pub fn kernel_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.standardization {
            Some(s) => s.apply(x),
            None => x.clone(),
        }
    }

    pub fn kernel_input_row(&self, x: &[f64]) -> Vec<f64> {
        match &self.standardization {
            Some(s) => s.apply_row(x),
            None => x.to_vec(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            d: self.coef.nrows(),
            p: self.coef.ncols(),
            n_theta: self.theta.log_params().len(),
            n_thresholds: self.family.thresholds().map_or(0, |b| b.len()),
            n_gamma: self.gamma.as_ref().map_or(0, |g| g.len()),
        }
    }

    /// Flat parameter vector of this model.
    pub fn flat_params(&self) -> DVector<f64> {
        let lg: Vec<f64> = self.gamma.iter().flatten().map(|g| g.ln()).collect();
        self.layout().encode(&self.coef, self.theta.log_params(), self.family.thresholds().unwrap_or(&[]), &lg)
    }
}

/// `-2 l + G log M`, with `G` the number of free parameters.
pub fn bic(model: &FittedModel, m: usize) -> f64 {
    bic_value(model.log_marginal, model.n_params(), m)
}

pub fn bic_value(log_marginal: f64, n_params: usize, m: usize) -> f64 {
    -2.0 * log_marginal + n_params as f64 * (m as f64).ln()
}

/// Link-scale working response used to initialize `B`.
fn working_response(family: &ObservationFamily, z: f64) -> f64 {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    match family {
        ObservationFamily::BernoulliLogit => logit(z.clamp(0.1, 0.9)),
        ObservationFamily::BinomialLogit { trials } => logit((z + 0.5) / (*trials as f64 + 1.0)),
        ObservationFamily::PoissonLog => (z + 0.5).ln(),
        ObservationFamily::Gaussian { .. } => z,
        ObservationFamily::OrdinalProbit { thresholds, .. } => {
            let r = thresholds.len();
            let gap = if r > 1 { (thresholds[r - 1] - thresholds[0]) / (r - 1) as f64 } else { 1.0 };
            let j = z as usize;
            if j == 0 {
                thresholds[0] - 0.5 * gap
            } else if j == r {
                thresholds[r - 1] + 0.5 * gap
            } else {
                0.5 * (thresholds[j - 1] + thresholds[j])
            }
        }
    }
}

/// Starting thresholds from cumulative category frequencies, on a unit
/// latent scale.
pub fn empirical_thresholds(ds: &Dataset, n_categories: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_categories];
    for b in &ds.batches {
        for &z in &b.responses {
            counts[(z as usize).min(n_categories - 1)] += 1;
        }
    }
    let total = counts.iter().sum::<usize>() as f64;
    let mut cum = 0.0;
    let mut out = Vec::with_capacity(n_categories - 1);
    for c in &counts[..n_categories - 1] {
        cum += *c as f64;
        let p = ((cum + 0.5) / (total + 1.0)).clamp(1e-3, 1.0 - 1e-3);
        let b = norm_quantile(p);
        // keep strictly increasing when a category is empty
        out.push(match out.last() {
            Some(&prev) if b <= prev + 1e-3 => prev + 1e-3,
            _ => b,
        });
    }
    out
}

pub(crate) struct Start {
    pub coef: DMatrix<f64>,
    pub log_theta: Vec<f64>,
}

pub(crate) fn initial_point(ds: &Dataset, family: &ObservationFamily, basis: &SplineBasis, spec: &ModelSpec, stdz: Option<&Standardization>) -> Result<Start> {
    let p = ds.p();
    let dp = basis.dim() * p;
    let mut gtg = DMatrix::<f64>::zeros(dp, dp);
    let mut gty = DVector::<f64>::zeros(dp);
    let mut ys = Vec::new();
    for b in &ds.batches {
        let g = mean_design(basis, &b.times, &b.scalar_covariates);
        let y = DVector::from_iterator(b.len(), b.responses.iter().map(|&z| working_response(family, z)));
        gtg += g.transpose() * &g;
        gty += g.transpose() * &y;
        ys.push((g, y));
    }
    for i in 0..dp {
        gtg[(i, i)] += 1e-6;
    }
    let beta = gtg.cholesky().ok_or(Error::Conditioning { jitter: 1e-6 })?.solve(&gty);
    let n = ds.n_obs() as f64;
    let resid_var = ys.iter().map(|(g, y)| (y - g * &beta).norm_squared()).sum::<f64>() / n;
    let coef = DMatrix::from_fn(basis.dim(), p, |d, j| beta[d * p + j]);

    let q = ds.q();
    let log_theta = match &spec.kernel_init {
        Some(v) => KernelParams::from_natural(spec.kernel, q, v)?.log_params().to_vec(),
        None => {
            let v = (0.25 * resid_var).clamp(1e-2, 10.0);
            // pooled covariate spread sets the length scale
            let mut ss = 0.0;
            let mut cnt = 0.0;
            for b in &ds.batches {
                let x = match stdz {
                    Some(s) => s.apply(&b.covariates),
                    None => b.covariates.clone(),
                };
                let m = x.mean();
                ss += x.iter().map(|a| (a - m).powi(2)).sum::<f64>();
                cnt += x.len() as f64;
            }
            let spread = if ss > 0.0 { (ss / cnt).sqrt() } else { 1.0 };
            let nat: Vec<f64> = match spec.kernel {
                KernelKind::SeLinear => {
                    let mut w = vec![1.0 / (spread * spread); q];
                    w.push(v);
                    w.push(0.1 * v / (spread * spread));
                    w
                }
                KernelKind::Matern32 | KernelKind::PiecewisePoly2 => vec![spread, v],
                KernelKind::RationalQuadratic => vec![spread, v, 1.0],
            };
            nat.iter().map(|a| a.ln()).collect()
        }
    };
    Ok(Start { coef, log_theta })
}

pub(crate) struct FitSetup {
    pub basis: SplineBasis,
    pub family: ObservationFamily,
    pub stdz: Option<Standardization>,
}

pub(crate) fn setup(ds: &Dataset, spec: &ModelSpec, d: usize) -> Result<FitSetup> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(Error::FitFailed("dataset has no batches".into()));
    }
    ds.validate_family(&spec.family)?;
    let basis = place_knots(&ds.all_times(), d, spec.knots)?;
    let family = match (&spec.family, spec.auto_thresholds) {
        (ObservationFamily::OrdinalProbit { .. }, true) => {
            let r = spec.family.n_categories().expect("ordinal");
            spec.family.with_thresholds(empirical_thresholds(ds, r))?
        }
        (f, _) => f.clone(),
    };
    let stdz = spec.standardize.then(|| Standardization::from_data(ds));
    Ok(FitSetup { basis, family, stdz })
}

/// Runs the optimizer from `x0` and any restarts, returning the best point,
/// its trace and the counters.
pub(crate) fn optimize(problem: &mut Problem, x0: DVector<f64>, spec: &ModelSpec) -> Result<(DVector<f64>, Vec<f64>, bool)> {
    let opts = LbfgsOptions {
        memory: 8,
        max_iter: 500,
        grad_tol: 1e-6,
        f_rel_tol: spec.tol,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut best: Option<(DVector<f64>, f64, Vec<f64>, bool)> = None;
    let theta_range = problem.layout.theta_range();
    for start in 0..=spec.restarts {
        let mut x = x0.clone();
        if start > 0 {
            for i in theta_range.clone() {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[i] += e;
            }
        }
        problem.evals = 0;
        let res = minimize(&mut Negated(problem), x, &opts);
        if res.value >= -PENALTY || !res.value.is_finite() {
            continue;
        }
        let trace: Vec<f64> = res.trace.iter().map(|v| -v).collect();
        let better = best.as_ref().is_none_or(|b| res.value < b.1);
        if better {
            best = Some((res.x, res.value, trace, res.converged));
        }
    }
    let (x, _, trace, converged) =
        best.ok_or_else(|| Error::FitFailed("no start produced a finite objective".into()))?;
    Ok((x, trace, converged))
}

/// Fits with a fixed basis dimension `d`.
pub fn fit_with_dim(ds: &Dataset, spec: &ModelSpec, d: usize) -> Result<FittedModel> {
    let FitSetup { basis, family, stdz } = setup(ds, spec, d)?;
    let start = initial_point(ds, &family, &basis, spec, stdz.as_ref())?;
    let layout = ParamLayout {
        d,
        p: ds.p(),
        n_theta: spec.kernel.n_params(ds.q()),
        n_thresholds: family.thresholds().map_or(0, |b| b.len()),
        n_gamma: 0,
    };
    let groups: Vec<Group> = (0..ds.len())
        .map(|m| Group::build(&ds.batches, vec![m], &basis, stdz.as_ref(), false))
        .collect();
    let mut problem = Problem::new(groups, layout, family.clone(), spec.kernel, ds.q(), spec.objective, spec.jitter, None, spec.max_evals);
    let x0 = layout.encode(&start.coef, &start.log_theta, family.thresholds().unwrap_or(&[]), &[]);
    let (x, trace, converged) = optimize(&mut problem, x0, spec)?;
    finish(ds, spec, problem, x, trace, converged, basis, stdz)
}

/// Builds a model at given parameters without optimizing: `coef` is
/// `D × p`, `theta` the kernel and the family (thresholds included) is taken
/// from `spec`. Posteriors, log-marginal and BIC are computed as for a fit.
pub fn model_at(ds: &Dataset, spec: &ModelSpec, coef: &DMatrix<f64>, theta: &KernelParams) -> Result<FittedModel> {
    let d = coef.nrows();
    if coef.ncols() != ds.p() || theta.input_dim() != ds.q() || theta.kind() != spec.kernel {
        return Err(Error::Dimension("parameters do not match the dataset or kernel".into()));
    }
    let spec = ModelSpec { auto_thresholds: false, ..spec.clone() };
    let FitSetup { basis, family, stdz } = setup(ds, &spec, d)?;
    let layout = ParamLayout {
        d,
        p: ds.p(),
        n_theta: theta.log_params().len(),
        n_thresholds: family.thresholds().map_or(0, |b| b.len()),
        n_gamma: 0,
    };
    let groups: Vec<Group> = (0..ds.len())
        .map(|m| Group::build(&ds.batches, vec![m], &basis, stdz.as_ref(), false))
        .collect();
    let problem = Problem::new(groups, layout, family.clone(), spec.kernel, ds.q(), spec.objective, spec.jitter, None, spec.max_evals);
    let x = layout.encode(coef, theta.log_params(), family.thresholds().unwrap_or(&[]), &[]);
    finish(ds, &spec, problem, x, Vec::new(), true, basis, stdz)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn finish(
    ds: &Dataset,
    spec: &ModelSpec,
    problem: Problem,
    x: DVector<f64>,
    trace: Vec<f64>,
    converged: bool,
    basis: SplineBasis,
    stdz: Option<Standardization>,
) -> Result<FittedModel> {
    let layout = problem.layout;
    let eval = problem.evaluate(&x, None, false)?;
    let theta = KernelParams::new(spec.kernel, ds.q(), layout.log_theta(&x).to_vec())?;
    let family = problem.family_at(&x)?;
    let gamma = if layout.n_gamma > 0 { Some(layout.gamma(&x)) } else { problem.fixed_gamma.clone() };
    let n_obs: usize = problem.groups.iter().map(|g| g.len()).sum();
    let mut regret = 0.0;
    for p in &eval.posteriors {
        regret += regret_term(&p.gram, 1.0)?;
    }
    let mut model = FittedModel {
        family,
        coef: layout.coef(&x),
        theta,
        gamma,
        basis,
        knots: spec.knots,
        objective: spec.objective,
        jitter: spec.jitter,
        standardization: stdz,
        training: ds.batches.clone(),
        groups: problem.groups.iter().map(|g| g.members.clone()).collect(),
        per_batch: eval.posteriors,
        log_marginal: eval.value,
        bic: 0.0,
        fit_trace: trace,
        evaluations: problem.evals,
        penalties: problem.penalties,
        converged,
        regret: regret / n_obs as f64,
    };
    model.bic = bic(&model, ds.len());
    Ok(model)
}

/// Fits over the basis-dimension grid and keeps the smallest BIC (ties go
/// to the smaller dimension).
pub fn select_basis_dim(ds: &Dataset, spec: &ModelSpec) -> Result<FittedModel> {
    let grid = match &spec.basis_dim {
        BasisDim::Auto(g) => g.clone(),
        BasisDim::Fixed(d) => vec![*d],
    };
    let mut best: Option<FittedModel> = None;
    let mut last_err = None;
    let mut sorted = grid;
    sorted.sort_unstable();
    sorted.dedup();
    for d in sorted {
        match fit_with_dim(ds, spec, d) {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.bic < b.bic) {
                    best = Some(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::FitFailed("empty basis grid".into())))
}

/// Fits according to `spec.basis_dim`.
pub fn fit(ds: &Dataset, spec: &ModelSpec) -> Result<FittedModel> {
    match spec.basis_dim {
        BasisDim::Fixed(d) => fit_with_dim(ds, spec, d),
        BasisDim::Auto(_) => select_basis_dim(ds, spec),
    }
}

/// Value of the approximate marginal log-likelihood at a flat parameter
/// vector for basis `basis`. Failures give [`PENALTY`].
pub fn objective(flat: &DVector<f64>, ds: &Dataset, spec: &ModelSpec, basis: &SplineBasis) -> Result<f64> {
    let mut p = objective_problem(ds, spec, basis)?;
    if flat.len() != p.layout.len() {
        return Err(Error::Dimension(format!("parameter vector has length {}, expected {}", flat.len(), p.layout.len())));
    }
    Ok(p.value_at(flat))
}

/// Central finite-difference gradient of [`objective`].
pub fn objective_gradient(flat: &DVector<f64>, ds: &Dataset, spec: &ModelSpec, basis: &SplineBasis) -> Result<DVector<f64>> {
    let mut p = objective_problem(ds, spec, basis)?;
    if flat.len() != p.layout.len() {
        return Err(Error::Dimension(format!("parameter vector has length {}, expected {}", flat.len(), p.layout.len())));
    }
    Ok(p.gradient_at(flat))
}

/// Parameter layout for `ds` under `spec` with basis `basis`.
pub fn layout_for(ds: &Dataset, spec: &ModelSpec, basis: &SplineBasis) -> ParamLayout {
    ParamLayout {
        d: basis.dim(),
        p: ds.p(),
        n_theta: spec.kernel.n_params(ds.q()),
        n_thresholds: spec.family.thresholds().map_or(0, |b| b.len()),
        n_gamma: 0,
    }
}

fn objective_problem(ds: &Dataset, spec: &ModelSpec, basis: &SplineBasis) -> Result<Problem> {
    spec.validate()?;
    let stdz = spec.standardize.then(|| Standardization::from_data(ds));
    let groups = (0..ds.len())
        .map(|m| Group::build(&ds.batches, vec![m], basis, stdz.as_ref(), false))
        .collect();
    Ok(Problem::new(
        groups,
        layout_for(ds, spec, basis),
        spec.family.clone(),
        spec.kernel,
        ds.q(),
        spec.objective,
        spec.jitter,
        None,
        usize::MAX,
    ))
}
