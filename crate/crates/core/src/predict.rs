//! Predictive distributions at new inputs.
//!
//! For an observed batch with Gaussian approximation `N(τ̃, Ω)`,
//! `Ω = (C⁻¹ + D)⁻¹`, the latent value at `x*` is approximately normal with
//!
//! ```text
//! a = C⁻¹ C*,   mean = aᵀ τ̃,   var = aᵀ Ω a + σ*²,   σ*² = k(x*, x*) - C*ᵀ C⁻¹ C*
//! ```
//!
//! and response moments follow by one-dimensional Gauss–Hermite quadrature
//! over `η* = μ(t*) + τ*`:
//! `E z* = E h(η*)` and `Var z* = E v(η*) + E h(η*)² - (E h(η*))²`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::FunctionalBatch;
use crate::error::{Error, Result};
use crate::family::ObservationFamily;
use crate::fit::{FittedModel, Group};
use crate::kernels::cross_cov;
use crate::latent::{fisher_sites, laplace_sites, InferenceOptions, LatentPosterior, ObservedSites, SiteLikelihood};
use crate::linalg::cholesky_with_jitter;
use crate::quadrature::{GaussHermite, DEFAULT_NODES};
use crate::special::norm_cdf;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    /// `μ(t*) = Φ(t*)ᵀ B u*`.
    pub mean_function: f64,
    /// Posterior mean of `τ*`.
    pub latent_mean: f64,
    /// Posterior variance of `τ*`.
    pub latent_var: f64,
    pub response_mean: f64,
    pub response_var: f64,
    /// Ordinal category probabilities.
    pub category_probs: Option<Vec<f64>>,
}

impl PredictiveDistribution {
    /// Predicted latent curve value `μ(t*) + E τ*`.
    pub fn latent_value(&self) -> f64 {
        self.mean_function + self.latent_mean
    }
}

/// Latent prediction at one input, with the two variance pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentPrediction {
    pub mean: f64,
    pub var: f64,
    /// `aᵀ Ω a`.
    pub explained_var: f64,
    /// `σ*²`.
    pub conditional_var: f64,
}

/// Test input: time, functional covariates, scalar covariates and (for
/// clustered models) random-effect covariates.
#[derive(Debug, Clone, Copy)]
pub struct TestPoint<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub u: &'a DVector<f64>,
    pub w: Option<&'a [f64]>,
}

/// Posterior for one observed batch (or cluster), reusable across test
/// points.
pub struct BatchPredictor<'m> {
    model: &'m FittedModel,
    group: Group,
    mu: DVector<f64>,
    post: LatentPosterior,
    chol_c: Cholesky<f64, Dyn>,
    gh: GaussHermite,
}

impl<'m> BatchPredictor<'m> {
    /// Fresh Gaussian approximation on the observed batches (one batch, or
    /// all batches of one cluster for clustered models).
    pub fn new(model: &'m FittedModel, observed: &[FunctionalBatch]) -> Result<Self> {
        if observed.is_empty() || observed.iter().all(|b| b.is_empty()) {
            return Err(Error::InvalidParameter(
                "no observations in the batch; use new-batch prediction".into(),
            ));
        }
        let obs: Vec<FunctionalBatch> = observed.iter().filter(|b| !b.is_empty()).cloned().collect();
        check_batch(model, &obs)?;
        let members: Vec<usize> = (0..obs.len()).collect();
        let group = Group::build(&obs, members, &model.basis, model.standardization.as_ref(), model.gamma.is_some());
        let c = group.covariance(&model.theta, model.jitter, model.gamma.as_deref())?;
        let mu = &group.design * flat_coef(model);
        let sites = ObservedSites {
            family: &model.family,
            z: &group.z,
            mu: mu.as_slice(),
        };
        let post = fisher_sites(&sites, &c, &InferenceOptions::default(), None)?;
        Self::assemble(model, group, mu, post)
    }

    /// Uses the stored training posterior of group `k`.
    pub fn from_training(model: &'m FittedModel, k: usize) -> Result<Self> {
        let members = model
            .groups
            .get(k)
            .ok_or_else(|| Error::InvalidParameter(format!("model has no training group {k}")))?
            .clone();
        let group = Group::build(&model.training, members, &model.basis, model.standardization.as_ref(), model.gamma.is_some());
        let mu = &group.design * flat_coef(model);
        Self::assemble(model, group, mu, model.per_batch[k].clone())
    }

    fn assemble(model: &'m FittedModel, group: Group, mu: DVector<f64>, post: LatentPosterior) -> Result<Self> {
        let chol_c = cholesky_with_jitter(&post.gram, 0.0)?.chol;
        Ok(Self {
            model,
            group,
            mu,
            post,
            chol_c,
            gh: GaussHermite::new(DEFAULT_NODES),
        })
    }

    pub fn with_nodes(mut self, n: usize) -> Self {
        self.gh = GaussHermite::new(n);
        self
    }

    pub fn posterior(&self) -> &LatentPosterior {
        &self.post
    }

    fn cross(&self, x: &[f64], w: Option<&[f64]>) -> Result<(DVector<f64>, f64)> {
        let m = self.model;
        let xs = m.kernel_input_row(x);
        if xs.len() != m.theta.input_dim() {
            return Err(Error::Dimension(format!("test input has {} covariates, model expects {}", xs.len(), m.theta.input_dim())));
        }
        let mut c = DVector::zeros(self.group.len());
        let mut off = 0;
        for xb in &self.group.x_blocks {
            let k = cross_cov(xb, &xs, &m.theta)?;
            c.rows_mut(off, k.len()).copy_from(&k);
            off += k.len();
        }
        let mut kss = m.theta.variance_at(&xs);
        if let (Some(g), Some(wm)) = (&m.gamma, &self.group.w) {
            let ws = w.ok_or_else(|| Error::InvalidParameter("clustered model needs random-effect covariates for prediction".into()))?;
            if ws.len() != g.len() {
                return Err(Error::Dimension(format!("{} random-effect covariates, model has {}", ws.len(), g.len())));
            }
            let gw = DVector::from_iterator(g.len(), g.iter().zip(ws).map(|(a, b)| a * b));
            c += wm * &gw;
            kss += ws.iter().zip(gw.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok((c, kss))
    }

    /// Latent posterior of `τ*` at covariates `x` (and `w` if clustered).
    pub fn latent_at(&self, x: &[f64], w: Option<&[f64]>) -> Result<LatentPrediction> {
        let (cs, kss) = self.cross(x, w)?;
        let a = self.chol_c.solve(&cs);
        let mean = a.dot(&self.post.mode);
        let conditional_var = (kss - cs.dot(&a)).max(0.0);
        let explained_var = self.post.posterior_quad(&a).max(0.0);
        Ok(LatentPrediction {
            mean,
            var: explained_var + conditional_var,
            explained_var,
            conditional_var,
        })
    }

    /// Predictive distribution with response moments by quadrature.
    pub fn predict(&self, p: TestPoint<'_>) -> Result<PredictiveDistribution> {
        let lat = self.latent_at(p.x, p.w)?;
        let mu = self.model.mean_at(p.t, p.u);
        let (response_mean, response_var, category_probs) = response_moments(&self.model.family, mu + lat.mean, lat.var, &self.gh);
        Ok(PredictiveDistribution {
            mean_function: mu,
            latent_mean: lat.mean,
            latent_var: lat.var,
            response_mean,
            response_var,
            category_probs,
        })
    }

    /// Response moments from Laplace approximations of the ratio
    /// `∫ g(η*) p(Z | τ) p(τ, τ*) / p(Z)` over the joint `(τ, τ*)`.
    pub fn predict_laplace(&self, p: TestPoint<'_>) -> Result<PredictiveDistribution> {
        let lat = self.latent_at(p.x, p.w)?;
        let mu_star = self.model.mean_at(p.t, p.u);
        let (cs, kss) = self.cross(p.x, p.w)?;
        let n = self.group.len();
        let mut cplus = DMatrix::zeros(n + 1, n + 1);
        cplus.view_mut((0, 0), (n, n)).copy_from(&self.post.gram);
        for i in 0..n {
            cplus[(i, n)] = cs[i];
            cplus[(n, i)] = cs[i];
        }
        cplus[(n, n)] = kss + self.model.jitter;
        let family = &self.model.family;
        let base = ObservedSites {
            family,
            z: &self.group.z,
            mu: self.mu.as_slice(),
        };
        let opts = InferenceOptions::default();
        let log_pz = laplace_sites(&base, &self.post.gram, &opts)?;
        let ratio = |g: &dyn Fn(f64) -> (f64, f64, f64)| -> Result<f64> {
            let sites = Augmented { base, extra: g, mu_star };
            Ok((laplace_sites(&sites, &cplus, &opts)? - log_pz).exp())
        };

        let (response_mean, response_var, category_probs) = match family {
            ObservationFamily::Gaussian { noise_var } => {
                // h is the identity, so take the cumulant generating
                // function K(s) = log E e^{s η*} and differentiate it
                let s = 1.0 / (1.0 + lat.var.sqrt());
                let k = |sv: f64| ratio(&move |eta: f64| (sv * eta, sv, 0.0)).map(f64::ln);
                let (kp, km) = (k(s)?, k(-s)?);
                let mean = (kp - km) / (2.0 * s);
                let var = (kp + km) / (s * s);
                (mean, var + noise_var, None)
            }
            ObservationFamily::OrdinalProbit { .. } => {
                let r = family.n_categories().expect("ordinal");
                let mut probs = Vec::with_capacity(r);
                for j in 0..r {
                    let zj = j as f64;
                    probs.push(ratio(&move |eta: f64| family.terms(zj, eta))?);
                }
                let total: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|q| *q /= total);
                let mean: f64 = probs.iter().enumerate().map(|(j, q)| j as f64 * q).sum();
                let second: f64 = probs.iter().enumerate().map(|(j, q)| (j * j) as f64 * q).sum();
                (mean, (second - mean * mean).max(0.0), Some(probs))
            }
            _ => {
                let eh = ratio(&|eta: f64| log_mean_terms(family, eta, 1.0))?;
                let eh2 = ratio(&|eta: f64| log_mean_terms(family, eta, 2.0))?;
                let ev = ratio(&|eta: f64| log_var_terms(family, eta))?;
                (eh, (ev + eh2 - eh * eh).max(0.0), None)
            }
        };
        Ok(PredictiveDistribution {
            mean_function: mu_star,
            latent_mean: lat.mean,
            latent_var: lat.var,
            response_mean,
            response_var,
            category_probs,
        })
    }
}

fn flat_coef(model: &FittedModel) -> DVector<f64> {
    let (d, p) = model.coef.shape();
    DVector::from_iterator(d * p, (0..d).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| model.coef[(i, j)]))
}

fn check_batch(model: &FittedModel, obs: &[FunctionalBatch]) -> Result<()> {
    for b in obs {
        if b.q() != model.theta.input_dim() || b.p() != model.coef.ncols() {
            return Err(Error::Dimension(format!(
                "batch {} has Q={}, p={}; model expects Q={}, p={}",
                b.batch_id,
                b.q(),
                b.p(),
                model.theta.input_dim(),
                model.coef.ncols()
            )));
        }
        b.validate_family(&model.family)?;
    }
    Ok(())
}

/// Observed sites plus one extra site `log g(μ* + τ*)` on the last
/// coordinate.
struct Augmented<'a, G: Fn(f64) -> (f64, f64, f64) + ?Sized> {
    base: ObservedSites<'a>,
    extra: &'a G,
    mu_star: f64,
}

impl<G: Fn(f64) -> (f64, f64, f64) + ?Sized> SiteLikelihood for Augmented<'_, G> {
    fn len(&self) -> usize {
        self.base.len() + 1
    }

    fn site(&self, i: usize, tau: f64) -> (f64, f64, f64) {
        if i < self.base.len() {
            self.base.site(i, tau)
        } else {
            (self.extra)(self.mu_star + tau)
        }
    }
}

/// `k log h(η)` with derivatives, for the canonical positive-mean families.
fn log_mean_terms(family: &ObservationFamily, eta: f64, k: f64) -> (f64, f64, f64) {
    use crate::special::{log1pexp, logistic};
    match family {
        ObservationFamily::BernoulliLogit | ObservationFamily::BinomialLogit { .. } => {
            let n = match family {
                ObservationFamily::BinomialLogit { trials } => *trials as f64,
                _ => 1.0,
            };
            // log(n σ(η)) = log n - log(1 + e^{-η})
            let s = logistic(eta);
            (k * (n.ln() - log1pexp(-eta)), k * (1.0 - s), -k * s * (1.0 - s))
        }
        ObservationFamily::PoissonLog => (k * eta, k, 0.0),
        _ => unreachable!("handled separately"),
    }
}

/// `log v(η)` with derivatives.
fn log_var_terms(family: &ObservationFamily, eta: f64) -> (f64, f64, f64) {
    use crate::special::{log1pexp, logistic};
    match family {
        ObservationFamily::BernoulliLogit | ObservationFamily::BinomialLogit { .. } => {
            let n = match family {
                ObservationFamily::BinomialLogit { trials } => *trials as f64,
                _ => 1.0,
            };
            // log(n σ(1-σ)) = log n - log(1+e^{-η}) - log(1+e^{η})
            let s = logistic(eta);
            (n.ln() - log1pexp(-eta) - log1pexp(eta), 1.0 - 2.0 * s, -2.0 * s * (1.0 - s))
        }
        ObservationFamily::PoissonLog => (eta, 1.0, 0.0),
        _ => unreachable!("handled separately"),
    }
}

/// Response mean, variance and (ordinal) category probabilities for
/// `η ~ N(mean, var)`.
pub fn response_moments(family: &ObservationFamily, mean: f64, var: f64, gh: &GaussHermite) -> (f64, f64, Option<Vec<f64>>) {
    if let ObservationFamily::OrdinalProbit { thresholds, noise_var } = family {
        // probit convolved with a Gaussian is again a probit: exact
        let sd = (noise_var + var.max(0.0)).sqrt();
        let mut probs = Vec::with_capacity(thresholds.len() + 1);
        let mut prev = 0.0;
        for b in thresholds.iter().map(Some).chain([None]) {
            let cdf = b.map_or(1.0, |b| norm_cdf((b - mean) / sd));
            probs.push((cdf - prev).max(0.0));
            prev = cdf;
        }
        let m: f64 = probs.iter().enumerate().map(|(j, p)| j as f64 * p).sum();
        let s: f64 = probs.iter().enumerate().map(|(j, p)| (j * j) as f64 * p).sum();
        return (m, (s - m * m).max(0.0), Some(probs));
    }
    let [eh, eh2, ev] = gh.expect_many(mean, var, |eta| {
        let h = family.mean_response(eta);
        [h, h * h, family.var_response(eta)]
    });
    (eh, (ev + eh2 - eh * eh).max(0.0), None)
}

/// `(mean, var)` of `τ*` at `x_star` given the observed batch.
pub fn latent_posterior_at(model: &FittedModel, batch_obs: &FunctionalBatch, x_star: &[f64]) -> Result<(f64, f64)> {
    let bp = BatchPredictor::new(model, std::slice::from_ref(batch_obs))?;
    let l = bp.latent_at(x_star, None)?;
    Ok((l.mean, l.var))
}

pub fn predict_response(model: &FittedModel, batch_obs: &FunctionalBatch, t_star: f64, x_star: &[f64], u_star: &DVector<f64>) -> Result<PredictiveDistribution> {
    BatchPredictor::new(model, std::slice::from_ref(batch_obs))?.predict(TestPoint {
        t: t_star,
        x: x_star,
        u: u_star,
        w: None,
    })
}

pub fn predict_response_laplace(model: &FittedModel, batch_obs: &FunctionalBatch, t_star: f64, x_star: &[f64], u_star: &DVector<f64>) -> Result<PredictiveDistribution> {
    BatchPredictor::new(model, std::slice::from_ref(batch_obs))?.predict_laplace(TestPoint {
        t: t_star,
        x: x_star,
        u: u_star,
        w: None,
    })
}

/// Mixture moments `(Σ ω m, Σ ω v + Σ ω m² - (Σ ω m)²)`.
pub fn mixture_moments(means: &[f64], vars: &[f64], weights: &[f64]) -> (f64, f64) {
    let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
    let within: f64 = weights.iter().zip(vars).map(|(w, v)| w * v).sum();
    let second: f64 = weights.iter().zip(means).map(|(w, m)| w * m * m).sum();
    (mean, (within + second - mean * mean).max(0.0))
}

fn check_weights(w: &[f64], m: usize) -> Result<()> {
    if w.len() != m {
        return Err(Error::InvalidParameter(format!("{} weights for {m} training groups", w.len())));
    }
    if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// Prediction for a batch with no observations: the weighted mixture of
/// the per-training-batch predictive distributions (equal weights when
/// `weights` is `None`).
pub fn predict_new_batch(model: &FittedModel, t_star: f64, x_star: &[f64], u_star: &DVector<f64>, weights: Option<&[f64]>) -> Result<PredictiveDistribution> {
    let m = model.per_batch.len();
    let equal;
    let w = match weights {
        Some(w) => w,
        None => {
            equal = vec![1.0 / m as f64; m];
            &equal
        }
    };
    check_weights(w, m)?;
    let mut parts = Vec::with_capacity(m);
    for k in 0..m {
        let bp = BatchPredictor::from_training(model, k)?;
        parts.push(bp.predict(TestPoint {
            t: t_star,
            x: x_star,
            u: u_star,
            w: None,
        })?);
    }
    Ok(mix(&parts, w))
}

/// Combines per-batch predictive distributions with weights.
pub fn mix(parts: &[PredictiveDistribution], w: &[f64]) -> PredictiveDistribution {
    let get = |f: fn(&PredictiveDistribution) -> f64| parts.iter().map(f).collect::<Vec<f64>>();
    let (response_mean, response_var) = mixture_moments(&get(|p| p.response_mean), &get(|p| p.response_var), w);
    let (latent_mean, latent_var) = mixture_moments(&get(|p| p.latent_mean), &get(|p| p.latent_var), w);
    let category_probs = parts[0].category_probs.as_ref().map(|first| {
        let mut acc = vec![0.0; first.len()];
        for (p, wk) in parts.iter().zip(w) {
            for (a, q) in acc.iter_mut().zip(p.category_probs.as_ref().expect("same family")) {
                *a += wk * q;
            }
        }
        acc
    });
    PredictiveDistribution {
        mean_function: parts[0].mean_function,
        latent_mean,
        latent_var,
        response_mean,
        response_var,
        category_probs,
    }
}

/// Predicted class: Bernoulli thresholds the mean at 0.5 (0.5 itself maps
/// to 0); ordinal takes the most probable category (ties to the lower one);
/// count families round the mean.
pub fn classify(pred: &PredictiveDistribution, family: &ObservationFamily) -> f64 {
    match family {
        ObservationFamily::BernoulliLogit => (pred.response_mean > 0.5) as u8 as f64,
        ObservationFamily::OrdinalProbit { .. } => {
            let probs = pred.category_probs.as_deref().unwrap_or(&[]);
            let mut best = 0;
            for (j, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = j;
                }
            }
            best as f64
        }
        _ => pred.response_mean.round(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::fit::{model_at, BasisDim, ModelSpec};
    use crate::kernels::{gram_matrix, KernelKind, KernelParams};
    use crate::simulate::sim_binomial_se;

    fn bernoulli_model(kind: KernelKind, theta: KernelParams, jitter: f64) -> FittedModel {
        let sim = sim_binomial_se(4, 15, 7).unwrap();
        let batches: Vec<FunctionalBatch> = sim
            .data
            .batches
            .iter()
            .map(|b| {
                let z = b.responses.iter().map(|&v| (v > 1.0) as u8 as f64).collect();
                FunctionalBatch::new(b.batch_id.clone(), b.times.clone(), z, b.covariates.clone(), b.scalar_covariates.clone()).unwrap()
            })
            .collect();
        let ds = Dataset::from_batches(batches, &ObservationFamily::BernoulliLogit).unwrap();
        let spec = ModelSpec { kernel: kind, basis_dim: BasisDim::Fixed(5), jitter, ..Default::default() };
        let coef = DMatrix::from_fn(5, 1, |d, _| 0.2 * d as f64 - 0.4);
        model_at(&ds, &spec, &coef, &theta).unwrap()
    }

    fn gaussian_model(noise: f64) -> FittedModel {
        let sim = sim_binomial_se(3, 12, 11).unwrap();
        let fam = ObservationFamily::Gaussian { noise_var: noise };
        let batches: Vec<FunctionalBatch> = sim
            .data
            .batches
            .iter()
            .zip(&sim.truth.latent)
            .map(|(b, y)| FunctionalBatch::new(b.batch_id.clone(), b.times.clone(), y.as_slice().to_vec(), b.covariates.clone(), b.scalar_covariates.clone()).unwrap())
            .collect();
        let ds = Dataset::from_batches(batches, &fam).unwrap();
        let spec = ModelSpec { family: fam, basis_dim: BasisDim::Fixed(4), ..Default::default() };
        let coef = DMatrix::from_fn(4, 1, |d, _| 0.1 * d as f64);
        model_at(&ds, &spec, &coef, &KernelParams::se_linear_1d(1.0, 0.5, 0.05)).unwrap()
    }

    #[test]
    fn training_inputs_reproduce_the_posterior() {
        // at a training input a = e_i, so the prediction is the i-th marginal
        let m = bernoulli_model(KernelKind::SeLinear, KernelParams::se_linear_1d(1.0, 0.3, 0.05), 1e-10);
        let b = &m.training[1];
        let bp = BatchPredictor::new(&m, std::slice::from_ref(b)).unwrap();
        let cov = bp.posterior().posterior_cov();
        for i in [0, 6, 14] {
            let l = bp.latent_at(&[b.covariates[(i, 0)]], None).unwrap();
            assert!((l.mean - bp.posterior().mode[i]).abs() < 1e-6, "{} vs {}", l.mean, bp.posterior().mode[i]);
            assert!((l.explained_var - cov[(i, i)]).abs() < 1e-6);
            assert!(l.conditional_var < 1e-6);
        }
    }

    #[test]
    fn far_inputs_revert_to_the_prior() {
        let theta = KernelParams::from_natural(KernelKind::Matern32, 1, &[0.5, 0.7]).unwrap();
        let m = bernoulli_model(KernelKind::Matern32, theta, 1e-6);
        let bp = BatchPredictor::new(&m, &m.training[..1]).unwrap();
        let l = bp.latent_at(&[200.0], None).unwrap();
        assert!(l.mean.abs() < 1e-12);
        assert!((l.var - 0.7).abs() < 1e-10);
    }

    #[test]
    fn gaussian_matches_gp_regression() {
        let noise = 0.05;
        let m = gaussian_model(noise);
        let b = &m.training[2];
        let xs = 0.37;
        let bp = BatchPredictor::new(&m, std::slice::from_ref(b)).unwrap();
        let l = bp.latent_at(&[xs], None).unwrap();

        let c = gram_matrix(&b.covariates, &m.theta, m.jitter).unwrap();
        let cs = cross_cov(&b.covariates, &[xs], &m.theta).unwrap();
        let mu = m.mean_curve(&b.times, &b.scalar_covariates);
        let r = DVector::from_vec(b.responses.clone()) - mu;
        let k = (c + DMatrix::identity(b.len(), b.len()) * noise).cholesky().unwrap();
        let mean = cs.dot(&k.solve(&r));
        let var = m.theta.variance_at(&[xs]) - cs.dot(&k.solve(&cs));
        assert!((l.mean - mean).abs() < 1e-8, "{} vs {mean}", l.mean);
        assert!((l.var - var).abs() < 1e-8, "{} vs {var}", l.var);
    }

    #[test]
    fn gaussian_laplace_route_is_exact() {
        let m = gaussian_model(0.05);
        let bp = BatchPredictor::new(&m, &m.training[..1]).unwrap();
        let u = DVector::from_element(1, 1.0);
        let p = TestPoint { t: 0.4, x: &[0.4], u: &u, w: None };
        let q = bp.predict(p).unwrap();
        let l = bp.predict_laplace(p).unwrap();
        assert!((q.response_mean - l.response_mean).abs() < 1e-6, "{} {}", q.response_mean, l.response_mean);
        assert!((q.response_var - l.response_var).abs() < 1e-5, "{} {}", q.response_var, l.response_var);
    }

    #[test]
    fn laplace_route_close_to_quadrature() {
        let m = bernoulli_model(KernelKind::SeLinear, KernelParams::se_linear_1d(1.0, 0.3, 0.05), 1e-6);
        let bp = BatchPredictor::new(&m, &m.training[..1]).unwrap();
        let u = DVector::from_element(1, 1.0);
        for t in [-3.0, 0.1, 2.5] {
            let p = TestPoint { t, x: &[t], u: &u, w: None };
            let q = bp.predict(p).unwrap();
            let l = bp.predict_laplace(p).unwrap();
            assert!((q.response_mean - l.response_mean).abs() < 5e-3, "{} {}", q.response_mean, l.response_mean);
        }
    }

    /// Brute-force integral on a fine grid over ±10 sd.
    fn grid_expect(mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let sd = var.sqrt();
        let n = 20_000;
        let h = 20.0 * sd / n as f64;
        (0..=n)
            .map(|i| {
                let x = mean - 10.0 * sd + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * h * f(x) * (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
            })
            .sum()
    }

    #[test]
    fn response_moments_match_brute_force() {
        let gh = GaussHermite::new(DEFAULT_NODES);
        let fams = [
            ObservationFamily::BernoulliLogit,
            ObservationFamily::BinomialLogit { trials: 7 },
            ObservationFamily::PoissonLog,
            ObservationFamily::ordinal(vec![-0.3, 0.4, 1.2]).unwrap(),
        ];
        for fam in &fams {
            for (mean, var) in [(0.3, 0.2), (-1.0, 1.5)] {
                let (m, v, probs) = response_moments(fam, mean, var, &gh);
                let eh = grid_expect(mean, var, |e| fam.mean_response(e));
                let eh2 = grid_expect(mean, var, |e| fam.mean_response(e).powi(2));
                let ev = grid_expect(mean, var, |e| fam.var_response(e));
                assert!((m - eh).abs() < 1e-6, "{fam:?} {m} {eh}");
                assert!((v - (ev + eh2 - eh * eh)).abs() < 1e-6, "{fam:?}");
                if let Some(p) = probs {
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    let p0 = grid_expect(mean, var, |e| fam.category_probs(e).unwrap()[0]);
                    assert!((p[0] - p0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mixture_law_of_total_variance() {
        let (m, v) = mixture_moments(&[1.0, 3.0], &[0.5, 1.0], &[0.25, 0.75]);
        assert!((m - 2.5).abs() < 1e-12);
        // 0.875 within + 0.75 between
        assert!((v - (0.875 + 0.25 * 1.5f64.powi(2) + 0.75 * 0.5f64.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn new_batch_is_the_equal_weight_mixture() {
        let m = bernoulli_model(KernelKind::SeLinear, KernelParams::se_linear_1d(1.0, 0.3, 0.05), 1e-6);
        let u = DVector::from_element(1, 1.0);
        let p = TestPoint { t: 0.5, x: &[0.5], u: &u, w: None };
        let parts: Vec<_> = (0..m.training.len()).map(|k| BatchPredictor::from_training(&m, k).unwrap().predict(p).unwrap()).collect();
        let want = mix(&parts, &[0.25; 4]);
        let got = predict_new_batch(&m, 0.5, &[0.5], &u, None).unwrap();
        assert!((got.response_mean - want.response_mean).abs() < 1e-14);
        assert!((got.response_var - want.response_var).abs() < 1e-14);
        assert!(predict_new_batch(&m, 0.5, &[0.5], &u, Some(&[0.5, 0.5, 0.5, -0.5])).is_err());
        assert!(predict_new_batch(&m, 0.5, &[0.5], &u, Some(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn stored_and_fresh_posteriors_agree() {
        let m = bernoulli_model(KernelKind::SeLinear, KernelParams::se_linear_1d(1.0, 0.3, 0.05), 1e-6);
        let a = BatchPredictor::from_training(&m, 2).unwrap().latent_at(&[1.1], None).unwrap();
        let b = BatchPredictor::new(&m, &m.training[2..3]).unwrap().latent_at(&[1.1], None).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-8 && (a.var - b.var).abs() < 1e-8);
    }

    #[test]
    fn classification_rules() {
        let mk = |m: f64, probs: Option<Vec<f64>>| PredictiveDistribution {
            mean_function: 0.0,
            latent_mean: 0.0,
            latent_var: 0.0,
            response_mean: m,
            response_var: 0.0,
            category_probs: probs,
        };
        let b = ObservationFamily::BernoulliLogit;
        assert_eq!(classify(&mk(0.5, None), &b), 0.0);
        assert_eq!(classify(&mk(0.51, None), &b), 1.0);
        let o = ObservationFamily::ordinal(vec![0.0, 1.0]).unwrap();
        assert_eq!(classify(&mk(1.0, Some(vec![0.4, 0.4, 0.2])), &o), 0.0);
        assert_eq!(classify(&mk(1.0, Some(vec![0.2, 0.3, 0.5])), &o), 2.0);
        assert_eq!(classify(&mk(3.4, None), &ObservationFamily::PoissonLog), 3.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = bernoulli_model(KernelKind::SeLinear, KernelParams::se_linear_1d(1.0, 0.3, 0.05), 1e-6);
        let bp = BatchPredictor::new(&m, &m.training[..1]).unwrap();
        assert!(matches!(bp.latent_at(&[0.1, 0.2], None), Err(Error::Dimension(_))));
    }
}
