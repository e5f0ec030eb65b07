//! Observation models: log-density of a response given the latent linear
//! predictor `η = μ + τ`, its first two derivatives in `η`, and the
//! response mean and variance.

use std::fmt;


use crate::error::{Error, Result};
use crate::special::{log1pexp, log_norm_cdf_diff, log_norm_pdf, logistic, norm_cdf};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest curvature kept when a log-density is locally non-concave.
pub const MIN_CURVATURE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum ObservationFamily {
    /// `z ∈ {0,1}`, logit link.
    BernoulliLogit,
    /// `z ∈ {0..trials}` successes, logit link.
    BinomialLogit { trials: u32 },
    /// `z ∈ {0,1,2,...}`, log link.
    PoissonLog,
    /// `z ∈ {0..r-1}` with `P(z = j | η) = Φ((b_{j+1}-η)/s) - Φ((b_j-η)/s)`,
    /// `b_0 = -∞`, `b_r = +∞`, and fixed probit noise variance `s²`
    /// (`noise_var`, the family dispersion).
    OrdinalProbit { thresholds: Vec<f64>, noise_var: f64 },
    /// Normal response with identity link and known noise variance. The
    /// latent marginal is then Gaussian in closed form.
    Gaussian { noise_var: f64 },
}

impl fmt::Display for ObservationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl ObservationFamily {
    pub fn ordinal(thresholds: Vec<f64>) -> Result<Self> {
        Self::ordinal_with_noise(thresholds, 1.0)
    }

    pub fn ordinal_with_noise(thresholds: Vec<f64>, noise_var: f64) -> Result<Self> {
        let fam = ObservationFamily::OrdinalProbit {
            thresholds,
            noise_var,
        };
        fam.validate()?;
        Ok(fam)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ObservationFamily::OrdinalProbit {
                thresholds,
                noise_var,
            } => {
                if thresholds.is_empty() {
                    return Err(Error::InvalidParameter("ordinal family needs at least one threshold".into()));
                }
                if thresholds.iter().any(|b| !b.is_finite()) || thresholds.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::InvalidParameter("thresholds must be finite and strictly increasing".into()));
                }
                positive(*noise_var, "ordinal noise variance")
            }
            ObservationFamily::Gaussian { noise_var } => positive(*noise_var, "gaussian noise variance"),
            ObservationFamily::BinomialLogit { trials } if *trials == 0 => {
                Err(Error::InvalidParameter("binomial trials must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Short identifier used in files and on the command line.
    pub fn tag(&self) -> &'static str {
        match self {
            ObservationFamily::BernoulliLogit => "bernoulli",
            ObservationFamily::BinomialLogit { .. } => "binomial",
            ObservationFamily::PoissonLog => "poisson",
            ObservationFamily::OrdinalProbit { .. } => "ordinal",
            ObservationFamily::Gaussian { .. } => "gaussian",
        }
    }

    /// Dispersion `a(φ)`; 1 for the canonical discrete families.
    pub fn dispersion(&self) -> f64 {
        match self {
            ObservationFamily::OrdinalProbit { noise_var, .. } | ObservationFamily::Gaussian { noise_var } => {
                *noise_var
            }
            _ => 1.0,
        }
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        match self {
            ObservationFamily::OrdinalProbit { thresholds, .. } => Some(thresholds),
            _ => None,
        }
    }

    /// Number of categories for the ordinal family.
    pub fn n_categories(&self) -> Option<usize> {
        self.thresholds().map(|b| b.len() + 1)
    }

    pub fn with_thresholds(&self, thresholds: Vec<f64>) -> Result<Self> {
        match self {
            ObservationFamily::OrdinalProbit { noise_var, .. } => Self::ordinal_with_noise(thresholds, *noise_var),
            _ => Err(Error::InvalidParameter(format!("{} family has no thresholds", self.tag()))),
        }
    }

    /// Whether the response is categorical (classification metrics apply).
    pub fn is_categorical(&self) -> bool {
        matches!(
            self,
            ObservationFamily::BernoulliLogit | ObservationFamily::OrdinalProbit { .. }
        )
    }

    /// Checks that `z` lies in the support of the family.
    pub fn check_response(&self, z: f64) -> std::result::Result<(), String> {
        if !z.is_finite() {
            return Err(format!("response {z} is not finite"));
        }
        let integral = z == z.round();
        match self {
            ObservationFamily::BernoulliLogit => {
                if z == 0.0 || z == 1.0 {
                    Ok(())
                } else {
                    Err(format!("bernoulli response must be 0 or 1, got {z}"))
                }
            }
            ObservationFamily::BinomialLogit { trials } => {
                if integral && z >= 0.0 && z <= *trials as f64 {
                    Ok(())
                } else {
                    Err(format!("binomial response must be an integer in 0..={trials}, got {z}"))
                }
            }
            ObservationFamily::PoissonLog => {
                if integral && z >= 0.0 {
                    Ok(())
                } else {
                    Err(format!("poisson response must be a non-negative integer, got {z}"))
                }
            }
            ObservationFamily::OrdinalProbit { thresholds, .. } => {
                let r = thresholds.len() + 1;
                if integral && z >= 0.0 && (z as usize) < r {
                    Ok(())
                } else {
                    Err(format!("ordinal response must be an integer in 0..{r}, got {z}"))
                }
            }
            ObservationFamily::Gaussian { .. } => Ok(()),
        }
    }

    fn checked(&self, z: f64) -> Result<()> {
        self.check_response(z).map_err(Error::InvalidParameter)
    }

    /// `log p(z | η)`.
    pub fn log_density(&self, z: f64, eta: f64) -> Result<f64> {
        self.checked(z)?;
        Ok(self.terms(z, eta).0)
    }

    /// `d/dη log p(z | η)`.
    pub fn dlog_density(&self, z: f64, eta: f64) -> Result<f64> {
        self.checked(z)?;
        Ok(self.terms(z, eta).1)
    }

    /// `d²/dη² log p(z | η)`.
    pub fn d2log_density(&self, z: f64, eta: f64) -> Result<f64> {
        self.checked(z)?;
        Ok(self.terms(z, eta).2)
    }

    /// Log-density and its first two derivatives, without range checks.
    pub fn terms(&self, z: f64, eta: f64) -> (f64, f64, f64) {
        match self {
            ObservationFamily::BernoulliLogit => {
                let p = logistic(eta);
                (z * eta - log1pexp(eta), z - p, -p * (1.0 - p))
            }
            ObservationFamily::BinomialLogit { trials } => {
                let n = *trials as f64;
                let p = logistic(eta);
                let lc = ln_factorial(n) - ln_factorial(z) - ln_factorial(n - z);
                (z * eta - n * log1pexp(eta) + lc, z - n * p, -n * p * (1.0 - p))
            }
            ObservationFamily::PoissonLog => {
                let mu = eta.exp();
                (z * eta - mu - ln_factorial(z), z - mu, -mu)
            }
            ObservationFamily::Gaussian { noise_var } => {
                let r = z - eta;
                (
                    -0.5 * r * r / noise_var - 0.5 * (LN_2PI + noise_var.ln()),
                    r / noise_var,
                    -1.0 / noise_var,
                )
            }
            ObservationFamily::OrdinalProbit {
                thresholds,
                noise_var,
            } => {
                let s = noise_var.sqrt();
                let j = z as usize;
                let lo = if j == 0 {
                    f64::NEG_INFINITY
                } else {
                    (thresholds[j - 1] - eta) / s
                };
                let hi = if j == thresholds.len() {
                    f64::INFINITY
                } else {
                    (thresholds[j] - eta) / s
                };
                let logp = log_norm_cdf_diff(lo, hi);
                // φ(x)/P and x φ(x)/P in log space; zero at infinite ends
                let ratio = |x: f64| {
                    if x.is_finite() {
                        (log_norm_pdf(x) - logp).exp()
                    } else {
                        0.0
                    }
                };
                let (rlo, rhi) = (ratio(lo), ratio(hi));
                let d1 = (rlo - rhi) / s;
                let xlo = if lo.is_finite() { lo * rlo } else { 0.0 };
                let xhi = if hi.is_finite() { hi * rhi } else { 0.0 };
                let d2 = (xlo - xhi) / noise_var - d1 * d1;
                (logp, d1, d2)
            }
        }
    }

    /// Ordinal category probabilities at latent value `η`.
    pub fn category_probs(&self, eta: f64) -> Option<Vec<f64>> {
        let ObservationFamily::OrdinalProbit {
            thresholds,
            noise_var,
        } = self
        else {
            return None;
        };
        let s = noise_var.sqrt();
        let r = thresholds.len() + 1;
        let mut probs = Vec::with_capacity(r);
        let mut prev = 0.0;
        for j in 0..r {
            let cdf = if j + 1 == r {
                1.0
            } else {
                norm_cdf((thresholds[j] - eta) / s)
            };
            probs.push((cdf - prev).max(0.0));
            prev = cdf;
        }
        Some(probs)
    }

    /// `E(z | η) = h(η)`.
    pub fn mean_response(&self, eta: f64) -> f64 {
        match self {
            ObservationFamily::BernoulliLogit => logistic(eta),
            ObservationFamily::BinomialLogit { trials } => *trials as f64 * logistic(eta),
            ObservationFamily::PoissonLog => eta.exp(),
            ObservationFamily::Gaussian { .. } => eta,
            ObservationFamily::OrdinalProbit { .. } => {
                let p = self.category_probs(eta).expect("ordinal");
                p.iter().enumerate().map(|(j, pj)| j as f64 * pj).sum()
            }
        }
    }

    /// `Var(z | η) = b''(α) a(φ)` at the canonical `α = η`; for the ordinal
    /// family the variance of the category index.
    pub fn var_response(&self, eta: f64) -> f64 {
        match self {
            ObservationFamily::BernoulliLogit => {
                let p = logistic(eta);
                p * (1.0 - p)
            }
            ObservationFamily::BinomialLogit { trials } => {
                let p = logistic(eta);
                *trials as f64 * p * (1.0 - p)
            }
            ObservationFamily::PoissonLog => eta.exp(),
            ObservationFamily::Gaussian { noise_var } => *noise_var,
            ObservationFamily::OrdinalProbit { .. } => {
                let p = self.category_probs(eta).expect("ordinal");
                let m: f64 = p.iter().enumerate().map(|(j, pj)| j as f64 * pj).sum();
                let m2: f64 = p.iter().enumerate().map(|(j, pj)| (j * j) as f64 * pj).sum();
                (m2 - m * m).max(0.0)
            }
        }
    }

    /// `b''(α)` for the canonical families (no dispersion factor).
    pub fn b_second(&self, alpha: f64) -> Option<f64> {
        match self {
            ObservationFamily::BernoulliLogit | ObservationFamily::BinomialLogit { .. } | ObservationFamily::PoissonLog => {
                Some(self.var_response(alpha))
            }
            ObservationFamily::Gaussian { .. } => Some(1.0),
            ObservationFamily::OrdinalProbit { .. } => None,
        }
    }
}

/// `ln(k!)`, exact summation for small `k`.
fn ln_factorial(k: f64) -> f64 {
    if k < 2.0 {
        0.0
    } else if k <= 30.0 {
        (2..=k as u32).map(|i| (i as f64).ln()).sum()
    } else {
        libm::lgamma(k + 1.0)
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be positive, got {v}")))
    }
}

/// Unconstrained encoding of increasing thresholds:
/// `(b_1, log(b_2 - b_1), ..., log(b_{r-1} - b_{r-2}))`.
pub fn encode_thresholds(b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(b.len());
    if let Some(first) = b.first() {
        out.push(*first);
        out.extend(b.windows(2).map(|w| (w[1] - w[0]).ln()));
    }
    out
}

pub fn decode_thresholds(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let mut acc = 0.0;
    for (i, r) in raw.iter().enumerate() {
        acc = if i == 0 { *r } else { acc + r.exp() };
        out.push(acc);
    }
    out
}
