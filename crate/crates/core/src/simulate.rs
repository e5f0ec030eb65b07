//! Seeded data generators for the simulation studies, and evaluation
//! metrics.
//!
//! Every generator draws batch `m` from its own ChaCha8 stream:
//! `ChaCha8Rng::seed_from_u64(seed)` followed by `set_stream(m)`. Batches
//! are therefore reproducible individually and independent of how many are
//! generated or in which order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{Dataset, FunctionalBatch};
use crate::error::{Error, Result};
use crate::family::ObservationFamily;
use crate::kernels::{gram_matrix, KernelParams};
use crate::linalg::{cholesky, DEFAULT_JITTER};
use crate::special::logistic;

/// RNG for batch `m` under `seed`.
pub fn batch_rng(seed: u64, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Bernoulli responses, SE + linear latent covariance, sine-cubed mean.
    BinomialSe,
    /// Bernoulli responses, covariance from orthonormal polynomials.
    Chebyshev,
    /// Three ordered categories from a thresholded latent curve.
    Ordinal,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binomial_se" | "binomial" | "se" => Ok(Scenario::BinomialSe),
            "chebyshev" => Ok(Scenario::Chebyshev),
            "ordinal" => Ok(Scenario::Ordinal),
            _ => Err(Error::InvalidParameter(format!(
                "unknown scenario {s:?} (binomial_se|chebyshev|ordinal)"
            ))),
        }
    }
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::BinomialSe => "binomial_se",
            Scenario::Chebyshev => "chebyshev",
            Scenario::Ordinal => "ordinal",
        }
    }

    pub fn family(self) -> ObservationFamily {
        match self {
            Scenario::Ordinal => ObservationFamily::OrdinalProbit {
                thresholds: ORDINAL_THRESHOLDS.to_vec(),
                noise_var: 1.0,
            },
            _ => ObservationFamily::BernoulliLogit,
        }
    }

    pub fn generate(self, m: usize, n: usize, seed: u64) -> Result<Simulated> {
        match self {
            Scenario::BinomialSe => sim_binomial_se(m, n, seed),
            Scenario::Chebyshev => sim_chebyshev(m, n, seed),
            Scenario::Ordinal => sim_ordinal(m, n, seed),
        }
    }
}

pub const ORDINAL_THRESHOLDS: [f64; 2] = [0.2, 0.7];

/// Hidden quantities behind a simulated dataset.
#[derive(Debug, Clone)]
pub struct SimTruth {
    /// Latent `y_m = mean + τ_m` at each batch's times.
    pub latent: Vec<DVector<f64>>,
    /// True mean at each batch's times.
    pub mean: Vec<DVector<f64>>,
    /// Generating kernel (absent for the polynomial covariance).
    pub theta: Option<KernelParams>,
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    pub truth: SimTruth,
}

/// `n` equally spaced points strictly inside `(lo, hi)` (cell midpoints).
pub fn open_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..n).map(|i| lo + h * (i as f64 + 0.5)).collect()
}

/// `n` equally spaced points on `[lo, hi]` including both ends.
pub fn closed_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn check_sizes(m: usize, n: usize) -> Result<()> {
    if m < 1 || n < 2 {
        return Err(Error::InvalidParameter(format!("need M >= 1 and N >= 2, got M={m}, N={n}")));
    }
    Ok(())
}

fn draw(rng: &mut ChaCha8Rng, l: &DMatrix<f64>) -> DVector<f64> {
    let e = DVector::from_fn(l.nrows(), |_, _| StandardNormal.sample(rng));
    l * e
}

/// Shared driver: latent draws `mean + L ε` per batch, responses from
/// `respond`.
fn simulate_common<F>(
    m: usize,
    times: &[f64],
    mean: DVector<f64>,
    cov: &DMatrix<f64>,
    seed: u64,
    family: &ObservationFamily,
    respond: F,
) -> Result<(Dataset, Vec<DVector<f64>>)>
where
    F: Fn(&mut ChaCha8Rng, f64) -> f64 + Sync,
{
    let n = times.len();
    let mut c = cov.clone();
    for i in 0..n {
        c[(i, i)] += DEFAULT_JITTER;
    }
    let l = cholesky(c)?.l();
    let x = DMatrix::from_column_slice(n, 1, times);
    let out: Vec<(FunctionalBatch, DVector<f64>)> = (0..m)
        .into_par_iter()
        .map(|k| {
            let mut rng = batch_rng(seed, k);
            let y = &mean + draw(&mut rng, &l);
            let z: Vec<f64> = y.iter().map(|&v| respond(&mut rng, v)).collect();
            let b = FunctionalBatch::new(format!("b{}", k + 1), times.to_vec(), z, x.clone(), DVector::from_element(1, 1.0))
                .expect("generated batch is consistent");
            (b, y)
        })
        .collect();
    let (batches, latent): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((Dataset::from_batches(batches, family)?, latent))
}

fn bernoulli(rng: &mut ChaCha8Rng, y: f64) -> f64 {
    if rng.random::<f64>() < logistic(y) {
        1.0
    } else {
        0.0
    }
}

pub fn binomial_se_mean(t: f64) -> f64 {
    0.8 * (0.5 * t).sin().powi(3)
}

/// SE + linear latent process with `(w, v, a) = (1, 0.04, 0.1)` and mean
/// `0.8 sin(0.5 t)³` on `N` equally spaced points in `(-4, 4)`; `x = t`;
/// Bernoulli responses through the logit link.
pub fn sim_binomial_se(m: usize, n: usize, seed: u64) -> Result<Simulated> {
    check_sizes(m, n)?;
    let theta = KernelParams::se_linear_1d(1.0, 0.04, 0.1);
    let times = open_grid(-4.0, 4.0, n);
    let x = DMatrix::from_column_slice(n, 1, &times);
    let cov = gram_matrix(&x, &theta, 0.0)?;
    let mean = DVector::from_iterator(n, times.iter().map(|&t| binomial_se_mean(t)));
    let fam = ObservationFamily::BernoulliLogit;
    let (data, latent) = simulate_common(m, &times, mean.clone(), &cov, seed, &fam, bernoulli)?;
    Ok(Simulated {
        data,
        truth: SimTruth {
            latent,
            mean: vec![mean; m],
            theta: Some(theta),
            thresholds: None,
        },
    })
}

/// Clustered variant of [`sim_binomial_se`]: `clusters × per_cluster`
/// batches whose latent curves add a random intercept `b_c ~ N(0, γ)`
/// shared within each cluster (`w = 1`). Cluster `c` uses stream `c`.
pub fn sim_clustered(clusters: usize, per_cluster: usize, n: usize, gamma: f64, seed: u64) -> Result<Simulated> {
    check_sizes(clusters * per_cluster, n)?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!("random-effect variance must be non-negative, got {gamma}")));
    }
    let theta = KernelParams::se_linear_1d(1.0, 0.04, 0.1);
    let times = open_grid(-4.0, 4.0, n);
    let x = DMatrix::from_column_slice(n, 1, &times);
    let l = cholesky(gram_matrix(&x, &theta, DEFAULT_JITTER)?)?.l();
    let mean = DVector::from_iterator(n, times.iter().map(|&t| binomial_se_mean(t)));
    let fam = ObservationFamily::BernoulliLogit;
    let mut batches = Vec::new();
    let mut latent = Vec::new();
    for c in 0..clusters {
        let mut rng = batch_rng(seed, c);
        let e: f64 = StandardNormal.sample(&mut rng);
        let b = gamma.sqrt() * e;
        for j in 0..per_cluster {
            let y = mean.add_scalar(b) + draw(&mut rng, &l);
            let z: Vec<f64> = y.iter().map(|&v| bernoulli(&mut rng, v)).collect();
            let id = format!("b{}", c * per_cluster + j + 1);
            let batch = FunctionalBatch::new(id, times.clone(), z, x.clone(), DVector::from_element(1, 1.0))?
                .with_random_effects(DMatrix::from_element(n, 1, 1.0), format!("c{}", c + 1))?;
            batches.push(batch);
            latent.push(y);
        }
    }
    let m = batches.len();
    Ok(Simulated {
        data: Dataset::from_batches(batches, &fam)?,
        truth: SimTruth {
            latent,
            mean: vec![mean; m],
            theta: Some(theta),
            thresholds: None,
        },
    })
}

/// Orthonormal polynomial basis on `grid`: column `j` has degree `j` and
/// `Σ_t φ_j(t)² = 1`. Built by modified Gram–Schmidt (two passes) on
/// monomials of the grid mapped to `[-1, 1]`.
pub fn chebyshev_basis(grid: &[f64], k: usize) -> DMatrix<f64> {
    let n = grid.len();
    let (lo, hi) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    let s: Vec<f64> = grid.iter().map(|&t| if hi > lo { 2.0 * (t - lo) / (hi - lo) - 1.0 } else { 0.0 }).collect();
    let mut q = DMatrix::<f64>::zeros(n, k);
    for j in 0..k {
        // three-term style start: previous column times s keeps it stable
        let mut v = if j == 0 {
            DVector::from_element(n, 1.0)
        } else {
            DVector::from_fn(n, |i, _| q[(i, j - 1)] * s[i])
        };
        for _ in 0..2 {
            for i in 0..j {
                let c = q.column(i).dot(&v);
                v.axpy(-c, &q.column(i), 1.0);
            }
        }
        let nv = v.norm();
        q.column_mut(j).copy_from(&(v / nv));
    }
    q
}

pub fn chebyshev_mean(t: f64) -> f64 {
    2.0 * 0.4f64.sqrt() * (0.4 * std::f64::consts::PI * t).sin()
}

/// Covariance `Σ_j α_j φ_j φ_jᵀ` with `α_j = j^{-3/2}`, `j = 1..k`.
pub fn chebyshev_cov(grid: &[f64], k: usize) -> DMatrix<f64> {
    let phi = chebyshev_basis(grid, k);
    let mut scaled = phi.clone();
    for j in 0..k {
        scaled.column_mut(j).scale_mut(((j + 1) as f64).powf(-1.5));
    }
    scaled * phi.transpose()
}

/// Mean `2√0.4 sin(0.4πt)` on `N` equally spaced points in `[0, 5]`,
/// covariance from the first 10 orthonormal polynomials, Bernoulli
/// responses.
pub fn sim_chebyshev(m: usize, n: usize, seed: u64) -> Result<Simulated> {
    check_sizes(m, n)?;
    let times = closed_grid(0.0, 5.0, n);
    let cov = chebyshev_cov(&times, 10.min(n));
    let mean = DVector::from_iterator(n, times.iter().map(|&t| chebyshev_mean(t)));
    let fam = ObservationFamily::BernoulliLogit;
    let (data, latent) = simulate_common(m, &times, mean.clone(), &cov, seed, &fam, bernoulli)?;
    Ok(Simulated {
        data,
        truth: SimTruth {
            latent,
            mean: vec![mean; m],
            theta: None,
            thresholds: None,
        },
    })
}

pub fn ordinal_mean(x: f64) -> f64 {
    1.0 / (1.0 + (-1.5 * x).exp())
}

/// Category of `y` for increasing thresholds: `z = j` when
/// `b_j < y ≤ b_{j+1}`.
pub fn categorize(y: f64, thresholds: &[f64]) -> f64 {
    thresholds.iter().filter(|&&b| y > b).count() as f64
}

/// Latent `1/(1+e^{-1.5x}) + τ` with SE + linear `(w, v, a) = (0.33, 0.0049,
/// 0.01)` on `N` equally spaced points in `(-4, 4)`, cut at 0.2 and 0.7.
pub fn sim_ordinal(m: usize, n: usize, seed: u64) -> Result<Simulated> {
    check_sizes(m, n)?;
    let theta = KernelParams::se_linear_1d(0.33, 0.0049, 0.01);
    let times = open_grid(-4.0, 4.0, n);
    let x = DMatrix::from_column_slice(n, 1, &times);
    let cov = gram_matrix(&x, &theta, 0.0)?;
    let mean = DVector::from_iterator(n, times.iter().map(|&t| ordinal_mean(t)));
    let fam = Scenario::Ordinal.family();
    let (data, latent) = simulate_common(m, &times, mean.clone(), &cov, seed, &fam, |_, y| {
        categorize(y, &ORDINAL_THRESHOLDS)
    })?;
    Ok(Simulated {
        data,
        truth: SimTruth {
            latent,
            mean: vec![mean; m],
            theta: Some(theta),
            thresholds: Some(ORDINAL_THRESHOLDS.to_vec()),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub pearson_r: f64,
    pub error_rate: f64,
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Dimension("no predictions".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    let s: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two points".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("an input has zero variance".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn error_rate(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred, truth)?;
    Ok(pred.iter().zip(truth).filter(|(a, b)| a != b).count() as f64 / pred.len() as f64)
}

/// All three metrics; rmse and r on latent values, error rate on classes.
pub fn metrics(pred_latent: &[f64], true_latent: &[f64], pred_class: &[f64], true_class: &[f64]) -> Result<Metrics> {
    Ok(Metrics {
        rmse: rmse(pred_latent, true_latent)?,
        pearson_r: pearson_r(pred_latent, true_latent)?,
        error_rate: error_rate(pred_class, true_class)?,
    })
}
