//! Building blocks of the simulation experiments: observed/test splits,
//! prediction at held-out points and one replication of each study.

use ggpfr::fit::fit;
use ggpfr::predict::{classify, BatchPredictor, PredictiveDistribution, TestPoint};
use ggpfr::simulate::{batch_rng, error_rate, pearson_r, rmse, Scenario, Simulated, ORDINAL_THRESHOLDS};
use ggpfr::{Error, FittedModel, FunctionalBatch, ModelSpec, ObservationFamily, Result};
use rand::seq::index::sample;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// A random subset is observed.
    Interpolate,
    /// The leading portion is observed.
    Extrapolate,
    /// Nothing is observed; predictions mix over the training batches.
    NewBatch,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "interpolate" => Ok(SplitMode::Interpolate),
            "extrapolate" => Ok(SplitMode::Extrapolate),
            "new_batch" => Ok(SplitMode::NewBatch),
            _ => Err(Error::InvalidParameter(format!("unknown mode {s:?} (interpolate|extrapolate|new_batch)"))),
        }
    }
}

/// Observed and test indices (both sorted) for a curve of `n` points; the
/// observed count is `round(fraction · n)`, kept within `1..n`.
pub fn split_indices<R: Rng>(n: usize, mode: SplitMode, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    if mode == SplitMode::NewBatch {
        return (Vec::new(), (0..n).collect());
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut obs: Vec<usize> = match mode {
        SplitMode::Interpolate => sample(rng, n, k).into_vec(),
        _ => (0..k).collect(),
    };
    obs.sort_unstable();
    let mut is_obs = vec![false; n];
    obs.iter().for_each(|&i| is_obs[i] = true);
    let test = (0..n).filter(|&i| !is_obs[i]).collect();
    (obs, test)
}

/// Test point for row `i` of `b`.
pub fn test_point(b: &FunctionalBatch, i: usize) -> (f64, Vec<f64>, Option<Vec<f64>>) {
    let x = b.covariates.row(i).iter().copied().collect();
    let w = b.re_covariates.as_ref().map(|w| w.row(i).iter().copied().collect());
    (b.times[i], x, w)
}

/// Predictions at rows `test` of `target`, conditioning on `observed`
/// (new-batch mixture when `observed` is empty).
pub fn predict_rows(model: &FittedModel, observed: &[FunctionalBatch], target: &FunctionalBatch, test: &[usize], laplace: bool) -> Result<Vec<PredictiveDistribution>> {
    let u = &target.scalar_covariates;
    let observed: Vec<FunctionalBatch> = observed.iter().filter(|b| !b.is_empty()).cloned().collect();
    if observed.is_empty() {
        let m = model.groups.len();
        let predictors: Vec<BatchPredictor> = (0..m).map(|k| BatchPredictor::from_training(model, k)).collect::<Result<_>>()?;
        let weights = vec![1.0 / m as f64; m];
        return test
            .iter()
            .map(|&i| {
                let (t, x, w) = test_point(target, i);
                let parts = predictors
                    .iter()
                    .map(|bp| bp.predict(TestPoint { t, x: &x, u, w: w.as_deref() }))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ggpfr::predict::mix(&parts, &weights))
            })
            .collect();
    }
    let bp = BatchPredictor::new(model, &observed)?;
    test.iter()
        .map(|&i| {
            let (t, x, w) = test_point(target, i);
            let p = TestPoint { t, x: &x, u, w: w.as_deref() };
            if laplace {
                bp.predict_laplace(p)
            } else {
                bp.predict(p)
            }
        })
        .collect()
}

/// Scores of one held-out curve.
#[derive(Debug, Clone)]
pub struct CurveScore {
    /// Predicted latent values `μ̂ + E τ*` at the test points.
    pub predicted: Vec<f64>,
    /// True latent values there.
    pub truth: Vec<f64>,
    pub rmse: f64,
    pub r: f64,
}

fn score_curve(model: &FittedModel, batch: &FunctionalBatch, latent: &[f64], obs: &[usize], test: &[usize]) -> Result<CurveScore> {
    let observed = batch.subset(obs)?;
    let preds = predict_rows(model, &[observed], batch, test, false)?;
    let predicted: Vec<f64> = preds.iter().map(|p| p.latent_value()).collect();
    let truth: Vec<f64> = test.iter().map(|&i| latent[i]).collect();
    Ok(CurveScore {
        rmse: rmse(&predicted, &truth)?,
        r: pearson_r(&predicted, &truth)?,
        predicted,
        truth,
    })
}

/// Derived seed for a named stream of a replication.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SPLIT_STREAM: u64 = 1;

/// One fitted model plus its scores on freshly generated curves.
#[derive(Debug, Clone)]
pub struct InterpOutcome {
    pub model: FittedModel,
    pub curves: Vec<CurveScore>,
}

impl InterpOutcome {
    pub fn mean_rmse(&self) -> f64 {
        self.curves.iter().map(|c| c.rmse).sum::<f64>() / self.curves.len() as f64
    }

    pub fn mean_r(&self) -> f64 {
        self.curves.iter().map(|c| c.r).sum::<f64>() / self.curves.len() as f64
    }

    /// Correlation over the test points of all curves together.
    pub fn pooled_r(&self) -> Result<f64> {
        let p: Vec<f64> = self.curves.iter().flat_map(|c| c.predicted.iter().copied()).collect();
        let t: Vec<f64> = self.curves.iter().flat_map(|c| c.truth.iter().copied()).collect();
        pearson_r(&p, &t)
    }
}

/// Settings of the curve-reconstruction study.
#[derive(Debug, Clone)]
pub struct InterpSettings {
    pub scenario: Scenario,
    /// Training curves.
    pub m: usize,
    /// Points per curve.
    pub n: usize,
    /// New curves scored per replication.
    pub curves: usize,
    /// Observed fraction of each new curve.
    pub fraction: f64,
    pub spec: ModelSpec,
}

/// Simulates `m + curves` curves, fits on the first `m` and scores the
/// remaining ones with a random observed/test split.
pub fn interpolation_replication(s: &InterpSettings, seed: u64) -> Result<InterpOutcome> {
    let sim = s.scenario.generate(s.m + s.curves, s.n, seed)?;
    let (train, fresh) = split_sim(&sim, s.m)?;
    let spec = ModelSpec { seed, ..s.spec.clone() };
    let model = fit(&train, &spec)?;
    let split_seed = derive_seed(seed, SPLIT_STREAM);
    let curves = fresh
        .iter()
        .enumerate()
        .map(|(k, (b, latent))| {
            let mut rng = batch_rng(split_seed, k);
            let (obs, test) = split_indices(b.len(), SplitMode::Interpolate, s.fraction, &mut rng);
            score_curve(&model, b, latent, &obs, &test)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterpOutcome { model, curves })
}

type Fresh = Vec<(FunctionalBatch, Vec<f64>)>;

fn split_sim(sim: &Simulated, m: usize) -> Result<(ggpfr::Dataset, Fresh)> {
    let mut train = sim.data.clone();
    train.batches.truncate(m);
    let fresh = sim.data.batches[m..]
        .iter()
        .zip(&sim.truth.latent[m..])
        .map(|(b, y)| (b.clone(), y.as_slice().to_vec()))
        .collect();
    Ok((train, fresh))
}

/// Ordinal family used by the ordinal study: thresholds start at the
/// generating cut points and the probit noise is small.
pub fn ordinal_study_family() -> ObservationFamily {
    ObservationFamily::ordinal_with_noise(ORDINAL_THRESHOLDS.to_vec(), ORDINAL_NOISE_VAR).expect("valid thresholds")
}

/// Probit noise variance of the ordinal study; it sets the unit of the
/// latent scale.
pub const ORDINAL_NOISE_VAR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct OrdinalOutcome {
    pub model: FittedModel,
    /// Per new curve.
    pub interp_error: Vec<f64>,
    pub extrap_error: Vec<f64>,
}

impl OrdinalOutcome {
    pub fn mean_interp(&self) -> f64 {
        mean(&self.interp_error)
    }

    pub fn mean_extrap(&self) -> f64 {
        mean(&self.extrap_error)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fits the ordinal model on `m` curves and classifies held-out points of
/// `curves` new curves: a random half observed (interpolation) and the
/// first half observed (extrapolation).
pub fn ordinal_replication(m: usize, n: usize, curves: usize, spec: &ModelSpec, seed: u64) -> Result<OrdinalOutcome> {
    let sim = Scenario::Ordinal.generate(m + curves, n, seed)?;
    let (train, fresh) = split_sim(&sim, m)?;
    let spec = ModelSpec { seed, ..spec.clone() };
    let model = fit(&train, &spec)?;
    let split_seed = derive_seed(seed, SPLIT_STREAM);
    let mut interp = Vec::with_capacity(curves);
    let mut extrap = Vec::with_capacity(curves);
    for (k, (b, _)) in fresh.iter().enumerate() {
        let mut rng = batch_rng(split_seed, k);
        for mode in [SplitMode::Interpolate, SplitMode::Extrapolate] {
            let (obs, test) = split_indices(b.len(), mode, 0.5, &mut rng);
            let preds = predict_rows(&model, &[b.subset(&obs)?], b, &test, false)?;
            let predicted: Vec<f64> = preds.iter().map(|p| classify(p, &model.family)).collect();
            let truth: Vec<f64> = test.iter().map(|&i| b.responses[i]).collect();
            let e = error_rate(&predicted, &truth)?;
            match mode {
                SplitMode::Interpolate => interp.push(e),
                _ => extrap.push(e),
            }
        }
    }
    Ok(OrdinalOutcome {
        model,
        interp_error: interp,
        extrap_error: extrap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn splits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (o, t) = split_indices(40, SplitMode::Interpolate, 2.0 / 3.0, &mut rng);
        assert_eq!((o.len(), t.len()), (27, 13));
        let mut all: Vec<usize> = o.iter().chain(&t).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        let (o, t) = split_indices(40, SplitMode::Extrapolate, 0.5, &mut rng);
        assert_eq!(o, (0..20).collect::<Vec<_>>());
        assert_eq!(t, (20..40).collect::<Vec<_>>());
        let (o, t) = split_indices(5, SplitMode::NewBatch, 0.5, &mut rng);
        assert!(o.is_empty() && t.len() == 5);
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_indices(30, SplitMode::Interpolate, 0.5, &mut batch_rng(3, 2));
        let b = split_indices(30, SplitMode::Interpolate, 0.5, &mut batch_rng(3, 2));
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(5, 7), derive_seed(5, 7));
    }
}
