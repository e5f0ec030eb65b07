//! Mixed-effects extension for clustered functional data.
//!
//! Batches (subjects) are nested in clusters; each cluster adds a random
//! effect `W v` with `v ~ N(0, Γ)`, `Γ = diag(γ)`. Joining the curves of a
//! cluster into one long curve gives the covariance
//!
//! ```text
//! Σ_i = blockdiag(C_i1, …, C_iJ) + W_i Γ W_iᵀ
//! ```
//!
//! and everything else (mode finding, marginal, prediction) is unchanged.

use nalgebra::{DMatrix, DVector};

use crate::data::{natural_cmp, Dataset, FunctionalBatch};
use crate::error::{Error, Result};
use crate::fit::{finish, initial_point, optimize, setup, BasisDim, FitSetup, FittedModel, Group, ModelSpec, ParamLayout, Problem};
use crate::kernels::KernelParams;
use crate::predict::{BatchPredictor, PredictiveDistribution, TestPoint};

/// A dataset whose batches carry random-effect covariates and cluster ids.
#[derive(Debug, Clone)]
pub struct ClusteredDataset {
    pub data: Dataset,
    /// `(cluster_id, batch indices)` in natural id order; batch order within a
    /// cluster follows the dataset.
    pub clusters: Vec<(String, Vec<usize>)>,
}

impl ClusteredDataset {
    pub fn new(data: Dataset) -> Result<Self> {
        let mut r = None;
        let mut clusters: Vec<(String, Vec<usize>)> = Vec::new();
        for (m, b) in data.batches.iter().enumerate() {
            let (Some(w), Some(cid)) = (&b.re_covariates, &b.cluster_id) else {
                return Err(Error::Schema(format!("batch {} has no cluster id or random-effect covariates", b.batch_id)));
            };
            if *r.get_or_insert(w.ncols()) != w.ncols() {
                return Err(Error::Consistency {
                    batch: b.batch_id.clone(),
                    msg: format!("{} random-effect covariates, other batches have {}", w.ncols(), r.unwrap_or(0)),
                });
            }
            match clusters.iter_mut().find(|(c, _)| c == cid) {
                Some((_, v)) => v.push(m),
                None => clusters.push((cid.clone(), vec![m])),
            }
        }
        if r == Some(0) {
            return Err(Error::Schema("clustered data needs at least one random-effect covariate".into()));
        }
        clusters.sort_by(|a, b| natural_cmp(&a.0, &b.0));
        Ok(Self { data, clusters })
    }

    /// Number of random-effect covariates.
    pub fn r(&self) -> usize {
        self.data.batches.first().and_then(|b| b.r()).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Batches of cluster `i`.
    pub fn cluster(&self, i: usize) -> Vec<FunctionalBatch> {
        self.clusters[i].1.iter().map(|&m| self.data.batches[m].clone()).collect()
    }
}

/// `Σ = blockdiag(C_j) + W Γ Wᵀ` for the batches of one cluster (raw,
/// unstandardized covariates).
pub fn assemble_cluster_cov(cluster: &[FunctionalBatch], theta: &KernelParams, gamma: &[f64], jitter: f64) -> Result<DMatrix<f64>> {
    if cluster.is_empty() {
        return Err(Error::InvalidParameter("empty cluster".into()));
    }
    if gamma.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::InvalidParameter("random-effect variances must be non-negative".into()));
    }
    for b in cluster {
        if b.r() != Some(gamma.len()) {
            return Err(Error::Dimension(format!("batch {} has {:?} random-effect covariates, gamma has {}", b.batch_id, b.r(), gamma.len())));
        }
    }
    let members = (0..cluster.len()).collect();
    // the basis only feeds the mean design, which is not used here
    let basis = crate::basis::SplineBasis::from_knots(crate::basis::CUBIC, [vec![0.0; 4], vec![1.0; 4]].concat())?;
    let g = Group::build(cluster, members, &basis, None, true);
    g.covariance(theta, jitter, Some(gamma))
}

/// How the random-effect variances are treated.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaMode {
    /// Estimated, starting from these values.
    Estimate(Vec<f64>),
    /// Held fixed.
    Fixed(Vec<f64>),
}

fn build(data: &ClusteredDataset, spec: &ModelSpec, d: usize, gamma: &GammaMode) -> Result<(FitSetup, Problem, DVector<f64>)> {
    if data.is_empty() {
        return Err(Error::FitFailed("dataset has no clusters".into()));
    }
    let ds = &data.data;
    let r = data.r();
    let g0 = match gamma {
        GammaMode::Estimate(g) | GammaMode::Fixed(g) => g,
    };
    if g0.len() != r || g0.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::InvalidParameter(format!("need {r} non-negative random-effect variances")));
    }
    let setup = setup(ds, spec, d)?;
    let start = initial_point(ds, &setup.family, &setup.basis, spec, setup.stdz.as_ref())?;
    let estimate = matches!(gamma, GammaMode::Estimate(_));
    let layout = ParamLayout {
        d,
        p: ds.p(),
        n_theta: spec.kernel.n_params(ds.q()),
        n_thresholds: setup.family.thresholds().map_or(0, |b| b.len()),
        n_gamma: if estimate { r } else { 0 },
    };
    let groups: Vec<Group> = data
        .clusters
        .iter()
        .map(|(_, members)| Group::build(&ds.batches, members.clone(), &setup.basis, setup.stdz.as_ref(), true))
        .collect();
    let fixed = (!estimate).then(|| g0.clone());
    let problem = Problem::new(groups, layout, setup.family.clone(), spec.kernel, ds.q(), spec.objective, spec.jitter, fixed, spec.max_evals);
    let lg: Vec<f64> = if estimate { g0.iter().map(|g| g.max(1e-6).ln()).collect() } else { Vec::new() };
    let x0 = layout.encode(&start.coef, &start.log_theta, setup.family.thresholds().unwrap_or(&[]), &lg);
    Ok((setup, problem, x0))
}

fn fit_clustered_dim(data: &ClusteredDataset, spec: &ModelSpec, d: usize, gamma: &GammaMode) -> Result<FittedModel> {
    let (FitSetup { basis, stdz, .. }, mut problem, x0) = build(data, spec, d, gamma)?;
    let (x, trace, converged) = optimize(&mut problem, x0, spec)?;
    let mut model = finish(&data.data, spec, problem, x, trace, converged, basis, stdz)?;
    // BIC counts clusters as the independent units
    model.bic = crate::fit::bic(&model, data.len());
    Ok(model)
}

/// Fits the mixed-effects model; with [`GammaMode::Fixed`] the variances
/// are held at the given values (zero reduces to independent batches).
pub fn fit_clustered(data: &ClusteredDataset, spec: &ModelSpec, gamma: &GammaMode) -> Result<FittedModel> {
    let grid = match &spec.basis_dim {
        BasisDim::Fixed(d) => vec![*d],
        BasisDim::Auto(g) => {
            let mut g = g.clone();
            g.sort_unstable();
            g.dedup();
            g
        }
    };
    let mut best: Option<FittedModel> = None;
    let mut last_err = None;
    for d in grid {
        match fit_clustered_dim(data, spec, d, gamma) {
            Ok(m) if best.as_ref().is_none_or(|b| m.bic < b.bic) => best = Some(m),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::FitFailed("empty basis grid".into())))
}

/// Log-marginal of the clustered model at a flat parameter vector (layout
/// as in [`fit_clustered`] for the same `gamma` mode).
pub fn clustered_objective(flat: &DVector<f64>, data: &ClusteredDataset, spec: &ModelSpec, d: usize, gamma: &GammaMode) -> Result<f64> {
    let (_, mut problem, x0) = build(data, spec, d, gamma)?;
    if flat.len() != x0.len() {
        return Err(Error::Dimension(format!("parameter vector has length {}, expected {}", flat.len(), x0.len())));
    }
    Ok(problem.value_at(flat))
}

/// Predictive distribution at a new point of a cluster, given that
/// cluster's observed batches; `w_star` are the random-effect covariates of
/// the test point.
pub fn predict_clustered(
    model: &FittedModel,
    cluster_obs: &[FunctionalBatch],
    t_star: f64,
    x_star: &[f64],
    w_star: &[f64],
    u_star: &DVector<f64>,
) -> Result<PredictiveDistribution> {
    if model.gamma.is_none() {
        return Err(Error::InvalidParameter("model was not fitted with random effects".into()));
    }
    BatchPredictor::new(model, cluster_obs)?.predict(TestPoint {
        t: t_star,
        x: x_star,
        u: u_star,
        w: Some(w_star),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::place_knots;
    use crate::fit::objective;
    use crate::kernels::gram_matrix;

    fn batch(id: &str, cluster: &str, times: &[f64], z: &[f64], w: &[f64]) -> FunctionalBatch {
        let n = times.len();
        FunctionalBatch::new(id, times.to_vec(), z.to_vec(), DMatrix::from_column_slice(n, 1, times), DVector::from_element(1, 1.0))
            .unwrap()
            .with_random_effects(DMatrix::from_column_slice(n, 1, w), cluster)
            .unwrap()
    }

    fn toy() -> ClusteredDataset {
        let b = vec![
            batch("s1", "c1", &[0.0, 0.5, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0]),
            batch("s2", "c1", &[0.1, 0.4, 0.9, 1.3], &[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0]),
            batch("s3", "c2", &[0.2, 0.8], &[1.0, 1.0], &[1.0, 1.0]),
        ];
        ClusteredDataset::new(Dataset::from_batches(b, &crate::family::ObservationFamily::BernoulliLogit).unwrap()).unwrap()
    }

    #[test]
    fn grouping_by_cluster() {
        let c = toy();
        assert_eq!(c.clusters, vec![("c1".to_string(), vec![0, 1]), ("c2".to_string(), vec![2])]);
        assert_eq!(c.r(), 1);
    }

    #[test]
    fn cov_zero_gamma_is_block_diagonal() {
        let c = toy();
        let th = KernelParams::se_linear_1d(1.0, 0.5, 0.1);
        let cl = c.cluster(0);
        let s = assemble_cluster_cov(&cl, &th, &[0.0], 1e-6).unwrap();
        let c1 = gram_matrix(&cl[0].covariates, &th, 1e-6).unwrap();
        let c2 = gram_matrix(&cl[1].covariates, &th, 1e-6).unwrap();
        assert_eq!(s.view((0, 0), (3, 3)), c1);
        assert_eq!(s.view((3, 3), (4, 4)), c2);
        assert!(s.view((0, 3), (3, 4)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cov_matches_elementwise_formula() {
        let cl = vec![
            batch("a", "c", &[0.0, 0.3], &[0.0, 1.0], &[1.0, 0.5]),
            batch("b", "c", &[0.1, 0.7, 0.9], &[1.0, 1.0, 0.0], &[-0.2, 2.0, 1.0]),
        ];
        let th = KernelParams::se_linear_1d(2.0, 0.3, 0.05);
        let g = 0.7;
        let s = assemble_cluster_cov(&cl, &th, &[g], 0.0).unwrap();
        let t: Vec<f64> = [0.0, 0.3, 0.1, 0.7, 0.9].to_vec();
        let w = [1.0, 0.5, -0.2, 2.0, 1.0];
        let subj = [0, 0, 1, 1, 1];
        for i in 0..5 {
            for j in 0..5 {
                let k = if subj[i] == subj[j] { crate::kernels::kernel_eval(&[t[i]], &[t[j]], &th).unwrap() } else { 0.0 };
                assert!((s[(i, j)] - (k + g * w[i] * w[j])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_subject_identity_design() {
        let n = 3;
        let b = FunctionalBatch::new("s", vec![0.0, 1.0, 2.0], vec![0.0; 3], DMatrix::from_column_slice(n, 1, &[0.0, 1.0, 2.0]), DVector::from_element(1, 1.0))
            .unwrap()
            .with_random_effects(DMatrix::identity(3, 3), "c")
            .unwrap();
        let th = KernelParams::se_linear_1d(1.0, 0.5, 0.1);
        let s = assemble_cluster_cov(std::slice::from_ref(&b), &th, &[0.4; 3], 0.0).unwrap();
        let c = gram_matrix(&b.covariates, &th, 0.0).unwrap();
        assert!((s - c - DMatrix::identity(3, 3) * 0.4).amax() < 1e-15);
    }

    #[test]
    fn zero_gamma_reduces_to_independent_batches() {
        let c = toy();
        let spec = ModelSpec { basis_dim: BasisDim::Fixed(4), ..Default::default() };
        let basis = place_knots(&c.data.all_times(), 4, spec.knots).unwrap();
        let flat = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.05, 0.2, -0.5, -1.0]);
        let indep = objective(&flat, &c.data, &spec, &basis).unwrap();
        let mixed = clustered_objective(&flat, &c, &spec, 4, &GammaMode::Fixed(vec![0.0])).unwrap();
        assert!((indep - mixed).abs() < 1e-8 * indep.abs().max(1.0), "{indep} vs {mixed}");
    }

    #[test]
    fn rejects_unclustered_batches() {
        let b = FunctionalBatch::new("s", vec![0.0, 1.0], vec![0.0, 1.0], DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), DVector::from_element(1, 1.0)).unwrap();
        let ds = Dataset::from_batches(vec![b], &crate::family::ObservationFamily::BernoulliLogit).unwrap();
        assert!(ClusteredDataset::new(ds).is_err());
    }
}
