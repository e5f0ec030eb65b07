//! End-to-end: simulate → fit → save/load → predict.

use ggpfr::fit::fit;
use ggpfr::model_io::{read_model, write_model};
use ggpfr::predict::{classify, predict_new_batch};
use ggpfr::simulate::{error_rate, pearson_r, sim_binomial_se, sim_ordinal};
use ggpfr::{BasisDim, BatchPredictor, ModelSpec, ObservationFamily, TestPoint};

fn quick_spec() -> ModelSpec {
    ModelSpec {
        basis_dim: BasisDim::Fixed(5),
        restarts: 0,
        ..ModelSpec::default()
    }
}

#[test]
fn fit_is_deterministic_and_survives_a_round_trip() {
    let sim = sim_binomial_se(20, 30, 11).unwrap();
    let a = fit(&sim.data, &quick_spec()).unwrap();
    let b = fit(&sim.data, &quick_spec()).unwrap();
    assert_eq!(a.flat_params(), b.flat_params());
    assert!(a.log_marginal.is_finite() && a.fit_trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));

    let loaded = read_model(&write_model(&a)).unwrap();
    let batch = &sim.data.batches[3];
    let u = &batch.scalar_covariates;
    for t in [-3.0, 0.1, 2.5] {
        let p = TestPoint { t, x: &[t], u, w: None };
        let x = BatchPredictor::new(&a, std::slice::from_ref(batch)).unwrap().predict(p).unwrap();
        let y = BatchPredictor::new(&loaded, std::slice::from_ref(batch)).unwrap().predict(p).unwrap();
        assert_eq!(x, y);
        let nb = predict_new_batch(&loaded, t, &[t], u, None).unwrap();
        assert!((0.0..=1.0).contains(&nb.response_mean));
    }
}

#[test]
fn conditioning_on_a_curve_tracks_its_latent_values() {
    let sim = sim_binomial_se(30, 40, 5).unwrap();
    let model = fit(&sim.data, &quick_spec()).unwrap();
    // a fresh curve from the same generator, observed on every other point
    let fresh = sim_binomial_se(31, 40, 5).unwrap();
    let b = &fresh.data.batches[30];
    let obs: Vec<usize> = (0..40).step_by(2).collect();
    let test: Vec<usize> = (1..40).step_by(2).collect();
    let bp = BatchPredictor::new(&model, &[b.subset(&obs).unwrap()]).unwrap();
    let pred: Vec<f64> = test
        .iter()
        .map(|&i| bp.predict(TestPoint { t: b.times[i], x: &[b.times[i]], u: &b.scalar_covariates, w: None }).unwrap().latent_value())
        .collect();
    let truth: Vec<f64> = test.iter().map(|&i| fresh.truth.latent[30][i]).collect();
    // a loose sanity bound: predictions must carry the shape of the curve
    assert!(pearson_r(&pred, &truth).unwrap() > 0.3);
}

#[test]
fn ordinal_fit_classifies_training_curves() {
    let sim = sim_ordinal(15, 30, 3).unwrap();
    let spec = ModelSpec {
        family: ObservationFamily::ordinal_with_noise(vec![0.2, 0.7], 1e-3).unwrap(),
        ..quick_spec()
    };
    let model = fit(&sim.data, &spec).unwrap();
    let b = model.family.thresholds().unwrap();
    assert!(b[0] < b[1]);
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (k, batch) in sim.data.batches.iter().enumerate() {
        let bp = BatchPredictor::from_training(&model, k).unwrap();
        for i in 0..batch.len() {
            let t = batch.times[i];
            let p = bp.predict(TestPoint { t, x: &[batch.covariates[(i, 0)]], u: &batch.scalar_covariates, w: None }).unwrap();
            assert!((p.category_probs.as_ref().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            pred.push(classify(&p, &model.family));
            truth.push(batch.responses[i]);
        }
    }
    // in-sample, the posterior reproduces most observed categories
    assert!(error_rate(&pred, &truth).unwrap() < 0.2);
}
