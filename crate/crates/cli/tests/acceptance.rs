//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines are
//! visible in plain `cargo test` output.
//!
//! `ACCEPTANCE_ONLY=4,7` restricts the run to the listed criteria.

use std::ops::AddAssign;
use std::time::Instant;

use ggpfr::fit::{layout_for, mean_design, model_at, objective, objective_gradient};
use ggpfr::kernels::{gram_grad, gram_matrix, kernel_eval};
use ggpfr::latent::{gaussian_log_marginal, laplace_log_marginal, nested_log_marginal};
use ggpfr::mixed::{clustered_objective, fit_clustered};
use ggpfr::predict::{mix, mixture_moments, predict_new_batch, response_moments};
use ggpfr::quadrature::GaussHermite;
use ggpfr::simulate::sim_clustered;
use ggpfr::{
    basis, BasisDim, BatchPredictor, ClusteredDataset, Dataset, FunctionalBatch, GammaMode, KernelKind, KernelParams, ModelSpec,
    ObservationFamily, SplineBasis, TestPoint,
};
use ggpfr_cli::config::KeyValues;
use ggpfr_cli::reproduce::{run_table, write_rows, ReproduceArgs, Row, Table};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_se(r: &mut ChaCha8Rng) -> KernelParams {
    KernelParams::se_linear_1d(r.random_range(0.5..2.0), r.random_range(0.01..0.1), r.random_range(0.02..0.15))
}

fn sorted_inputs(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut x: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    x.sort_by(f64::total_cmp);
    x
}

// --------------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = r.random_range(1..=5);
        let noise = r.random_range(0.05..2.0);
        let fam = ObservationFamily::Gaussian { noise_var: noise };
        let th = random_se(&mut r);
        let (mut exact, mut lap, mut nest) = (0.0, 0.0, 0.0);
        for _ in 0..m {
            let n = r.random_range(1..=20);
            let x = DMatrix::from_column_slice(n, 1, &sorted_inputs(&mut r, n, -4.0, 4.0));
            let c = gram_matrix(&x, &th, 1e-6).unwrap();
            let mu: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = mu.iter().map(|m| m + r.random_range(-2.0..2.0)).collect();
            exact += gaussian_log_marginal(&z, &mu, &c, noise).unwrap();
            lap += laplace_log_marginal(&z, &mu, &c, &fam).unwrap();
            nest += nested_log_marginal(&z, &mu, &c, &fam).unwrap();
        }
        worst = worst.max((lap - exact).abs() / exact.abs()).max((nest - exact).abs() / exact.abs());
    }
    outcome(worst <= 1e-10, format!("50 Gaussian instances, worst relative error {worst:.2e} (tol 1e-10)"))
}

// --------------------------------------------------------------------- 2

/// `log ∫ Π p(z_i | μ_i + τ_i) N(τ; 0, C) dτ` by the trapezoidal rule in
/// whitened coordinates (spectrally accurate for these integrands).
fn grid_marginal(z: &[f64], mu: &[f64], c: &DMatrix<f64>, fam: &ObservationFamily) -> f64 {
    let l = c.clone().cholesky().unwrap().l();
    let n = z.len();
    let (k, lim) = if n == 1 { (4001, 10.0) } else { (801, 10.0) };
    let h = 2.0 * lim / (k - 1) as f64;
    let pts: Vec<f64> = (0..k).map(|i| -lim + h * i as f64).collect();
    let phi = |e: f64| (-0.5 * e * e).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let lik = |tau: &[f64]| (0..n).map(|i| fam.log_density(z[i], mu[i] + tau[i]).unwrap()).sum::<f64>().exp();
    let mut s = 0.0;
    if n == 1 {
        for &e in &pts {
            s += lik(&[l[(0, 0)] * e]) * phi(e) * h;
        }
    } else {
        for &e0 in &pts {
            for &e1 in &pts {
                let t = [l[(0, 0)] * e0, l[(1, 0)] * e0 + l[(1, 1)] * e1];
                s += lik(&t) * phi(e0) * phi(e1) * h * h;
            }
        }
    }
    s.ln()
}

/// Adaptive Simpson on `[a, b]`.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

fn gauss_expect(mean: f64, var: f64, h: &dyn Fn(f64) -> f64) -> f64 {
    let s = var.sqrt();
    let f = |e: f64| h(e) * (-0.5 * ((e - mean) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    // start from many panels so narrow features away from the mean are seen
    let panels = 48;
    let h = 24.0 * s / panels as f64;
    (0..panels)
        .map(|k| {
            let a = mean - 12.0 * s + h * k as f64;
            adaptive_simpson(&f, a, a + h, 1e-15)
        })
        .sum()
}

fn criterion_2() -> Outcome {
    let fam = ObservationFamily::BernoulliLogit;
    let mut r = rng(202);
    let mut worst_marg: f64 = 0.0;
    for i in 0..20 {
        let n = 1 + i % 2;
        let th = random_se(&mut r);
        let x = DMatrix::from_column_slice(n, 1, &sorted_inputs(&mut r, n, -1.0, 1.0));
        let c = gram_matrix(&x, &th, 1e-6).unwrap();
        let mu: Vec<f64> = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
        let z: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
        let exact = grid_marginal(&z, &mu, &c, &fam);
        let lap = laplace_log_marginal(&z, &mu, &c, &fam).unwrap();
        let nest = nested_log_marginal(&z, &mu, &c, &fam).unwrap();
        worst_marg = worst_marg.max((lap - exact).abs()).max((nest - exact).abs());
    }
    let gh = GaussHermite::default();
    let fams = [
        ObservationFamily::BernoulliLogit,
        ObservationFamily::BinomialLogit { trials: 5 },
        ObservationFamily::PoissonLog,
        ObservationFamily::ordinal_with_noise(vec![0.2, 0.7], 0.05).unwrap(),
    ];
    let mut worst_mom: f64 = 0.0;
    for fam in &fams {
        for _ in 0..10 {
            let mean = r.random_range(-2.0..2.0);
            let var = r.random_range(0.01..1.0);
            let (m, v, probs) = response_moments(fam, mean, var, &gh);
            let eh = gauss_expect(mean, var, &|e| fam.mean_response(e));
            let eh2 = gauss_expect(mean, var, &|e| fam.mean_response(e).powi(2));
            let ev = gauss_expect(mean, var, &|e| fam.var_response(e));
            let want_v = ev + eh2 - eh * eh;
            let mut err = ((m - eh).abs() / eh.abs().max(1.0)).max((v - want_v).abs() / want_v.abs().max(1.0));
            if let Some(p) = probs {
                for (k, pk) in p.iter().enumerate() {
                    let want = gauss_expect(mean, var, &|e| fam.category_probs(e).unwrap()[k]);
                    err = err.max((pk - want).abs());
                }
            }
            worst_mom = worst_mom.max(err);
        }
    }
    outcome(
        worst_marg <= 1e-3 && worst_mom <= 1e-8,
        format!(
            "20 Bernoulli N∈{{1,2}} marginals: worst |error| {worst_marg:.2e} (tol 1e-3); 40 response-moment cases: worst error {worst_mom:.2e} (tol 1e-8)"
        ),
    )
}

// --------------------------------------------------------------------- 3

fn fd_ok(analytic: f64, fd: f64, scale: f64) -> bool {
    (analytic - fd).abs() <= 1e-5 * analytic.abs().max(fd.abs()).max(scale)
}

fn criterion_3() -> Outcome {
    let mut r = rng(303);
    let mut fails = Vec::new();
    // kernels: ∂C/∂ log θ
    for i in 0..40 {
        let kind = KernelKind::ALL[i % 4];
        let q = if kind == KernelKind::SeLinear { 1 + i % 2 } else { 1 };
        let np = kind.n_params(q);
        let logp: Vec<f64> = (0..np).map(|_| r.random_range(-1.5..0.5)).collect();
        let th = KernelParams::new(kind, q, logp.clone()).unwrap();
        let x = DMatrix::from_fn(6, q, |_, _| r.random_range(-1.0..1.0));
        let g = gram_grad(&x, &th).unwrap();
        let h = 1e-5;
        for k in 0..np {
            let shifted = |d: f64| {
                let mut p = logp.clone();
                p[k] += d;
                gram_matrix(&x, &KernelParams::new(kind, q, p).unwrap(), 0.0).unwrap()
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let scale = g[k].amax().max(1e-3);
            if g[k].iter().zip(fd.iter()).any(|(a, b)| !fd_ok(*a, *b, scale)) {
                fails.push(format!("kernel {kind} param {k}"));
            }
        }
    }
    // families: d1, d2
    let fams = [
        ObservationFamily::BernoulliLogit,
        ObservationFamily::BinomialLogit { trials: 6 },
        ObservationFamily::PoissonLog,
        ObservationFamily::ordinal_with_noise(vec![0.2, 0.7], 0.1).unwrap(),
        ObservationFamily::Gaussian { noise_var: 0.3 },
    ];
    for i in 0..40 {
        let fam = &fams[i % fams.len()];
        let eta = r.random_range(-2.0..2.0);
        let z = match fam {
            ObservationFamily::BernoulliLogit => f64::from(r.random_range(0..2u8)),
            ObservationFamily::BinomialLogit { .. } => f64::from(r.random_range(0..7u8)),
            ObservationFamily::PoissonLog => f64::from(r.random_range(0..5u8)),
            ObservationFamily::OrdinalProbit { .. } => f64::from(r.random_range(0..3u8)),
            _ => r.random_range(-2.0..2.0),
        };
        let h = 1e-5;
        let fd1 = (fam.log_density(z, eta + h).unwrap() - fam.log_density(z, eta - h).unwrap()) / (2.0 * h);
        let fd2 = (fam.dlog_density(z, eta + h).unwrap() - fam.dlog_density(z, eta - h).unwrap()) / (2.0 * h);
        let (d1, d2) = (fam.dlog_density(z, eta).unwrap(), fam.d2log_density(z, eta).unwrap());
        if !fd_ok(d1, fd1, 1e-3) || !fd_ok(d2, fd2, 1e-3) {
            fails.push(format!("{fam} z={z} η={eta}: d1 {d1} vs {fd1}, d2 {d2} vs {fd2}"));
        }
    }
    // objective: Gaussian family against the analytic gradient
    for i in 0..20 {
        let (ds, basis) = small_dataset(&mut r, i as u64);
        let fam = ObservationFamily::Gaussian { noise_var: r.random_range(0.2..1.0) };
        let spec = ModelSpec { family: fam.clone(), basis_dim: BasisDim::Fixed(basis.dim()), ..Default::default() };
        let layout = layout_for(&ds, &spec, &basis);
        let th = random_se(&mut r);
        let coef = DMatrix::from_fn(basis.dim(), 1, |_, _| r.random_range(-0.5..0.5));
        let flat = layout.encode(&coef, th.log_params(), &[], &[]);
        let grad = objective_gradient(&flat, &ds, &spec, &basis).unwrap();
        let want = gaussian_gradient(&ds, &basis, &coef, &th, spec.jitter, fam.dispersion());
        let scale = want.amax();
        for (k, (a, b)) in grad.iter().zip(want.iter()).enumerate() {
            if !fd_ok(*a, *b, scale) {
                fails.push(format!("objective coordinate {k}: {a} vs {b}"));
            }
        }
        // directional derivative of the Bernoulli objective
        let bspec = ModelSpec { family: ObservationFamily::BernoulliLogit, ..spec.clone() };
        let bds = Dataset::from_batches(
            ds.batches.iter().map(|b| FunctionalBatch { responses: b.responses.iter().map(|z| f64::from(u8::from(*z > 0.0))).collect(), ..b.clone() }).collect(),
            &bspec.family,
        )
        .unwrap();
        let g = objective_gradient(&flat, &bds, &bspec, &basis).unwrap();
        let d = DVector::from_fn(flat.len(), |_, _| r.random_range(-1.0..1.0)).normalize();
        let f = |s: f64| objective(&(&flat + &d * s), &bds, &bspec, &basis).unwrap();
        // Richardson-extrapolated central difference
        let cd = |h: f64| (f(h) - f(-h)) / (2.0 * h);
        let dd = (4.0 * cd(5e-4) - cd(1e-3)) / 3.0;
        let dg = g.dot(&d);
        if !fd_ok(dg, dd, g.amax()) {
            fails.push(format!("Bernoulli directional derivative {dg} vs {dd}"));
        }
    }
    outcome(
        fails.is_empty(),
        format!("40 kernel, 40 family and 20+20 objective draws; {} mismatches at 1e-5 relative{}", fails.len(), fails.first().map(|f| format!(" (first: {f})")).unwrap_or_default()),
    )
}

fn small_dataset(r: &mut ChaCha8Rng, salt: u64) -> (Dataset, SplineBasis) {
    let batches: Vec<FunctionalBatch> = (0..3)
        .map(|m| {
            let n = r.random_range(4..9);
            let t = sorted_inputs(r, n, -3.0, 3.0);
            let z: Vec<f64> = t.iter().map(|t| (0.5 * t).sin() + r.random_range(-1.0..1.0)).collect();
            FunctionalBatch::new(format!("b{}_{salt}", m + 1), t.clone(), z, DMatrix::from_column_slice(n, 1, &t), DVector::from_element(1, 1.0)).unwrap()
        })
        .collect();
    let ds = Dataset::from_batches(batches, &ObservationFamily::Gaussian { noise_var: 1.0 }).unwrap();
    let basis = basis::place_knots(&ds.all_times(), 5, ggpfr::KnotMethod::EqualSpaced).unwrap();
    (ds, basis)
}

/// Gradient of `Σ log N(z; Φ B u, K + σ² I)` in the flat layout
/// `(B row-major, log θ)`.
fn gaussian_gradient(ds: &Dataset, basis: &SplineBasis, coef: &DMatrix<f64>, th: &KernelParams, jitter: f64, noise: f64) -> DVector<f64> {
    let nb = coef.len();
    let np = th.log_params().len();
    let mut g = DVector::zeros(nb + np);
    let flat_coef = DVector::from_iterator(nb, (0..coef.nrows()).flat_map(|d| (0..coef.ncols()).map(move |j| coef[(d, j)])));
    for b in &ds.batches {
        let n = b.len();
        let design = mean_design(basis, &b.times, &b.scalar_covariates);
        let resid = DVector::from_vec(b.responses.clone()) - &design * &flat_coef;
        let s = gram_matrix(&b.covariates, th, jitter).unwrap() + DMatrix::identity(n, n) * noise;
        let sinv = s.try_inverse().unwrap();
        let alpha = &sinv * &resid;
        g.rows_mut(0, nb).add_assign(&(design.transpose() * &alpha));
        let outer = &alpha * alpha.transpose() - &sinv;
        for (k, dk) in gram_grad(&b.covariates, th).unwrap().iter().enumerate() {
            g[nb + k] += 0.5 * outer.component_mul(dk).sum();
        }
    }
    g
}

// ------------------------------------------------------------------ 4–6

fn mean_of(rows: &[Row], setting: &str, columns: &[&str], col: &str) -> f64 {
    let c = columns.iter().position(|c| *c == col).unwrap();
    rows.iter().find(|r| r.setting == setting && r.rep == "mean").and_then(|r| r.values[c]).unwrap_or(f64::NAN)
}

fn failures(rows: &[Row]) -> usize {
    rows.iter().filter(|r| r.status.starts_with("failed")).count()
}

fn acceptance_config() -> KeyValues {
    // reduced basis grid keeps the suite at desk scale
    let mut kv = KeyValues::default();
    kv.set("basis.grid", "4,6,8");
    kv.set("restarts", "0");
    kv
}

fn criteria_4_5(seed: u64) -> (Outcome, Outcome) {
    let mut a = ReproduceArgs::new(Table::T2);
    a.seed = seed;
    a.reps = Some(10);
    a.curves = Some(5);
    a.n = Some(vec![20, 40, 60]);
    a.config = acceptance_config();
    let (rows, _) = run_table(&a).unwrap();
    let cols = Table::T2.value_columns();
    dump(Table::T2, &rows);
    let nf = failures(&rows);
    let rmse40 = mean_of(&rows, "N=40", &cols, "rmse");
    let r40 = mean_of(&rows, "N=40", &cols, "r");
    let pooled40 = mean_of(&rows, "N=40", &cols, "r_pooled");
    let rmse20 = mean_of(&rows, "N=20", &cols, "rmse");
    let rmse60 = mean_of(&rows, "N=60", &cols, "rmse");
    let c4 = outcome(
        nf == 0 && (0.20..=0.35).contains(&rmse40) && (0.82..=0.94).contains(&r40) && rmse60 <= rmse20,
        format!(
            "N=40: mean rmse {rmse40:.4} (band [0.20,0.35]), mean per-curve r {r40:.4} (band [0.82,0.94]; pooled r {pooled40:.4}); rmse N=20 {rmse20:.4} vs N=60 {rmse60:.4}; {nf} failed replications"
        ),
    );
    let (w, v, al) = (mean_of(&rows, "N=60", &cols, "w1"), mean_of(&rows, "N=60", &cols, "v1"), mean_of(&rows, "N=60", &cols, "a1"));
    let c5 = outcome(
        nf == 0 && (0.4..=2.5).contains(&w) && (0.01..=0.15).contains(&v) && (0.03..=0.3).contains(&al),
        format!("N=60 means: w1 {w:.4} [0.4,2.5], v1 {v:.4} [0.01,0.15], a1 {al:.4} [0.03,0.3]"),
    );
    (c4, c5)
}

fn criterion_6(seed: u64) -> Outcome {
    let mut a = ReproduceArgs::new(Table::T3);
    a.seed = seed;
    a.reps = Some(10);
    a.curves = Some(5);
    a.config = acceptance_config();
    let (rows, _) = run_table(&a).unwrap();
    dump(Table::T3, &rows);
    let cols = Table::T3.value_columns();
    let names: Vec<&str> = KernelKind::ALL.iter().map(|k| k.name()).collect();
    let rmse: Vec<f64> = names.iter().map(|k| mean_of(&rows, k, &cols, "rmse")).collect();
    let r: Vec<f64> = names.iter().map(|k| mean_of(&rows, k, &cols, "r")).collect();
    let se_ok = rmse[1..].iter().all(|o| rmse[0] <= o + 0.05);
    let r_ok = r.iter().all(|v| *v >= 0.80);
    let nf = failures(&rows);
    let desc: Vec<String> = names.iter().zip(rmse.iter().zip(&r)).map(|(k, (a, b))| format!("{k} {a:.4}/{b:.4}")).collect();
    outcome(nf == 0 && se_ok && r_ok, format!("rmse/r: {}; SE within 0.05 of best: {se_ok}; all r ≥ 0.80: {r_ok}; {nf} failed", desc.join(", ")))
}

// --------------------------------------------------------------------- 7

fn criterion_7(seed: u64) -> Outcome {
    let mut a = ReproduceArgs::new(Table::Ordinal);
    a.seed = seed;
    a.reps = Some(2);
    a.curves = Some(15);
    let (rows, _) = run_table(&a).unwrap();
    dump(Table::Ordinal, &rows);
    let cols = Table::Ordinal.value_columns();
    let s = "N=40";
    let (ie, ee) = (mean_of(&rows, s, &cols, "interp_error"), mean_of(&rows, s, &cols, "extrap_error"));
    let (b1, b2) = (mean_of(&rows, s, &cols, "b1"), mean_of(&rows, s, &cols, "b2"));
    let nf = failures(&rows);
    let b_ok = (b1 - 0.2).abs() <= 0.15 && (b2 - 0.7).abs() <= 0.15;
    outcome(
        nf == 0 && ie <= 0.10 && ee <= 0.12 && b_ok,
        format!("2 fits × 15 curves: interpolation error {ie:.4} (≤ 0.10), extrapolation {ee:.4} (≤ 0.12), thresholds ({b1:.3}, {b2:.3}) vs (0.2, 0.7) ± 0.15; {nf} failed"),
    )
}

// --------------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    // reduction at Γ = 0
    let mut r = rng(808);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let sim = sim_clustered(4, 2, 10, 0.5, seed).unwrap();
        let cds = ClusteredDataset::new(sim.data.clone()).unwrap();
        let spec = ModelSpec { basis_dim: BasisDim::Fixed(5), ..Default::default() };
        let basis = basis::place_knots(&sim.data.all_times(), 5, spec.knots).unwrap();
        let th = random_se(&mut r);
        let coef = DMatrix::from_fn(5, 1, |_, _| r.random_range(-0.5..0.5));
        let flat = layout_for(&sim.data, &spec, &basis).encode(&coef, th.log_params(), &[], &[]);
        let indep = objective(&flat, &sim.data, &spec, &basis).unwrap();
        let mixed = clustered_objective(&flat, &cds, &spec, 5, &GammaMode::Fixed(vec![0.0])).unwrap();
        worst = worst.max((indep - mixed).abs() / indep.abs().max(1.0));
    }
    // recovery of γ = 1
    let gamma = 1.0;
    let mut est = Vec::new();
    for seed in 0..10 {
        let sim = sim_clustered(40, 3, 20, gamma, seed).unwrap();
        let cds = ClusteredDataset::new(sim.data).unwrap();
        let spec = ModelSpec { basis_dim: BasisDim::Fixed(4), restarts: 0, seed, ..Default::default() };
        match fit_clustered(&cds, &spec, &GammaMode::Estimate(vec![0.1])) {
            Ok(m) => est.push(m.gamma.unwrap()[0]),
            Err(_) => est.push(f64::NAN),
        }
    }
    let inside = est.iter().filter(|g| (gamma / 3.0..=3.0 * gamma).contains(*g)).count();
    outcome(
        worst <= 1e-8 && inside == est.len(),
        format!(
            "Γ=0 reduction worst relative gap {worst:.2e} (tol 1e-8); γ̂ inside [1/3, 3] for {inside}/10 seeds (range {:.3}–{:.3})",
            est.iter().copied().fold(f64::INFINITY, f64::min),
            est.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        ),
    )
}

// --------------------------------------------------------------------- 9

fn one_batch(r: &mut ChaCha8Rng, n: usize, id: &str) -> FunctionalBatch {
    let t = sorted_inputs(r, n, -1.0, 1.0);
    let z: Vec<f64> = (0..n).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
    FunctionalBatch::new(id, t.clone(), z, DMatrix::from_column_slice(n, 1, &t), DVector::from_element(1, 1.0)).unwrap()
}

fn criterion_9() -> Outcome {
    let mut r = rng(909);
    let mut mc_worst: f64 = 0.0;
    for inst in 0..10 {
        let n = r.random_range(3..9);
        let ds = Dataset::from_batches(vec![one_batch(&mut r, n, "b1")], &ObservationFamily::BernoulliLogit).unwrap();
        let th = random_se(&mut r);
        let spec = ModelSpec { basis_dim: BasisDim::Fixed(4), ..Default::default() };
        let coef = DMatrix::from_fn(4, 1, |_, _| r.random_range(-0.5..0.5));
        let model = model_at(&ds, &spec, &coef, &th).unwrap();
        let bp = BatchPredictor::from_training(&model, 0).unwrap();
        // predictive sd stays below ~0.5, so 1e-3 is several Monte-Carlo
        // standard errors at 10^6 draws
        let xs = r.random_range(-1.2..1.2);
        let lat = bp.latent_at(&[xs], None).unwrap();
        // τ ~ N(τ̃, Ω), τ* | τ ~ N(c*ᵀ C⁻¹ τ, k** - c*ᵀ C⁻¹ c*)
        let post = bp.posterior();
        let c = post.gram.clone();
        let x = &ds.batches[0].covariates;
        let cs = DVector::from_iterator(n, (0..n).map(|i| kernel_eval(&[x[(i, 0)]], &[xs], &th).unwrap()));
        let a = c.clone().cholesky().unwrap().solve(&cs);
        let cond_sd = (kernel_eval(&[xs], &[xs], &th).unwrap() - cs.dot(&a)).max(0.0).sqrt();
        let lo = post.posterior_cov().cholesky().unwrap().l();
        let mut mr = rng(9000 + inst);
        let draws = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        let mut e = DVector::zeros(n);
        for _ in 0..draws {
            e.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut mr));
            let tau = &post.mode + &lo * &e;
            let eps: f64 = StandardNormal.sample(&mut mr);
            let ts = a.dot(&tau) + cond_sd * eps;
            s1 += ts;
            s2 += ts * ts;
        }
        let mean = s1 / draws as f64;
        let var = s2 / draws as f64 - mean * mean;
        mc_worst = mc_worst.max((mean - lat.mean).abs()).max((var - lat.var).abs());
    }
    // new-batch mixture identity
    let batches: Vec<FunctionalBatch> = (0..4).map(|m| one_batch(&mut r, 6, &format!("b{}", m + 1))).collect();
    let ds = Dataset::from_batches(batches, &ObservationFamily::BernoulliLogit).unwrap();
    let th = KernelParams::se_linear_1d(1.0, 0.3, 0.05);
    let spec = ModelSpec { basis_dim: BasisDim::Fixed(4), ..Default::default() };
    let model = model_at(&ds, &spec, &DMatrix::from_element(4, 1, 0.1), &th).unwrap();
    let u = DVector::from_element(1, 1.0);
    let p = TestPoint { t: 0.4, x: &[0.4], u: &u, w: None };
    let parts: Vec<_> = (0..4).map(|k| BatchPredictor::from_training(&model, k).unwrap().predict(p).unwrap()).collect();
    let got = predict_new_batch(&model, 0.4, &[0.4], &u, None).unwrap();
    let (mm, mv) = mixture_moments(&parts.iter().map(|q| q.response_mean).collect::<Vec<_>>(), &parts.iter().map(|q| q.response_var).collect::<Vec<_>>(), &[0.25; 4]);
    let mixed = mix(&parts, &[0.25; 4]);
    let mix_gap = (got.response_mean - mm).abs().max((got.response_var - mv).abs()).max((mixed.response_mean - mm).abs());
    // interpolation limit at a training input (exact as the jitter → 0) and
    // prior reversion far away
    let mat = ModelSpec { kernel: KernelKind::Matern32, jitter: 1e-12, ..spec.clone() };
    let mth = KernelParams::from_natural(KernelKind::Matern32, 1, &[0.7, 0.5]).unwrap();
    let mmodel = model_at(&ds, &mat, &DMatrix::from_element(4, 1, 0.1), &mth).unwrap();
    let bp = BatchPredictor::from_training(&mmodel, 0).unwrap();
    let post = bp.posterior();
    let omega = post.posterior_cov();
    let x0 = ds.batches[0].covariates[(2, 0)];
    let at = bp.latent_at(&[x0], None).unwrap();
    let interp_gap = (at.mean - post.mode[2]).abs().max((at.var - omega[(2, 2)]).abs());
    let far = bp.latent_at(&[1e3], None).unwrap();
    let prior_gap = far.mean.abs().max((far.var - 0.5).abs());
    let pass = mc_worst < 1e-3 && mix_gap <= 1e-12 && interp_gap <= 1e-8 && prior_gap <= 1e-8;
    outcome(
        pass,
        format!(
            "Monte-Carlo (10^6 draws × 10): worst |Δ| {mc_worst:.1e} (< 1e-3); mixture identity gap {mix_gap:.1e}; interpolation limit {interp_gap:.1e}; prior reversion {prior_gap:.1e} (≤ 1e-8)"
        ),
    )
}

// -------------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let run = || {
        let mut a = ReproduceArgs::new(Table::T2);
        a.reps = Some(2);
        a.curves = Some(2);
        a.n = Some(vec![20]);
        a.m = Some(15);
        a.seed = 77;
        a.config = acceptance_config();
        let mut buf = Vec::new();
        ggpfr_cli::reproduce::reproduce(&a, &mut buf).unwrap();
        buf
    };
    let (x, y) = (run(), run());
    outcome(x == y && !x.is_empty(), format!("two runs with seed 77: {} bytes, identical: {}", x.len(), x == y))
}

fn dump(t: Table, rows: &[Row]) {
    if std::env::var_os("ACCEPTANCE_VERBOSE").is_some() {
        write_rows(t, rows, std::io::stdout().lock()).unwrap();
    }
}

fn main() {
    // honour libtest-style invocations such as `--list` from cargo
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));
    let seed = 2024;
    let mut all_pass = true;
    let mut report = |c: u32, name: &str, started: Instant, o: Outcome| {
        all_pass &= o.pass;
        println!(
            "criterion {c:>2} [{}] {name}: {} ({:.0} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            started.elapsed().as_secs_f64()
        );
    };
    let singles: [(u32, &str, fn() -> Outcome); 5] = [
        (1, "Laplace/nested exactness", criterion_1),
        (2, "quadrature oracles", criterion_2),
        (3, "gradient checks", criterion_3),
        (8, "mixed-effects reduction and γ recovery", criterion_8),
        (9, "prediction identities", criterion_9),
    ];
    for (c, name, f) in singles.iter().take(3) {
        if want(*c) {
            let t = Instant::now();
            report(*c, name, t, f());
        }
    }
    if want(4) || want(5) {
        let t = Instant::now();
        let (c4, c5) = criteria_4_5(seed);
        report(4, "curve reconstruction", t, c4);
        report(5, "hyper-parameter recovery", t, c5);
    }
    if want(6) {
        let t = Instant::now();
        report(6, "kernel sensitivity", t, criterion_6(seed));
    }
    if want(7) {
        let t = Instant::now();
        report(7, "ordinal classification", t, criterion_7(seed));
    }
    for (c, name, f) in singles.iter().skip(3) {
        if want(*c) {
            let t = Instant::now();
            report(*c, name, t, f());
        }
    }
    if want(10) {
        let t = Instant::now();
        report(10, "determinism", t, criterion_10());
    }
    if !all_pass {
        std::process::exit(1);
    }
}
