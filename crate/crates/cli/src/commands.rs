//! The `simulate`, `fit`, `predict` and `evaluate` pipelines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ggpfr::data::{load_csv, natural_cmp, save_csv};
use ggpfr::fit::fit;
use ggpfr::mixed::fit_clustered;
use ggpfr::model_io::{load_model, save_model};
use ggpfr::predict::classify;
use ggpfr::simulate::{batch_rng, error_rate, pearson_r, rmse, Scenario};
use ggpfr::{ClusteredDataset, CsvSchema, Error, FittedModel, FunctionalBatch, GammaMode, PredictiveDistribution, Result};
use nalgebra::{DMatrix, DVector};

use crate::config::{model_spec, parse_list, KeyValues, MODEL_KEYS};
use crate::experiments::{predict_rows, split_indices, SplitMode};

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema(format!("{other:?}")),
    }
}

/// Formats an optional cell; missing values are empty.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `out` or stdout.
pub fn open_output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub scenario: Scenario,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Latent values and true mean per observation.
    pub truth: Option<PathBuf>,
}

/// Writes the simulated data (and truth) and returns a `key = value` report
/// of the generating parameters.
pub fn simulate(a: &SimulateArgs) -> Result<String> {
    let sim = a.scenario.generate(a.m, a.n, a.seed)?;
    save_csv(&sim.data, &a.out)?;
    if let Some(path) = &a.truth {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["batch_id", "t", "y", "mean"]).map_err(csv_err)?;
        for ((b, y), mu) in sim.data.batches.iter().zip(&sim.truth.latent).zip(&sim.truth.mean) {
            for i in 0..b.len() {
                w.write_record([b.batch_id.clone(), b.times[i].to_string(), y[i].to_string(), mu[i].to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    let mut r = Report::default();
    r.push("scenario", a.scenario.name());
    r.push("family", a.scenario.family().tag());
    r.push("batches", a.m);
    r.push("points", a.n);
    r.push("seed", a.seed);
    if let Some(theta) = &sim.truth.theta {
        r.push("kernel", theta.kind());
        for (name, v) in theta.kind().param_names(theta.input_dim()).iter().zip(theta.natural()) {
            r.push(&format!("theta.{name}"), v);
        }
    }
    if let Some(b) = &sim.truth.thresholds {
        r.push("thresholds", join(b));
    }
    Ok(r.0)
}

#[derive(Default)]
struct Report(String);

impl Report {
    fn push(&mut self, k: &str, v: impl std::fmt::Display) {
        self.0.push_str(&format!("{k} = {v}\n"));
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

// --------------------------------------------------------------------- fit

pub const GAMMA_KEYS: &[&str] = &["gamma.init", "gamma.fixed"];

#[derive(Debug, Clone, Default)]
pub struct FitArgs {
    pub data: PathBuf,
    pub config: KeyValues,
    pub out: PathBuf,
    /// Fit random effects by cluster.
    pub clustered: bool,
}

/// Fits, saves the model and returns the fit report.
pub fn fit_command(a: &FitArgs) -> Result<(FittedModel, String)> {
    let mut allowed = MODEL_KEYS.to_vec();
    allowed.extend_from_slice(GAMMA_KEYS);
    a.config.check_keys(&allowed)?;
    let spec = model_spec(&a.config)?;
    let schema = CsvSchema::for_family(spec.family.clone());
    let ds = load_csv(&a.data, &schema)?;
    let model = if a.clustered {
        let cds = ClusteredDataset::new(ds)?;
        let init = match a.config.get("gamma.init") {
            Some(s) => parse_list(s)?,
            None => vec![0.1; cds.r()],
        };
        let fixed = matches!(a.config.get("gamma.fixed"), Some("true" | "1" | "yes"));
        let mode = if fixed { GammaMode::Fixed(init) } else { GammaMode::Estimate(init) };
        fit_clustered(&cds, &spec, &mode)?
    } else {
        fit(&ds, &spec)?
    };
    save_model(&model, &a.out)?;
    Ok((model.clone(), fit_report(&model)))
}

pub fn fit_report(m: &FittedModel) -> String {
    let mut r = Report::default();
    r.push("family", m.family.tag());
    r.push("kernel", m.theta.kind());
    r.push("basis_dim", m.basis.dim());
    r.push("batches", m.training.len());
    r.push("observations", m.training.iter().map(FunctionalBatch::len).sum::<usize>());
    r.push("log_marginal", m.log_marginal);
    r.push("bic", m.bic);
    for (name, v) in m.theta.kind().param_names(m.theta.input_dim()).iter().zip(m.theta.natural()) {
        r.push(&format!("theta.{name}"), v);
    }
    if let Some(b) = m.family.thresholds() {
        r.push("thresholds", join(b));
    }
    if let Some(g) = &m.gamma {
        r.push("gamma", join(g));
    }
    r.push("regret", m.regret);
    r.push("converged", m.converged);
    r.push("evaluations", m.evaluations);
    r.push("penalties", m.penalties);
    r.0
}

// ----------------------------------------------------------------- predict

/// One row of a prediction request.
#[derive(Debug, Clone)]
struct TestRow {
    batch: String,
    cluster: Option<String>,
    t: f64,
    x: Vec<f64>,
    u: Vec<f64>,
    w: Option<Vec<f64>>,
}

fn read_test_rows(path: &Path, q: usize, p: usize) -> Result<Vec<TestRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| find(name).ok_or_else(|| Error::Schema(format!("test file is missing column {name:?}")));
    let bcol = need("batch_id")?;
    let tcol = need("t")?;
    let xcols = (1..=q).map(|i| need(&format!("x{i}"))).collect::<Result<Vec<_>>>()?;
    let ucols = (1..=p).map(|i| need(&format!("u{i}"))).collect::<Result<Vec<_>>>()?;
    let wcols: Vec<usize> = (1..).map_while(|i| find(&format!("w{i}"))).collect();
    let ccol = find("cluster_id");
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |c: usize| -> Result<f64> {
            rec[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                line: line + 2,
                msg: format!("bad number {:?} in column {}", &rec[c], &headers[c]),
            })
        };
        rows.push(TestRow {
            batch: rec[bcol].to_string(),
            cluster: ccol.map(|c| rec[c].to_string()),
            t: num(tcol)?,
            x: xcols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            u: ucols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            w: if wcols.is_empty() { None } else { Some(wcols.iter().map(|&c| num(c)).collect::<Result<_>>()?) },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default)]
pub struct PredictArgs {
    pub model: PathBuf,
    /// Points to predict: `batch_id, t, x*, u*` and, for clustered models,
    /// `w*` and `cluster_id`.
    pub test: PathBuf,
    /// Observations to condition on, matched by batch (and cluster).
    pub observed: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Use the Laplace-ratio moments instead of quadrature.
    pub laplace: bool,
}

/// Predicts every test row. Batches without observations get the new-batch
/// mixture over the training batches (or, in a clustered model, conditioning
/// on the training batches of their cluster).
pub fn predict_command(a: &PredictArgs) -> Result<usize> {
    let model = load_model(&a.model)?;
    let first = model.training.first().ok_or_else(|| Error::InvalidParameter("model has no training data".into()))?;
    let (q, p) = (first.q(), first.p());
    let rows = read_test_rows(&a.test, q, p)?;
    let observed = match &a.observed {
        Some(path) => load_csv(path, &CsvSchema::for_family(model.family.clone()))?.batches,
        None => Vec::new(),
    };
    let mut by_batch: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_batch.entry(r.batch.as_str()).or_default().push(i);
    }
    let mut order: Vec<&str> = by_batch.keys().copied().collect();
    order.sort_by(|a, b| natural_cmp(a, b));

    let k = model.family.n_categories().unwrap_or(0);
    let mut w = csv::Writer::from_writer(open_output(a.out.as_deref())?);
    let mut header: Vec<String> = ["batch_id", "t", "latent_mean", "latent_var", "response_mean", "response_var", "predicted_class"]
        .map(String::from)
        .to_vec();
    header.extend((0..k).map(|c| format!("p_{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for id in order {
        let idx = &by_batch[id];
        let target = target_batch(&rows, idx)?;
        let cluster = rows[idx[0]].cluster.clone();
        let mut cond: Vec<FunctionalBatch> = observed
            .iter()
            .filter(|b| b.batch_id == id || (model.gamma.is_some() && cluster.is_some() && b.cluster_id == cluster))
            .cloned()
            .collect();
        if cond.is_empty() && model.gamma.is_some() && cluster.is_some() {
            cond = model.training.iter().filter(|b| b.cluster_id == cluster).cloned().collect();
        }
        let all: Vec<usize> = (0..idx.len()).collect();
        let preds = predict_rows(&model, &cond, &target, &all, a.laplace)?;
        for (j, pd) in preds.iter().enumerate() {
            let mut rec = vec![
                id.to_string(),
                target.times[j].to_string(),
                pd.latent_value().to_string(),
                pd.latent_var.to_string(),
                pd.response_mean.to_string(),
                pd.response_var.to_string(),
                classify(pd, &model.family).to_string(),
            ];
            if let Some(probs) = &pd.category_probs {
                rec.extend(probs.iter().map(f64::to_string));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(rows.len())
}

/// Test rows of one batch as a response-less batch (times need not be
/// sorted for prediction, so the consistency checks are bypassed).
fn target_batch(rows: &[TestRow], idx: &[usize]) -> Result<FunctionalBatch> {
    let r0 = &rows[idx[0]];
    let n = idx.len();
    let q = r0.x.len();
    if idx.iter().any(|&i| rows[i].u != r0.u) {
        return Err(Error::Consistency {
            batch: r0.batch.clone(),
            msg: "scalar covariates differ between rows".into(),
        });
    }
    let x = DMatrix::from_fn(n, q, |i, j| rows[idx[i]].x[j]);
    let w = match &r0.w {
        Some(w0) => Some(DMatrix::from_fn(n, w0.len(), |i, j| rows[idx[i]].w.as_ref().map_or(f64::NAN, |w| w[j]))),
        None => None,
    };
    Ok(FunctionalBatch {
        batch_id: r0.batch.clone(),
        times: idx.iter().map(|&i| rows[i].t).collect(),
        responses: vec![0.0; n],
        covariates: x,
        scalar_covariates: DVector::from_vec(r0.u.clone()),
        re_covariates: w,
        cluster_id: r0.cluster.clone(),
    })
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    /// Latent values (`batch_id, t, y`) from `simulate`; without them rmse
    /// and r compare the predicted response mean with the observed response.
    pub truth: Option<PathBuf>,
    pub mode: SplitMode,
    /// Observed fraction per batch.
    pub fraction: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

/// Per-batch scores; `rmse`/`r` are `None` where undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScore {
    pub batch_id: String,
    pub n_observed: usize,
    pub n_test: usize,
    pub error_rate: f64,
    pub rmse: f64,
    pub r: Option<f64>,
}

fn read_truth(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |n: &str| headers.iter().position(|h| h == n).ok_or_else(|| Error::Schema(format!("truth file is missing column {n:?}")));
    let (b, t, y) = (col("batch_id")?, col("t")?, col("y")?);
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |c: usize| {
            rec[c].parse::<f64>().map_err(|_| Error::Parse {
                line: line + 2,
                msg: format!("bad number {:?}", &rec[c]),
            })
        };
        out.entry(rec[b].to_string()).or_default().push((num(t)?, num(y)?));
    }
    Ok(out)
}

/// Scores predictions on held-out points of each batch in `data`.
pub fn evaluate(a: &EvaluateArgs) -> Result<Vec<BatchScore>> {
    if !(a.fraction > 0.0 && a.fraction < 1.0) && a.mode != SplitMode::NewBatch {
        return Err(Error::InvalidParameter(format!("fraction must be in (0, 1), got {}", a.fraction)));
    }
    let model = load_model(&a.model)?;
    let ds = load_csv(&a.data, &CsvSchema::default())?;
    ds.validate_family(&model.family)?;
    let truth = a.truth.as_deref().map(read_truth).transpose()?;
    let mut scores = Vec::with_capacity(ds.len());
    for (m, b) in ds.batches.iter().enumerate() {
        let mut rng = batch_rng(a.seed, m);
        let (obs, test) = split_indices(b.len(), a.mode, a.fraction, &mut rng);
        let observed = if obs.is_empty() { Vec::new() } else { vec![b.subset(&obs)?] };
        let preds = predict_rows(&model, &observed, b, &test, false)?;
        let classes: Vec<f64> = preds.iter().map(|p| classify(p, &model.family)).collect();
        let z: Vec<f64> = test.iter().map(|&i| b.responses[i]).collect();
        let (pred, target): (Vec<f64>, Vec<f64>) = match &truth {
            Some(tr) => {
                let y = tr.get(&b.batch_id).filter(|y| y.len() == b.len()).ok_or_else(|| Error::Consistency {
                    batch: b.batch_id.clone(),
                    msg: "truth file does not cover this batch".into(),
                })?;
                if y.iter().zip(&b.times).any(|((t, _), s)| (t - s).abs() > 1e-9 * (1.0 + s.abs())) {
                    return Err(Error::Consistency {
                        batch: b.batch_id.clone(),
                        msg: "truth times differ from data times".into(),
                    });
                }
                (preds.iter().map(PredictiveDistribution::latent_value).collect(), test.iter().map(|&i| y[i].1).collect())
            }
            None => (preds.iter().map(|p| p.response_mean).collect(), z.clone()),
        };
        scores.push(BatchScore {
            batch_id: b.batch_id.clone(),
            n_observed: obs.len(),
            n_test: test.len(),
            error_rate: error_rate(&classes, &z)?,
            rmse: rmse(&pred, &target)?,
            r: pearson_r(&pred, &target).ok(),
        });
    }
    Ok(scores)
}

/// Writes per-batch rows followed by a `mean` row.
pub fn write_scores(scores: &[BatchScore], out: Option<&Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(open_output(out)?);
    w.write_record(["batch_id", "n_observed", "n_test", "error_rate", "rmse", "r"]).map_err(csv_err)?;
    for s in scores {
        w.write_record([
            s.batch_id.clone(),
            s.n_observed.to_string(),
            s.n_test.to_string(),
            s.error_rate.to_string(),
            s.rmse.to_string(),
            cell(s.r),
        ])
        .map_err(csv_err)?;
    }
    let mean = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    w.write_record([
        "mean".to_string(),
        String::new(),
        String::new(),
        cell(mean(scores.iter().map(|s| s.error_rate).collect())),
        cell(mean(scores.iter().map(|s| s.rmse).collect())),
        cell(mean(scores.iter().filter_map(|s| s.r).collect())),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}
