//! Replicated simulation studies emitted as CSV: one row per replication,
//! then a mean row per setting.

use std::io::Write;
use std::str::FromStr;

use ggpfr::fit::fit;
use ggpfr::simulate::Scenario;
use ggpfr::{Error, FittedModel, KernelKind, ModelSpec, Result};
use rayon::prelude::*;

use crate::config::{model_spec, KeyValues, MODEL_KEYS};
use crate::experiments::{derive_seed, interpolation_replication, ordinal_replication, InterpSettings, ORDINAL_NOISE_VAR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    /// Hyper-parameter estimates for several curve lengths.
    T1,
    /// Reconstruction rmse / r for several curve lengths.
    T2,
    /// Reconstruction under each covariance kernel.
    T3,
    /// As `T3` for data with a polynomial-basis covariance.
    TOp,
    /// Ordinal classification error rates and thresholds.
    Ordinal,
}

impl FromStr for Table {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(Table::T1),
            "T2" => Ok(Table::T2),
            "T3" => Ok(Table::T3),
            "T_OP" | "TOP" => Ok(Table::TOp),
            "ORDINAL" => Ok(Table::Ordinal),
            _ => Err(Error::InvalidParameter(format!("unknown table {s:?} (T1|T2|T3|T_OP|ORDINAL)"))),
        }
    }
}

impl Table {
    pub fn name(self) -> &'static str {
        match self {
            Table::T1 => "T1",
            Table::T2 => "T2",
            Table::T3 => "T3",
            Table::TOp => "T_OP",
            Table::Ordinal => "ORDINAL",
        }
    }

    fn scenario(self) -> Scenario {
        match self {
            Table::TOp => Scenario::Chebyshev,
            Table::Ordinal => Scenario::Ordinal,
            _ => Scenario::BinomialSe,
        }
    }

    /// Model keys applied before user overrides.
    pub fn base_config(self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("basis.D", "auto");
        kv.set("basis.grid", "4..12");
        kv.set("restarts", "0");
        kv.set("kernel.kind", "se");
        match self {
            Table::Ordinal => {
                kv.set("family", "ordinal");
                kv.set("family.thresholds", "0.2,0.7");
                kv.set("family.noise_var", ORDINAL_NOISE_VAR.to_string());
                kv.set("family.auto_thresholds", "false");
            }
            _ => kv.set("family", "bernoulli"),
        }
        kv
    }

    fn default_m(self) -> usize {
        match self {
            Table::TOp => 100,
            Table::Ordinal => 40,
            _ => 60,
        }
    }

    fn default_n(self) -> Vec<usize> {
        match self {
            Table::T1 | Table::T2 => vec![20, 40, 60],
            Table::T3 => vec![40],
            Table::TOp => vec![50],
            Table::Ordinal => vec![40],
        }
    }

    fn default_reps(self) -> usize {
        match self {
            Table::Ordinal => 1,
            _ => 10,
        }
    }

    fn default_curves(self) -> usize {
        match self {
            Table::T1 => 0,
            Table::Ordinal => 30,
            _ => 5,
        }
    }

    fn kernels(self) -> Vec<KernelKind> {
        match self {
            Table::T3 | Table::TOp => KernelKind::ALL.to_vec(),
            _ => vec![KernelKind::SeLinear],
        }
    }

    pub fn value_columns(self) -> Vec<&'static str> {
        match self {
            Table::T1 => vec!["D", "w1", "v1", "a1", "log_marginal", "bic", "converged"],
            Table::T2 => vec!["D", "w1", "v1", "a1", "rmse", "r", "r_pooled"],
            Table::T3 | Table::TOp => vec!["D", "rmse", "r", "r_pooled"],
            Table::Ordinal => vec!["D", "b1", "b2", "w1", "v1", "a1", "interp_error", "extrap_error"],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceArgs {
    pub table: Table,
    pub reps: Option<usize>,
    /// New curves scored per replication.
    pub curves: Option<usize>,
    /// Curve lengths (replaces the table's list).
    pub n: Option<Vec<usize>>,
    /// Training curves.
    pub m: Option<usize>,
    pub seed: u64,
    /// Kernels compared in `T3` / `T_OP` (all four by default).
    pub kernels: Option<Vec<KernelKind>>,
    /// Model-key overrides.
    pub config: KeyValues,
}

impl ReproduceArgs {
    pub fn new(table: Table) -> Self {
        Self {
            table,
            reps: None,
            curves: None,
            n: None,
            m: None,
            seed: 1,
            kernels: None,
            config: KeyValues::default(),
        }
    }
}

/// One output row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub setting: String,
    /// Replication index, or `mean`.
    pub rep: String,
    pub status: String,
    pub values: Vec<Option<f64>>,
}

struct Job {
    setting: String,
    n: usize,
    kernel: KernelKind,
    rep: usize,
}

/// Runs the table and returns its rows plus the first failure, if any.
/// Failed replications appear as rows with status `failed: …`.
pub fn run_table(a: &ReproduceArgs) -> Result<(Vec<Row>, Option<Error>)> {
    let t = a.table;
    a.config.check_keys(MODEL_KEYS)?;
    let mut kv = t.base_config();
    kv.merge(a.config.clone());
    let base = model_spec(&kv)?;
    let reps = a.reps.unwrap_or(t.default_reps());
    let curves = a.curves.unwrap_or(t.default_curves());
    let m = a.m.unwrap_or(t.default_m());
    let ns = a.n.clone().unwrap_or(t.default_n());
    if reps == 0 || m == 0 || ns.iter().any(|&n| n < 4) {
        return Err(Error::InvalidParameter("need reps ≥ 1, m ≥ 1 and curve lengths ≥ 4".into()));
    }
    if t != Table::T1 && curves == 0 {
        return Err(Error::InvalidParameter("need at least one new curve per replication".into()));
    }
    let kernels = match (&a.kernels, t) {
        (Some(k), Table::T3 | Table::TOp) if !k.is_empty() => k.clone(),
        _ => t.kernels(),
    };
    let mut jobs = Vec::new();
    for &n in &ns {
        for &kernel in &kernels {
            let setting = match t {
                Table::T3 | Table::TOp => kernel.name().to_string(),
                _ => format!("N={n}"),
            };
            jobs.extend((0..reps).map(|rep| Job { setting: setting.clone(), n, kernel, rep }));
        }
    }
    let results: Vec<Result<Vec<Option<f64>>>> = jobs
        .par_iter()
        .map(|j| {
            // data depend on (N, rep) only, so kernels are compared on the same draws
            let seed = derive_seed(a.seed, ((j.n as u64) << 32) | j.rep as u64);
            let spec = ModelSpec { kernel: j.kernel, ..base.clone() };
            replicate(t, m, j.n, curves, &spec, seed)
        })
        .collect();

    let ncol = t.value_columns().len();
    let mut rows = Vec::new();
    let mut first_err = None;
    let mut settings: Vec<String> = Vec::new();
    for (j, r) in jobs.iter().zip(results) {
        if !settings.contains(&j.setting) {
            settings.push(j.setting.clone());
        }
        match r {
            Ok(values) => rows.push(Row {
                setting: j.setting.clone(),
                rep: j.rep.to_string(),
                status: "ok".into(),
                values,
            }),
            Err(e) => {
                rows.push(Row {
                    setting: j.setting.clone(),
                    rep: j.rep.to_string(),
                    status: format!("failed: {e}"),
                    values: vec![None; ncol],
                });
                first_err.get_or_insert(e);
            }
        }
    }
    for s in &settings {
        let ok: Vec<&Row> = rows.iter().filter(|r| &r.setting == s && r.status == "ok").collect();
        rows.push(mean_row(s, &ok, ncol));
    }
    if matches!(t, Table::T3 | Table::TOp) {
        rows.push(Row {
            setting: "NP".into(),
            rep: "-".into(),
            status: "not_reproduced".into(),
            values: vec![None; ncol],
        });
    }
    Ok((rows, first_err))
}

fn mean_row(setting: &str, ok: &[&Row], ncol: usize) -> Row {
    let values = (0..ncol)
        .map(|c| {
            let v: Vec<f64> = ok.iter().filter_map(|r| r.values[c]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Row {
        setting: setting.to_string(),
        rep: "mean".into(),
        status: format!("ok={}", ok.len()),
        values,
    }
}

fn theta3(model: &FittedModel) -> [Option<f64>; 3] {
    let th = model.theta.natural();
    if model.theta.kind() == KernelKind::SeLinear && th.len() == 3 {
        [Some(th[0]), Some(th[1]), Some(th[2])]
    } else {
        [None; 3]
    }
}

fn replicate(t: Table, m: usize, n: usize, curves: usize, spec: &ModelSpec, seed: u64) -> Result<Vec<Option<f64>>> {
    match t {
        Table::T1 => {
            let sim = t.scenario().generate(m, n, seed)?;
            let model = fit(&sim.data, &ModelSpec { seed, ..spec.clone() })?;
            let [w, v, a] = theta3(&model);
            Ok(vec![
                Some(model.basis.dim() as f64),
                w,
                v,
                a,
                Some(model.log_marginal),
                Some(model.bic),
                Some(f64::from(u8::from(model.converged))),
            ])
        }
        Table::T2 | Table::T3 | Table::TOp => {
            let s = InterpSettings {
                scenario: t.scenario(),
                m,
                n,
                curves,
                fraction: 2.0 / 3.0,
                spec: spec.clone(),
            };
            let out = interpolation_replication(&s, seed)?;
            let mut v = vec![Some(out.model.basis.dim() as f64)];
            if t == Table::T2 {
                v.extend(theta3(&out.model));
            }
            v.extend([Some(out.mean_rmse()), Some(out.mean_r()), out.pooled_r().ok()]);
            Ok(v)
        }
        Table::Ordinal => {
            let out = ordinal_replication(m, n, curves, spec, seed)?;
            let b = out.model.family.thresholds().unwrap_or(&[]).to_vec();
            let [w, v, a] = theta3(&out.model);
            Ok(vec![
                Some(out.model.basis.dim() as f64),
                b.first().copied(),
                b.get(1).copied(),
                w,
                v,
                a,
                Some(out.mean_interp()),
                Some(out.mean_extrap()),
            ])
        }
    }
}

/// Writes the rows as CSV.
pub fn write_rows<W: Write>(t: Table, rows: &[Row], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["table", "setting", "rep", "status"];
    header.extend(t.value_columns());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        let mut rec = vec![t.name().to_string(), r.setting.clone(), r.rep.clone(), r.status.clone()];
        rec.extend(r.values.iter().map(|v| crate::commands::cell(*v)));
        w.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the table, writes every row (failures included) and then reports
/// the first failure as the error.
pub fn reproduce<W: Write>(a: &ReproduceArgs, out: W) -> Result<()> {
    let (rows, err) = run_table(a)?;
    write_rows(a.table, &rows, out)?;
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
