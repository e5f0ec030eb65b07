//! Plain-text model files.
//!
//! One `key = value` per line after a version header. Floats use Rust's
//! shortest round-trip formatting, so save → load reproduces every number
//! bit for bit. The training batches are stored too, since predictions for
//! new batches mix over the training posteriors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::basis::{KnotMethod, SplineBasis};
use crate::data::FunctionalBatch;
use crate::error::{Error, Result};
use crate::family::ObservationFamily;
use crate::fit::{FittedModel, Group, ObjectiveKind, Standardization};
use crate::kernels::{KernelKind, KernelParams};
use crate::latent::LatentPosterior;

pub const FORMAT_VERSION: &str = "ggpfr-model v1";

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Row-major with a `rows cols` prefix.
fn mat(m: &DMatrix<f64>) -> String {
    let mut s = format!("{} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            write!(s, " {}", m[(i, j)]).expect("string write");
        }
    }
    s
}

pub fn write_model(model: &FittedModel) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    put("format", FORMAT_VERSION.into());
    let f = &model.family;
    put("family", f.tag().into());
    match f {
        ObservationFamily::BinomialLogit { trials } => put("family.trials", trials.to_string()),
        ObservationFamily::OrdinalProbit { thresholds, noise_var } => {
            put("family.thresholds", join(thresholds));
            put("family.noise_var", noise_var.to_string());
        }
        ObservationFamily::Gaussian { noise_var } => put("family.noise_var", noise_var.to_string()),
        _ => {}
    }
    put("kernel.kind", model.theta.kind().name().into());
    put("kernel.input_dim", model.theta.input_dim().to_string());
    put("kernel.log_params", join(model.theta.log_params()));
    if let Some(g) = &model.gamma {
        put("gamma", join(g));
    }
    put("basis.degree", model.basis.degree().to_string());
    put("basis.knots", join(model.basis.knots()));
    put("basis.method", model.knots.to_string());
    put("coef", mat(&model.coef));
    put("objective", model.objective.to_string());
    put("jitter", model.jitter.to_string());
    if let Some(s) = &model.standardization {
        put("standardize.center", join(&s.center));
        put("standardize.scale", join(&s.scale));
    }
    put("log_marginal", model.log_marginal.to_string());
    put("bic", model.bic.to_string());
    put("regret", model.regret.to_string());
    put("evaluations", model.evaluations.to_string());
    put("penalties", model.penalties.to_string());
    put("converged", model.converged.to_string());
    put("fit_trace", join(&model.fit_trace));
    put("batches", model.training.len().to_string());
    for (m, b) in model.training.iter().enumerate() {
        put(&format!("batch.{m}.id"), b.batch_id.clone());
        if let Some(c) = &b.cluster_id {
            put(&format!("batch.{m}.cluster"), c.clone());
        }
        put(&format!("batch.{m}.t"), join(&b.times));
        put(&format!("batch.{m}.z"), join(&b.responses));
        put(&format!("batch.{m}.x"), mat(&b.covariates));
        put(&format!("batch.{m}.u"), join(b.scalar_covariates.as_slice()));
        if let Some(w) = &b.re_covariates {
            put(&format!("batch.{m}.w"), mat(w));
        }
    }
    put("groups", model.groups.len().to_string());
    for (k, (members, p)) in model.groups.iter().zip(&model.per_batch).enumerate() {
        put(&format!("group.{k}.members"), members.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(" "));
        put(&format!("group.{k}.mode"), join(p.mode.as_slice()));
        put(&format!("group.{k}.alpha"), join(p.alpha.as_slice()));
        put(&format!("group.{k}.curvature"), join(p.neg_hessian_diag.as_slice()));
        put(&format!("group.{k}.jitter_added"), p.jitter_added.to_string());
        put(&format!("group.{k}.log_marginal"), p.log_marginal_contribution.to_string());
    }
    out
}

pub fn save_model(model: &FittedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    read_model(&std::fs::read_to_string(path)?)
}

struct Fields {
    map: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn raw(&self, key: &str) -> Result<(usize, &str)> {
        self.map
            .get(key)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| Error::Parse {
                line: self.map.len() + 2,
                msg: format!("missing key {key:?} (truncated file?)"),
            })
    }

    fn opt(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(_, v)| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (line, v) = self.raw(key)?;
        v.trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad value for {key}: {v:?}"),
        })
    }

    fn floats(&self, key: &str) -> Result<Vec<f64>> {
        let (line, v) = self.raw(key)?;
        floats(line, key, v)
    }

    fn matrix(&self, key: &str) -> Result<DMatrix<f64>> {
        let (line, v) = self.raw(key)?;
        let f = floats(line, key, v)?;
        let bad = || Error::Parse {
            line,
            msg: format!("bad matrix for {key}"),
        };
        if f.len() < 2 || f[0] < 0.0 || f[1] < 0.0 || f[0].fract() != 0.0 || f[1].fract() != 0.0 {
            return Err(bad());
        }
        let (r, c) = (f[0] as usize, f[1] as usize);
        if f.len() != 2 + r * c {
            return Err(bad());
        }
        Ok(DMatrix::from_row_slice(r, c, &f[2..]))
    }
}

fn floats(line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split_whitespace()
        .map(|s| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number {s:?} for {key}"),
            })
        })
        .collect()
}

pub fn read_model(text: &str) -> Result<FittedModel> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let version = header.strip_prefix("format = ").ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing format header".into(),
    })?;
    if version.trim() != FORMAT_VERSION {
        return Err(Error::Version {
            found: version.trim().to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    let mut map = BTreeMap::new();
    for (i, l) in lines.enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let (k, v) = l.split_once(" = ").ok_or_else(|| Error::Parse {
            line: i + 2,
            msg: format!("expected `key = value`, got {l:?}"),
        })?;
        map.insert(k.trim().to_string(), (i + 2, v.to_string()));
    }
    let f = Fields { map };

    let family = match f.raw("family")?.1.trim() {
        "bernoulli" => ObservationFamily::BernoulliLogit,
        "binomial" => ObservationFamily::BinomialLogit { trials: f.parse("family.trials")? },
        "poisson" => ObservationFamily::PoissonLog,
        "ordinal" => ObservationFamily::ordinal_with_noise(f.floats("family.thresholds")?, f.parse("family.noise_var")?)?,
        "gaussian" => ObservationFamily::Gaussian { noise_var: f.parse("family.noise_var")? },
        other => {
            return Err(Error::Parse {
                line: f.raw("family")?.0,
                msg: format!("unknown family {other:?}"),
            })
        }
    };
    let kind: KernelKind = f.parse("kernel.kind")?;
    let theta = KernelParams::new(kind, f.parse("kernel.input_dim")?, f.floats("kernel.log_params")?)?;
    let gamma = f.opt("gamma").map(|_| f.floats("gamma")).transpose()?;
    let basis = SplineBasis::from_knots(f.parse("basis.degree")?, f.floats("basis.knots")?)?;
    let knots: KnotMethod = f.parse("basis.method")?;
    let objective: ObjectiveKind = f.parse("objective")?;
    let coef = f.matrix("coef")?;
    let jitter: f64 = f.parse("jitter")?;
    let standardization = match f.opt("standardize.center") {
        Some(_) => Some(Standardization {
            center: f.floats("standardize.center")?,
            scale: f.floats("standardize.scale")?,
        }),
        None => None,
    };
    let converged: bool = f.parse("converged")?;

    let n_batches: usize = f.parse("batches")?;
    let mut training = Vec::with_capacity(n_batches);
    for m in 0..n_batches {
        let mut b = FunctionalBatch::new(
            f.raw(&format!("batch.{m}.id"))?.1.to_string(),
            f.floats(&format!("batch.{m}.t"))?,
            f.floats(&format!("batch.{m}.z"))?,
            f.matrix(&format!("batch.{m}.x"))?,
            DVector::from_vec(f.floats(&format!("batch.{m}.u"))?),
        )?;
        if f.opt(&format!("batch.{m}.w")).is_some() {
            let w = f.matrix(&format!("batch.{m}.w"))?;
            let c = f.opt(&format!("batch.{m}.cluster")).unwrap_or("").to_string();
            b = b.with_random_effects(w, c)?;
        }
        training.push(b);
    }

    let n_groups: usize = f.parse("groups")?;
    let mut groups = Vec::with_capacity(n_groups);
    let mut per_batch = Vec::with_capacity(n_groups);
    for k in 0..n_groups {
        let (line, mv) = f.raw(&format!("group.{k}.members"))?;
        let members: Vec<usize> = mv
            .split_whitespace()
            .map(|s| s.parse().ok().filter(|&m: &usize| m < n_batches))
            .collect::<Option<_>>()
            .filter(|v: &Vec<usize>| !v.is_empty())
            .ok_or_else(|| Error::Parse {
                line,
                msg: "bad group members".into(),
            })?;
        let g = Group::build(&training, members.clone(), &basis, standardization.as_ref(), gamma.is_some());
        let jitter_added: f64 = f.parse(&format!("group.{k}.jitter_added"))?;
        let mut gram = g.covariance(&theta, jitter, gamma.as_deref())?;
        for i in 0..gram.nrows() {
            gram[(i, i)] += jitter_added;
        }
        per_batch.push(LatentPosterior::from_parts(
            gram,
            DVector::from_vec(f.floats(&format!("group.{k}.mode"))?),
            DVector::from_vec(f.floats(&format!("group.{k}.alpha"))?),
            DVector::from_vec(f.floats(&format!("group.{k}.curvature"))?),
            jitter_added,
            f.parse(&format!("group.{k}.log_marginal"))?,
        )?);
        groups.push(members);
    }

    let fit_trace = match f.opt("fit_trace") {
        Some(s) if !s.trim().is_empty() => f.floats("fit_trace")?,
        _ => Vec::new(),
    };
    Ok(FittedModel {
        family,
        coef,
        theta,
        gamma,
        basis,
        knots,
        objective,
        jitter,
        standardization,
        training,
        groups,
        per_batch,
        log_marginal: f.parse("log_marginal")?,
        bic: f.parse("bic")?,
        fit_trace,
        evaluations: f.parse("evaluations")?,
        penalties: f.parse("penalties")?,
        converged,
        regret: f.parse("regret")?,
    })
}
