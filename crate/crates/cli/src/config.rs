//! Flat `key = value` configuration with command-line overrides.
//!
//! Recognized model keys:
//!
//! | key | value |
//! |---|---|
//! | `family` | `bernoulli`, `binomial`, `poisson`, `ordinal`, `gaussian` |
//! | `family.trials` | binomial trials |
//! | `family.thresholds` | ordinal starting thresholds, comma separated |
//! | `family.noise_var` | ordinal / gaussian noise variance |
//! | `family.auto_thresholds` | `true` to start thresholds from category frequencies |
//! | `kernel.kind` | `se`, `matern32`, `rq`, `pp2` |
//! | `kernel.init` | natural-scale starting hyper-parameters, comma separated |
//! | `basis.D` | an integer, or `auto` |
//! | `basis.grid` | grid for `auto`, e.g. `4,6,8` or `4..12` |
//! | `basis.knots` | `equal` or `quantile` |
//! | `objective` | `nested` or `laplace` |
//! | `optimizer.max_evals`, `optimizer.tol` | optimizer budget and tolerance |
//! | `restarts`, `seed`, `jitter`, `standardize` | |

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ggpfr::{BasisDim, Error, KernelKind, KnotMethod, ModelSpec, ObjectiveKind, ObservationFamily, Result};

pub const MODEL_KEYS: &[&str] = &[
    "family",
    "family.trials",
    "family.thresholds",
    "family.noise_var",
    "family.auto_thresholds",
    "kernel.kind",
    "kernel.init",
    "basis.D",
    "basis.grid",
    "basis.knots",
    "objective",
    "optimizer.max_evals",
    "optimizer.tol",
    "restarts",
    "seed",
    "jitter",
    "standardize",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Later values win.
    pub fn merge(&mut self, other: KeyValues) {
        self.0.extend(other.0);
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::InvalidParameter(format!("bad value for {key}: {v:?}"))))
            .transpose()
    }

    /// Errors on keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.0.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::InvalidParameter(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}

/// `key=value` from the command line.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::InvalidParameter(format!("bad number {t:?} in list {s:?}"))))
        .collect()
}

/// `4,6,8` or `4..12` (inclusive).
pub fn parse_grid(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidParameter(format!("bad basis grid {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidParameter(format!("bad boolean for {key}: {v:?}"))),
    }
}

pub fn parse_family(kv: &KeyValues) -> Result<ObservationFamily> {
    let tag = kv.get("family").unwrap_or("bernoulli").to_ascii_lowercase();
    let fam = match tag.as_str() {
        "bernoulli" => ObservationFamily::BernoulliLogit,
        "binomial" => ObservationFamily::BinomialLogit {
            trials: kv.parse_key("family.trials")?.ok_or_else(|| Error::InvalidParameter("binomial family needs family.trials".into()))?,
        },
        "poisson" => ObservationFamily::PoissonLog,
        "ordinal" => {
            let thresholds = match kv.get("family.thresholds") {
                Some(s) => parse_list(s)?,
                None => vec![0.0, 1.0],
            };
            ObservationFamily::ordinal_with_noise(thresholds, kv.parse_key("family.noise_var")?.unwrap_or(1.0))?
        }
        "gaussian" => ObservationFamily::Gaussian {
            noise_var: kv.parse_key("family.noise_var")?.unwrap_or(1.0),
        },
        other => return Err(Error::InvalidParameter(format!("unknown family {other:?}"))),
    };
    fam.validate()?;
    Ok(fam)
}

/// Builds a model specification from the model keys, on top of the
/// defaults.
pub fn model_spec(kv: &KeyValues) -> Result<ModelSpec> {
    let d = ModelSpec::default();
    let family = parse_family(kv)?;
    let auto_thresholds = match kv.get("family.auto_thresholds") {
        Some(v) => parse_bool("family.auto_thresholds", v)?,
        // ordinal data without explicit thresholds start from the data
        None => matches!(family, ObservationFamily::OrdinalProbit { .. }) && kv.get("family.thresholds").is_none(),
    };
    let kernel = kv.parse_key::<KernelKind>("kernel.kind")?.unwrap_or(d.kernel);
    let kernel_init = kv.get("kernel.init").map(parse_list).transpose()?;
    let grid = kv.get("basis.grid").map(parse_grid).transpose()?;
    let basis_dim = match kv.get("basis.D") {
        None | Some("auto") => grid.map(BasisDim::Auto).unwrap_or(d.basis_dim),
        Some(v) => BasisDim::Fixed(v.parse().map_err(|_| Error::InvalidParameter(format!("bad value for basis.D: {v:?}")))?),
    };
    let spec = ModelSpec {
        family,
        auto_thresholds,
        kernel,
        kernel_init,
        basis_dim,
        knots: kv.parse_key::<KnotMethod>("basis.knots")?.unwrap_or(d.knots),
        objective: kv.parse_key::<ObjectiveKind>("objective")?.unwrap_or(d.objective),
        max_evals: kv.parse_key("optimizer.max_evals")?.unwrap_or(d.max_evals),
        tol: kv.parse_key("optimizer.tol")?.unwrap_or(d.tol),
        restarts: kv.parse_key("restarts")?.unwrap_or(d.restarts),
        seed: kv.parse_key("seed")?.unwrap_or(d.seed),
        jitter: kv.parse_key("jitter")?.unwrap_or(d.jitter),
        standardize: kv.get("standardize").map(|v| parse_bool("standardize", v)).transpose()?.unwrap_or(d.standardize),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut kv = KeyValues::parse("# comment\nfamily = poisson\nbasis.D = 6\n\nseed=3 # trailing\n").unwrap();
        kv.merge(KeyValues::parse("seed = 9").unwrap());
        let s = model_spec(&kv).unwrap();
        assert_eq!(s.family, ObservationFamily::PoissonLog);
        assert_eq!(s.basis_dim, BasisDim::Fixed(6));
        assert_eq!(s.seed, 9);
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("4..7").unwrap(), vec![4, 5, 6, 7]);
        assert_eq!(parse_grid("4, 8").unwrap(), vec![4, 8]);
        assert!(parse_grid("8..4").is_err());
        let kv = KeyValues::parse("basis.D = auto\nbasis.grid = 4,6").unwrap();
        assert_eq!(model_spec(&kv).unwrap().basis_dim, BasisDim::Auto(vec![4, 6]));
    }

    #[test]
    fn ordinal_keys() {
        let kv = KeyValues::parse("family = ordinal\nfamily.thresholds = 0.2, 0.7\nfamily.noise_var = 1e-5").unwrap();
        let s = model_spec(&kv).unwrap();
        assert_eq!(s.family.thresholds(), Some(&[0.2, 0.7][..]));
        assert!(!s.auto_thresholds);
        let kv = KeyValues::parse("family = ordinal").unwrap();
        assert!(model_spec(&kv).unwrap().auto_thresholds);
    }

    #[test]
    fn errors() {
        assert!(KeyValues::parse("no equals sign").is_err());
        assert!(model_spec(&KeyValues::parse("family = weibull").unwrap()).is_err());
        assert!(model_spec(&KeyValues::parse("basis.D = 2").unwrap()).is_err());
        assert!(KeyValues::parse("bogus = 1").unwrap().check_keys(MODEL_KEYS).is_err());
    }
}
