//! Clamped cubic B-spline basis for the functional mean coefficient.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const CUBIC: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotMethod {
    EqualSpaced,
    Quantile,
}

impl fmt::Display for KnotMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KnotMethod::EqualSpaced => "equal",
            KnotMethod::Quantile => "quantile",
        })
    }
}

impl FromStr for KnotMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "equal" | "equal_spaced" => Ok(KnotMethod::EqualSpaced),
            "quantile" => Ok(KnotMethod::Quantile),
            other => Err(Error::InvalidParameter(format!("unknown knot method '{other}'"))),
        }
    }
}

/// B-spline basis defined by a clamped knot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    /// Builds from a full knot vector. Boundary knots must have multiplicity
    /// `degree + 1`.
    pub fn from_knots(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 * (degree + 1) {
            return Err(Error::InvalidParameter(format!(
                "need at least {} knots for degree {degree}",
                2 * (degree + 1)
            )));
        }
        if knots.windows(2).any(|w| !(w[0] <= w[1])) || knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidParameter("knots must be finite and non-decreasing".into()));
        }
        let (lo, hi) = (knots[0], knots[knots.len() - 1]);
        if !(lo < hi)
            || knots[..=degree].iter().any(|k| *k != lo)
            || knots[knots.len() - degree - 1..].iter().any(|k| *k != hi)
        {
            return Err(Error::InvalidParameter("boundary knots must be clamped".into()));
        }
        Ok(Self { degree, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn dim(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.knots.len() - self.degree - 1]
    }

    /// Values of all basis functions at `t` (clamped into the domain).
    pub fn basis_row(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let (span, vals) = self.nonzero(t);
        for (k, v) in vals.into_iter().enumerate() {
            out[span - self.degree + k] = v;
        }
        out
    }

    /// Knot span index `i` with `knots[i] <= t < knots[i+1]` (last
    /// non-degenerate span at the right end) and the `degree + 1` nonzero
    /// basis values `N_{i-p..=i}(t)`, via the triangular Cox–de Boor scheme.
    fn nonzero(&self, t: f64) -> (usize, Vec<f64>) {
        let p = self.degree;
        let u = &self.knots;
        let (lo, hi) = self.domain();
        let t = if t.is_nan() { lo } else { t.clamp(lo, hi) };
        let n = self.dim() - 1;
        let span = if t >= u[n + 1] {
            n
        } else {
            // largest i in [p, n] with u[i] <= t
            let mut i = u[p..=n + 1].partition_point(|k| *k <= t) + p - 1;
            while u[i] == u[i + 1] {
                i -= 1;
            }
            i
        };
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        (span, vals)
    }

    /// Design matrix with row `i` equal to `basis_row(times[i])`.
    pub fn design_matrix(&self, times: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut m = DMatrix::zeros(times.len(), d);
        for (i, &t) in times.iter().enumerate() {
            let (span, vals) = self.nonzero(t);
            for (k, v) in vals.into_iter().enumerate() {
                m[(i, span - self.degree + k)] = v;
            }
        }
        m
    }
}

/// Places cubic-spline knots for `n_basis` basis functions over the pooled
/// time points.
pub fn place_knots(times_all: &[f64], n_basis: usize, method: KnotMethod) -> Result<SplineBasis> {
    let degree = CUBIC;
    if n_basis < degree + 1 {
        return Err(Error::InvalidParameter(format!(
            "number of basis functions {n_basis} is below {}",
            degree + 1
        )));
    }
    if times_all.is_empty() {
        return Err(Error::InvalidParameter("no time points to place knots on".into()));
    }
    let mut sorted: Vec<f64> = times_all.to_vec();
    if sorted.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidParameter("non-finite time point".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if !(lo < hi) {
        return Err(Error::InvalidParameter("all time points are identical".into()));
    }
    let n_interior = n_basis - degree - 1;
    let segments = (n_interior + 1) as f64;
    let interior: Vec<f64> = (1..=n_interior)
        .map(|k| {
            let frac = k as f64 / segments;
            match method {
                KnotMethod::EqualSpaced => lo + (hi - lo) * frac,
                KnotMethod::Quantile => sample_quantile(&sorted, frac),
            }
        })
        .collect();
    let mut knots = vec![lo; degree + 1];
    knots.extend(interior);
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    SplineBasis::from_knots(degree, knots)
}

/// Linear-interpolation sample quantile of a sorted sample.
pub fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let i = h.floor() as usize;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + (h - i as f64) * (sorted[i + 1] - sorted[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: B_{i,4}(t) = (u_{i+4} - u_i) [u_i..u_{i+4}] (· - t)_+^3,
    /// divided differences with repeated nodes handled through derivatives.
    fn divided_difference_basis(knots: &[f64], i: usize, t: f64) -> f64 {
        fn f(x: f64, t: f64, m: usize) -> f64 {
            // m-th derivative in x of (x - t)_+^3, divided by m!
            let d = x - t;
            if d <= 0.0 {
                return 0.0;
            }
            match m {
                0 => d.powi(3),
                1 => 3.0 * d * d,
                2 => 3.0 * d,
                3 => 1.0,
                _ => 0.0,
            }
        }
        fn dd(nodes: &[f64], t: f64) -> f64 {
            let k = nodes.len() - 1;
            if nodes[k] == nodes[0] {
                return f(nodes[0], t, k);
            }
            (dd(&nodes[1..], t) - dd(&nodes[..k], t)) / (nodes[k] - nodes[0])
        }
        (knots[i + 4] - knots[i]) * dd(&knots[i..=i + 4], t)
    }

    #[test]
    fn minimal_basis_has_no_interior_knots() {
        let b = place_knots(&[0.0, 1.0], 4, KnotMethod::EqualSpaced).unwrap();
        assert_eq!(b.knots(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(b.dim(), 4);
    }

    #[test]
    fn equal_spaced_interior_knots() {
        let times: Vec<f64> = (0..81).map(|i| -4.0 + 0.1 * i as f64).collect();
        let b = place_knots(&times, 10, KnotMethod::EqualSpaced).unwrap();
        let int = b.interior_knots();
        assert_eq!(int.len(), 6);
        for (k, v) in int.iter().enumerate() {
            assert!((v - (-4.0 + 8.0 * (k + 1) as f64 / 7.0)).abs() < 1e-12);
        }
        assert_eq!(b.dim(), 10);
    }

    #[test]
    fn quantile_knots_follow_sorted_sample() {
        // skewed sample
        let times: Vec<f64> = (0..50).map(|i| ((i as f64) / 49.0).powi(3) * 10.0).collect();
        let b = place_knots(&times, 10, KnotMethod::Quantile).unwrap();
        let mut sorted = times.clone();
        sorted.sort_by(f64::total_cmp);
        for (k, v) in b.interior_knots().iter().enumerate() {
            let p = (k + 1) as f64 / 7.0;
            let h = 49.0 * p;
            let lo = h.floor() as usize;
            let want = sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo]);
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn knot_errors() {
        assert!(place_knots(&[0.0, 1.0], 3, KnotMethod::EqualSpaced).is_err());
        assert!(place_knots(&[2.0, 2.0], 6, KnotMethod::EqualSpaced).is_err());
        assert!(place_knots(&[], 6, KnotMethod::EqualSpaced).is_err());
    }

    #[test]
    fn boundary_rows_are_unit_vectors() {
        let b = place_knots(&[-4.0, 4.0], 7, KnotMethod::EqualSpaced).unwrap();
        let r0 = b.basis_row(-4.0);
        assert_eq!(r0[0], 1.0);
        assert!(r0[1..].iter().all(|v| *v == 0.0));
        let r1 = b.basis_row(4.0);
        assert_eq!(r1[6], 1.0);
        // clamping outside the domain
        assert_eq!(b.basis_row(-10.0), r0);
        assert_eq!(b.basis_row(12.0), r1);
    }

    #[test]
    fn design_matrix_rows_match_basis_row() {
        let b = place_knots(&[0.0, 5.0], 8, KnotMethod::EqualSpaced).unwrap();
        let times = [0.0, 0.7, 2.5, 4.99, 5.0];
        let m = b.design_matrix(&times);
        for (i, t) in times.iter().enumerate() {
            let r = b.basis_row(*t);
            for d in 0..8 {
                assert_eq!(m[(i, d)], r[d]);
            }
        }
    }

    #[test]
    fn constants_are_reproduced() {
        let b = place_knots(&[0.0, 3.0], 9, KnotMethod::EqualSpaced).unwrap();
        let coef = vec![2.5; 9];
        for k in 0..=30 {
            let t = 0.1 * k as f64;
            let v: f64 = b.basis_row(t).iter().zip(&coef).map(|(a, c)| a * c).sum();
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_local_support(t in -4.0f64..4.0, d in 4usize..13) {
            let b = place_knots(&[-4.0, 4.0], d, KnotMethod::EqualSpaced).unwrap();
            let row = b.basis_row(t);
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= 4);
            let u = b.knots();
            for (i, v) in row.iter().enumerate() {
                if t < u[i] || t > u[i + 4] {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }

        #[test]
        fn de_boor_matches_divided_differences(t in -3.999f64..3.999, d in 4usize..13) {
            let b = place_knots(&[-4.0, 4.0], d, KnotMethod::EqualSpaced).unwrap();
            let row = b.basis_row(t);
            for (i, v) in row.iter().enumerate() {
                let oracle = divided_difference_basis(b.knots(), i, t);
                prop_assert!((v - oracle).abs() < 1e-12, "i={} {} vs {}", i, v, oracle);
            }
        }
    }
}
