//! Gauss–Hermite quadrature for expectations under a normal law.

use std::f64::consts::PI;

/// Default node count for one-dimensional latent integrals.
pub const DEFAULT_NODES: usize = 30;

/// Gauss–Hermite rule for the weight `exp(-x²)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes via Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "need at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let pim4 = PI.powf(-0.25);
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        if n % 2 == 1 {
            nodes[m - 1] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E f(X)` for `X ~ N(mean, var)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, var: f64, mut f: F) -> f64 {
        let s = (2.0 * var.max(0.0)).sqrt();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mean + s * x);
        }
        acc / PI.sqrt()
    }

    /// Several expectations sharing the same nodes.
    pub fn expect_many<const K: usize, F: FnMut(f64) -> [f64; K]>(
        &self,
        mean: f64,
        var: f64,
        mut f: F,
    ) -> [f64; K] {
        let s = (2.0 * var.max(0.0)).sqrt();
        let mut acc = [0.0; K];
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let v = f(mean + s * x);
            for k in 0..K {
                acc[k] += w * v[k];
            }
        }
        let c = PI.sqrt();
        acc.map(|a| a / c)
    }
}

impl Default for GaussHermite {
    fn default() -> Self {
        Self::new(DEFAULT_NODES)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_integrate_polynomials() {
        let gh = GaussHermite::new(30);
        let total: f64 = gh.weights().iter().sum();
        assert!((total - PI.sqrt()).abs() < 1e-13);
        // E X^2 = var, E X^4 = 3 var^2 under N(0, var)
        let m2 = gh.expect(0.0, 2.0, |x| x * x);
        let m4 = gh.expect(0.0, 2.0, |x| x.powi(4));
        assert!((m2 - 2.0).abs() < 1e-12);
        assert!((m4 - 12.0).abs() < 1e-11);
        assert!((gh.expect(1.5, 0.3, |x| x) - 1.5).abs() < 1e-13);
    }

    #[test]
    fn odd_and_small_rules() {
        for n in [1, 2, 3, 5, 40, 60] {
            let gh = GaussHermite::new(n);
            assert_eq!(gh.len(), n);
            assert!((gh.expect(0.7, 1.0, |_| 1.0) - 1.0).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn expect_exp_matches_mgf() {
        let gh = GaussHermite::new(30);
        let v = gh.expect(0.2, 0.5, f64::exp);
        assert!((v - (0.2f64 + 0.25).exp()).abs() < 1e-12);
    }
}
