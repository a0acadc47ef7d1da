//! Expectations under the standard normal distribution.
//!
//! Two rules are provided. [`GaussHermite`] integrates smooth integrands
//! against the N(0,1) density with geometric convergence. For integrands with
//! narrow features (steep sigmoids at large scale) or a kink at the origin,
//! [`composite_normal_expectation`] splits [-L, L] into short panels with a
//! breakpoint at zero and applies Gauss–Legendre on each.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, SymmetricEigen};
use std::sync::{Arc, Mutex, OnceLock};

/// Largest node count for which the orthonormal Hermite recurrence stays in
/// floating-point range at the outermost node.
pub const MAX_HERMITE_NODES: usize = 512;

/// Gauss–Hermite rule rescaled so that `Σ wᵢ f(zᵢ) ≈ E_{z∼N(0,1)}[f(z)]`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `n`-point rule. Initial nodes and weights come from the
    /// eigen-decomposition of the Jacobi matrix of the probabilists' Hermite
    /// recurrence; each node is then polished by Newton iteration on the
    /// orthonormal recurrence wherever that stays in floating-point range.
    pub fn new(n: usize) -> Self {
        assert!((1..=MAX_HERMITE_NODES).contains(&n), "node count {n} out of range");
        let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|c| (eig.eigenvalues[c], eig.eigenvectors[(0, c)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let pim4 = PI.powf(-0.25);
        let nf = n as f64;
        for pair in pairs.iter_mut() {
            // Newton in the physicists' variable t = z/√2.
            let mut t = pair.0 / SQRT_2;
            let mut weight = None;
            for _ in 0..8 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = t * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                let pp = (2.0 * nf).sqrt() * p2;
                let step = p1 / pp;
                if !step.is_finite() || !pp.is_finite() || pp == 0.0 {
                    weight = None;
                    break;
                }
                t -= step;
                weight = Some(2.0 / (pp * pp) / PI.sqrt());
                if step.abs() <= 1e-15 * t.abs().max(1.0) {
                    break;
                }
            }
            if let Some(w) = weight {
                if (t * SQRT_2 - pair.0).abs() < 1e-8 && w.is_finite() {
                    *pair = (t * SQRT_2, w);
                }
            }
        }
        GaussHermite { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
    }

    /// Shared, lazily built rule for `n` nodes.
    pub fn cached(n: usize) -> Arc<GaussHermite> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard.entry(n).or_insert_with(|| Arc::new(GaussHermite::new(n))).clone()
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

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&z, &w)| w * f(z)).sum()
    }
}

fn gauss_legendre_20() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = 20;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n / 2 {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
                }
                pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() < 1e-16 {
                    break;
                }
            }
            x[i] = -z;
            x[n - 1 - i] = z;
            w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
            w[n - 1 - i] = w[i];
        }
        (x, w)
    })
}

/// `E_{z∼N(0,1)}[f(z)]` by composite 20-point Gauss–Legendre on [-13, 13]
/// with panels of width 0.05 and a breakpoint at zero. Mass outside the
/// window is below 1e-37.
pub fn composite_normal_expectation<F: Fn(f64) -> f64>(f: F) -> f64 {
    const HALF_WIDTH: f64 = 13.0;
    const PANELS_PER_SIDE: usize = 260;
    let (x, w) = gauss_legendre_20();
    let h = HALF_WIDTH / PANELS_PER_SIDE as f64;
    let norm = 1.0 / (2.0 * PI).sqrt();
    let mut total = 0.0;
    for p in 0..2 * PANELS_PER_SIDE {
        let a = -HALF_WIDTH + p as f64 * h;
        let mid = a + 0.5 * h;
        let mut s = 0.0;
        for (&xi, &wi) in x.iter().zip(w) {
            let z = mid + 0.5 * h * xi;
            s += wi * f(z) * (-0.5 * z * z).exp();
        }
        total += 0.5 * h * s;
    }
    total * norm
}
