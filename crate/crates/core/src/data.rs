//! Synthetic feature, ground-truth and observation generation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::activations::ActivationKind;
use crate::error::{invalid, Result};
use crate::model::predict_rows;
use crate::rng::RngSeed;
use crate::types::{FactorPair, FeatureSet, Observation, ObservationSet};

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Row-major fill order so that a prefix of rows does not depend on `rows`.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

/// I.i.d. standard normal features `X: n1×d1`, `Y: n2×d2`.
pub fn gen_gaussian_features(n1: usize, n2: usize, d1: usize, d2: usize, seed: RngSeed) -> Result<FeatureSet> {
    if n1 == 0 || n2 == 0 || d1 == 0 || d2 == 0 {
        return invalid(format!("all dimensions must be >= 1 (n1={n1}, n2={n2}, d1={d1}, d2={d2})"));
    }
    let mut rng = seed.rng();
    let x = gaussian_matrix(n1, d1, &mut rng);
    let y = gaussian_matrix(n2, d2, &mut rng);
    FeatureSet::new(x, y)
}

/// Draws `m` cells uniformly with replacement from the `n₁×n₂` grid and labels
/// each with the ground-truth prediction.
pub fn sample_observations(fs: &FeatureSet, truth: &FactorPair, m: usize, seed: RngSeed) -> Result<ObservationSet> {
    if m == 0 {
        return invalid("observation count must be >= 1");
    }
    fs.check_factors(truth)?;
    let mut rng = seed.rng();
    let rows = Uniform::new(0, fs.n1());
    let cols = Uniform::new(0, fs.n2());
    let cells: Vec<(usize, usize)> = (0..m).map(|_| (rows.sample(&mut rng), cols.sample(&mut rng))).collect();
    let (pu, pv) = predict_rows(truth, fs);
    Ok(cells
        .into_iter()
        .map(|(i, j)| Observation { i, j, a: crate::model::row_dot(&pu, i, &pv, j) })
        .collect())
}

/// Every cell of the grid exactly once, row-major, labelled by `truth`.
pub fn full_grid_observations(fs: &FeatureSet, truth: &FactorPair) -> Result<ObservationSet> {
    fs.check_factors(truth)?;
    let (pu, pv) = predict_rows(truth, fs);
    let mut out = Vec::with_capacity(fs.n1() * fs.n2());
    for i in 0..fs.n1() {
        for j in 0..fs.n2() {
            out.push(Observation { i, j, a: crate::model::row_dot(&pu, i, &pv, j) });
        }
    }
    Ok(ObservationSet::new(out))
}

/// Random matrix `Q₁·diag(s)·Q₂ᵀ` with orthonormal `Q₁` (d×k), orthogonal `Q₂`
/// (k×k) and singular values `s` drawn uniformly from `[1, kappa]` with the
/// smallest pinned to 1, so `σ_k = 1` and `κ ≤ kappa`.
pub fn conditioned_matrix<R: Rng + ?Sized>(d: usize, k: usize, kappa: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if k == 0 || k > d {
        return invalid(format!("need 1 <= k <= d, got k={k}, d={d}"));
    }
    if !(kappa >= 1.0) {
        return invalid(format!("kappa must be >= 1, got {kappa}"));
    }
    let q1 = gaussian_matrix(d, k, rng).qr().q();
    let q2 = gaussian_matrix(k, k, rng).qr().q();
    let mut s: Vec<f64> = (0..k).map(|_| if kappa > 1.0 { rng.gen_range(1.0..kappa) } else { 1.0 }).collect();
    s[0] = 1.0;
    let mut m = q1;
    for (c, sc) in s.iter().enumerate() {
        m.column_mut(c).scale_mut(*sc);
    }
    Ok(m * q2.transpose())
}

/// Gaussian `d×k` matrix rescaled so its smallest singular value is 1.
pub fn normalized_gaussian_matrix<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if k == 0 || k > d {
        return invalid(format!("need 1 <= k <= d, got k={k}, d={d}"));
    }
    loop {
        let g = gaussian_matrix(d, k, rng);
        let smin = g.clone().svd(false, false).singular_values.min();
        if smin > 1e-8 {
            return Ok(g / smin);
        }
    }
}

/// How synthetic ground truth is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruthSpec {
    /// Gaussian factors normalized to `σ_k = 1`.
    Gaussian,
    /// Factors with `σ_k = 1` and condition number at most `kappa`.
    Conditioned { kappa: f64 },
}

pub fn gen_truth(kind: ActivationKind, d1: usize, d2: usize, k: usize, spec: TruthSpec, seed: RngSeed) -> Result<FactorPair> {
    let mut rng = seed.rng();
    let (u, v) = match spec {
        TruthSpec::Gaussian => (normalized_gaussian_matrix(d1, k, &mut rng)?, normalized_gaussian_matrix(d2, k, &mut rng)?),
        TruthSpec::Conditioned { kappa } => (conditioned_matrix(d1, k, kappa, &mut rng)?, conditioned_matrix(d2, k, kappa, &mut rng)?),
    };
    FactorPair::new(u, v, kind)
}

/// Random starting point with entries i.i.d. `N(0, 1/d)` per factor.
pub fn random_init(kind: ActivationKind, d1: usize, d2: usize, k: usize, seed: RngSeed) -> Result<FactorPair> {
    let mut rng = seed.rng();
    let u = gaussian_matrix(d1, k, &mut rng) / (d1 as f64).sqrt();
    let v = gaussian_matrix(d2, k, &mut rng) / (d2 as f64).sqrt();
    FactorPair::new(u, v, kind)
}

/// `truth` displaced along a random direction so that
/// `‖U − U*‖₂ + ‖V − V*‖₂ = radius` (spectral norms).
pub fn perturb_within(truth: &FactorPair, radius: f64, seed: RngSeed) -> Result<FactorPair> {
    let mut rng = seed.rng();
    let du = gaussian_matrix(truth.d1(), truth.rank(), &mut rng);
    let dv = gaussian_matrix(truth.d2(), truth.rank(), &mut rng);
    let norm = spectral_norm(&du) + spectral_norm(&dv);
    let scale = radius / norm;
    FactorPair::new(truth.u() + du * scale, truth.v() + dv * scale, truth.activation())
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}
