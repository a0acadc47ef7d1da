//! Empirical and population Hessians, spectral probes, condition numbers and
//! closed-form lower bounds on the smallest eigenvalue.
//!
//! Parameters are laid out as `u₁,…,u_k` followed by `v₁,…,v_k`, so entry
//! `p` of `uᵢ` sits at `i·d₁ + p` and entry `q` of `vⱼ` at `k·d₁ + j·d₂ + q`.
//! This is the same order as [`FactorPair::to_vec`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{moment_table, ActivationKind};
use crate::data::gaussian_matrix;
use crate::error::{invalid, NimcError, Result};
use crate::model::{side_activations, ReluFixedRow};
use crate::rng::RngSeed;
use crate::types::{FactorPair, FeatureSet, ObservationSet};

/// Leading constant of the ReLU fixed-row bound,
/// `λ_min ≥ RELU_BOUND_CONSTANT/(λ(U*)λ(V*))·(u₀/((1+‖u⁽¹⁾‖)·max(‖U*‖,‖V*‖)))²`.
pub const RELU_BOUND_CONSTANT: f64 = 1.0 / 200.0;

const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HessianLayout {
    /// All `(d₁+d₂)·k` parameters.
    Full,
    /// First row of `U` removed: `((d₁−1)+d₂)·k` parameters.
    ReluFixedRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianMatrix {
    pub h: DMatrix<f64>,
    pub activation: ActivationKind,
    pub layout: HessianLayout,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    /// `|Ω|` for empirical Hessians, `n_mc` for Monte-Carlo ones.
    pub samples: usize,
    pub at_ground_truth: bool,
    /// Largest `|H − Hᵀ|` entry before symmetrization.
    pub asymmetry: f64,
    /// Per-entry Monte-Carlo standard errors, when estimated.
    pub entry_se: Option<DMatrix<f64>>,
}

impl HessianMatrix {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// Conservative operator-norm standard error: the Frobenius norm of the
    /// entry standard errors. Zero when no error estimate is attached.
    pub fn spectral_se(&self) -> f64 {
        self.entry_se.as_ref().map_or(0.0, |s| s.norm())
    }

    pub fn quadratic_form(&self, t: &[f64]) -> Result<f64> {
        if t.len() != self.dim() {
            return invalid(format!("direction has length {}, Hessian is {}x{}", t.len(), self.dim(), self.dim()));
        }
        let t = DVector::from_column_slice(t);
        Ok(t.dot(&(&self.h * &t)))
    }

    /// Restriction of a full ReLU Hessian to the fixed-row parameters. With
    /// `d1 = 1` all of `U` is pinned and only the `V` block remains.
    pub fn drop_first_u_row(&self) -> Result<HessianMatrix> {
        if self.layout != HessianLayout::Full {
            return invalid("Hessian already uses the fixed-row layout");
        }
        let keep: Vec<usize> = (0..self.dim()).filter(|&p| p >= self.k * self.d1 || p % self.d1 != 0).collect();
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(keep.len(), keep.len(), |a, b| m[(keep[a], keep[b])]);
        Ok(HessianMatrix {
            h: pick(&self.h),
            layout: HessianLayout::ReluFixedRow,
            entry_se: self.entry_se.as_ref().map(pick),
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectrumMethod {
    DenseEig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumProbe {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub method: SpectrumMethod,
    pub theoretical_lower_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub kappa_u: f64,
    pub kappa_v: f64,
    pub lambda_max_pair: f64,
    pub kappa_max_pair: f64,
}

/// A Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub se: f64,
}

/// Writes the prediction Jacobian `∂A/∂θ` at one `(x, y)` pair into `out`.
fn jacobian_row(kind: ActivationKind, u: &DMatrix<f64>, v: &DMatrix<f64>, x: &[f64], y: &[f64], out: &mut [f64]) {
    let (d1, d2, k) = (u.nrows(), v.nrows(), u.ncols());
    for i in 0..k {
        let zu: f64 = u.column(i).iter().zip(x).map(|(a, b)| a * b).sum();
        let zv: f64 = v.column(i).iter().zip(y).map(|(a, b)| a * b).sum();
        let (pu, du) = kind.phi_and_prime(zu);
        let (pv, dv) = kind.phi_and_prime(zv);
        for p in 0..d1 {
            out[i * d1 + p] = du * pv * x[p];
        }
        for q in 0..d2 {
            out[k * d1 + i * d2 + q] = pu * dv * y[q];
        }
    }
}

fn finish(mut h: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let asym = (&h - h.transpose()).amax();
    h = (&h + h.transpose()) * 0.5;
    (h, asym)
}

/// Exact Hessian of the averaged squared loss at `fp`, with residuals taken as
/// `h = predict(fp) − predict(truth)`.
///
/// The Gauss–Newton part is `Ê[g gᵀ]` for the prediction Jacobian `g`; the
/// residual part adds `Ê[h·φ″(uᵢᵀx)φ(vᵢᵀy) xxᵀ]` on the `uᵢuᵢ` blocks (and the
/// `vᵢvᵢ` analogue) and `Ê[h·φ′(uᵢᵀx)φ′(vᵢᵀy) xyᵀ]` on the `uᵢvᵢ` blocks. ReLU
/// has `φ″ = 0`, which drops its diagonal residual terms.
pub fn assemble_empirical_hessian(fp: &FactorPair, truth: &FactorPair, fs: &FeatureSet, obs: &ObservationSet) -> Result<HessianMatrix> {
    assemble(fp, truth, fs, obs, true)
}

fn assemble(fp: &FactorPair, truth: &FactorPair, fs: &FeatureSet, obs: &ObservationSet, residual_terms: bool) -> Result<HessianMatrix> {
    let kind = fp.activation();
    if kind == ActivationKind::Linear {
        return Err(NimcError::Unsupported("Hessian assembly for the linear activation".into()));
    }
    fs.check_factors(fp)?;
    fs.check_factors(truth)?;
    if obs.is_empty() {
        return invalid("observation set is empty");
    }
    obs.validate_for(fs)?;
    let (d1, d2, k) = (fp.d1(), fp.d2(), fp.rank());
    let p = (d1 + d2) * k;
    let su = side_activations(kind, fs.x(), fp.u());
    let sv = side_activations(kind, fs.y(), fp.v());
    let tu = side_activations(kind, fs.x(), truth.u());
    let tv = side_activations(kind, fs.y(), truth.v());
    let zu = fs.x() * fp.u();
    let zv = fs.y() * fp.v();
    let triples = obs.triples();

    let partials: Vec<DMatrix<f64>> = triples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = DMatrix::<f64>::zeros(chunk.len(), p);
            let mut h = DMatrix::<f64>::zeros(p, p);
            for (r, o) in chunk.iter().enumerate() {
                let x = fs.x().row(o.i);
                let y = fs.y().row(o.j);
                for i in 0..k {
                    let (pu, du, pv, dv) = (su.phi[(o.i, i)], su.dphi[(o.i, i)], sv.phi[(o.j, i)], sv.dphi[(o.j, i)]);
                    for a in 0..d1 {
                        g[(r, i * d1 + a)] = du * pv * x[a];
                    }
                    for b in 0..d2 {
                        g[(r, k * d1 + i * d2 + b)] = pu * dv * y[b];
                    }
                }
                if !residual_terms {
                    continue;
                }
                let mut res = 0.0;
                for i in 0..k {
                    res += su.phi[(o.i, i)] * sv.phi[(o.j, i)] - tu.phi[(o.i, i)] * tv.phi[(o.j, i)];
                }
                if res == 0.0 {
                    continue;
                }
                for i in 0..k {
                    let (pu, du, pv, dv) = (su.phi[(o.i, i)], su.dphi[(o.i, i)], sv.phi[(o.j, i)], sv.dphi[(o.j, i)]);
                    let wuu = res * kind.phi_second(zu[(o.i, i)]) * pv;
                    let wvv = res * kind.phi_second(zv[(o.j, i)]) * pu;
                    let wuv = res * du * dv;
                    let (ou, ov) = (i * d1, k * d1 + i * d2);
                    for a in 0..d1 {
                        if wuu != 0.0 {
                            for b in 0..d1 {
                                h[(ou + a, ou + b)] += wuu * x[a] * x[b];
                            }
                        }
                        for b in 0..d2 {
                            h[(ou + a, ov + b)] += wuv * x[a] * y[b];
                            h[(ov + b, ou + a)] += wuv * x[a] * y[b];
                        }
                    }
                    if wvv != 0.0 {
                        for a in 0..d2 {
                            for b in 0..d2 {
                                h[(ov + a, ov + b)] += wvv * y[a] * y[b];
                            }
                        }
                    }
                }
            }
            h += g.tr_mul(&g);
            h
        })
        .collect();
    let mut total = DMatrix::<f64>::zeros(p, p);
    for part in partials {
        total += part;
    }
    total /= obs.len() as f64;
    let (h, asymmetry) = finish(total);
    Ok(HessianMatrix {
        h,
        activation: kind,
        layout: HessianLayout::Full,
        d1,
        d2,
        k,
        samples: obs.len(),
        at_ground_truth: fp == truth,
        asymmetry,
        entry_se: None,
    })
}

/// Hessian of the fixed-row ReLU objective over `(vec W, vec V)`.
pub fn assemble_relu_fixed_hessian(rf: &ReluFixedRow, truth: &FactorPair, fs: &FeatureSet, obs: &ObservationSet) -> Result<HessianMatrix> {
    if truth.activation() != ActivationKind::ReLU {
        return Err(NimcError::Unsupported("fixed-row Hessian is ReLU-only".into()));
    }
    let fp = rf.embed()?;
    let mut full = assemble_empirical_hessian(&fp, truth, fs, obs)?;
    full.at_ground_truth = fp == *truth;
    full.drop_first_u_row()
}

/// Monte-Carlo estimate of the population Hessian at the ground truth,
/// `E[g gᵀ]` over fresh standard Gaussian `(x, y)`, with per-entry standard
/// errors. Samples are drawn in fixed-size blocks with one RNG substream per
/// block, so the estimate does not depend on the thread count.
pub fn population_hessian_mc(truth: &FactorPair, n_mc: usize, seed: RngSeed) -> Result<HessianMatrix> {
    if n_mc == 0 {
        return invalid("n_mc must be at least 1");
    }
    let kind = truth.activation();
    let (d1, d2, k) = (truth.d1(), truth.d2(), truth.rank());
    let p = (d1 + d2) * k;
    let blocks = n_mc.div_ceil(CHUNK);
    let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = CHUNK.min(n_mc - b * CHUNK);
            let mut rng = seed.substream(b as u64).rng();
            let xs = gaussian_matrix(len, d1, &mut rng);
            let ys = gaussian_matrix(len, d2, &mut rng);
            let mut g = DMatrix::<f64>::zeros(len, p);
            let mut row = vec![0.0; p];
            for r in 0..len {
                let x: Vec<f64> = xs.row(r).iter().copied().collect();
                let y: Vec<f64> = ys.row(r).iter().copied().collect();
                jacobian_row(kind, truth.u(), truth.v(), &x, &y, &mut row);
                for (c, v) in row.iter().enumerate() {
                    g[(r, c)] = *v;
                }
            }
            let g2 = g.component_mul(&g);
            (g.tr_mul(&g), g2.tr_mul(&g2))
        })
        .collect();
    let mut sum = DMatrix::<f64>::zeros(p, p);
    let mut sum_sq = DMatrix::<f64>::zeros(p, p);
    for (s, q) in parts {
        sum += s;
        sum_sq += q;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let entry_se = if n_mc > 1 {
        DMatrix::from_fn(p, p, |a, b| ((sum_sq[(a, b)] / n - mean[(a, b)].powi(2)).max(0.0) / (n - 1.0)).sqrt())
    } else {
        DMatrix::from_element(p, p, f64::INFINITY)
    };
    let (h, asymmetry) = finish(mean);
    Ok(HessianMatrix {
        h,
        activation: kind,
        layout: HessianLayout::Full,
        d1,
        d2,
        k,
        samples: n_mc,
        at_ground_truth: true,
        asymmetry,
        entry_se: Some(entry_se),
    })
}

/// Extreme eigenvalues by a dense symmetric eigensolver.
pub fn spectrum(h: &HessianMatrix) -> Result<SpectrumProbe> {
    let (lambda_min, lambda_max) = extreme_eigenvalues(&h.h)?;
    Ok(SpectrumProbe { lambda_min, lambda_max, method: SpectrumMethod::DenseEig, theoretical_lower_bound: None })
}

pub fn extreme_eigenvalues(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return invalid("spectrum needs a non-empty square matrix");
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(NimcError::Numeric("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    Ok((eig.eigenvalues.min(), eig.eigenvalues.max()))
}

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn lambda_kappa(m: &DMatrix<f64>, name: &'static str) -> Result<(f64, f64)> {
    let s = singular_values(m);
    let (s1, sk) = (s[0], s[s.len() - 1]);
    if !(sk > 1e-12 * s1.max(f64::MIN_POSITIVE)) {
        return Err(NimcError::RankDeficient(name, sk));
    }
    // λ = σ₁^k / Πσᵢ, computed as Π(σ₁/σᵢ) to stay in range.
    let lambda: f64 = s.iter().map(|si| s1 / si).product();
    Ok((lambda, s1 / sk))
}

/// `λ(·) = σ₁ᵏ/Πσᵢ` and `κ(·) = σ₁/σ_k` for both factors.
pub fn condition_numbers(fp: &FactorPair) -> Result<ConditionReport> {
    let (lambda_u, kappa_u) = lambda_kappa(fp.u(), "U")?;
    let (lambda_v, kappa_v) = lambda_kappa(fp.v(), "V")?;
    Ok(ConditionReport {
        lambda_u,
        lambda_v,
        kappa_u,
        kappa_v,
        lambda_max_pair: lambda_u.max(lambda_v),
        kappa_max_pair: kappa_u.max(kappa_v),
    })
}

/// Closed-form lower bound on `λ_min` of the population Hessian at `truth`.
///
/// Sigmoid and tanh: `ρ/(λ(U*)λ(V*)·max(κ(U*), κ(V*)))`, which assumes the
/// factors are scaled so that `σ_k(U*) = σ_k(V*) = 1`. ReLU: the fixed-row
/// bound with [`RELU_BOUND_CONSTANT`].
pub fn theoretical_lambda_min_bound(truth: &FactorPair) -> Result<f64> {
    let kind = truth.activation();
    let c = condition_numbers(truth)?;
    match kind {
        ActivationKind::Sigmoid | ActivationKind::Tanh => {
            for (name, m) in [("U", truth.u()), ("V", truth.v())] {
                let sk = *singular_values(m).last().unwrap_or(&0.0);
                if (sk - 1.0).abs() > 1e-6 {
                    return invalid(format!("bound assumes sigma_k({name}) = 1, got {sk}"));
                }
            }
            Ok(moment_table(kind).rho / (c.lambda_u * c.lambda_v * c.kappa_max_pair))
        }
        ActivationKind::ReLU => {
            let first = truth.u().row(0);
            let u0 = first.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            if u0 == 0.0 {
                return invalid("ReLU bound needs every entry of the first row of U to be nonzero");
            }
            let norm_max = singular_values(truth.u())[0].max(singular_values(truth.v())[0]);
            let ratio = u0 / ((1.0 + first.norm()) * norm_max);
            Ok(RELU_BOUND_CONSTANT / (c.lambda_u * c.lambda_v) * ratio * ratio)
        }
        ActivationKind::Linear => Err(NimcError::Unsupported("no eigenvalue bound for the linear activation".into())),
    }
}

/// Direction `(a₁..a_k, b₁..b_k)` in the Hessian parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Direction {
    pub fn norm(&self) -> f64 {
        (self.a.norm_squared() + self.b.norm_squared()).sqrt()
    }

    pub fn normalized(&self) -> Direction {
        let n = self.norm();
        Direction { a: &self.a / n, b: &self.b / n }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.a.as_slice().to_vec();
        out.extend_from_slice(self.b.as_slice());
        out
    }
}

/// Unit tangent `(U*Λ, −V*Λ)` of the ReLU rescaling orbit
/// `(U*D, V*D⁻¹)` at `D = I`.
pub fn relu_scaling_direction(truth: &FactorPair, lambda: &[f64]) -> Result<Direction> {
    if lambda.len() != truth.rank() {
        return invalid("one scale per column required");
    }
    let mut a = truth.u().clone();
    let mut b = truth.v().clone();
    for (c, l) in lambda.iter().enumerate() {
        a.column_mut(c).scale_mut(*l);
        b.column_mut(c).scale_mut(-*l);
    }
    let d = Direction { a, b };
    if d.norm() == 0.0 {
        return invalid("scaling direction is zero");
    }
    Ok(d.normalized())
}

/// Monte-Carlo estimate of
/// `E[(Σᵢ φ′(uᵢ*ᵀx)φ(vᵢ*ᵀy)xᵀaᵢ + φ(uᵢ*ᵀx)φ′(vᵢ*ᵀy)yᵀbᵢ)²]`, the population
/// Hessian quadratic form at the truth along a unit direction.
pub fn min_eig_quadratic_form(truth: &FactorPair, direction: &Direction, n_mc: usize, seed: RngSeed) -> Result<McEstimate> {
    if direction.a.shape() != truth.u().shape() || direction.b.shape() != truth.v().shape() {
        return invalid("direction shape does not match the factors");
    }
    if ((direction.norm().powi(2)) - 1.0).abs() > 1e-12 {
        return invalid(format!("direction must have unit norm, got {}", direction.norm()));
    }
    if n_mc < 2 {
        return invalid("n_mc must be at least 2");
    }
    let kind = truth.activation();
    let (d1, d2) = (truth.d1(), truth.d2());
    let blocks = n_mc.div_ceil(CHUNK);
    let t = DVector::from_vec(direction.to_vec());
    let p = t.len();
    let parts: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = CHUNK.min(n_mc - b * CHUNK);
            let mut rng = seed.substream(b as u64).rng();
            let xs = gaussian_matrix(len, d1, &mut rng);
            let ys = gaussian_matrix(len, d2, &mut rng);
            let mut row = vec![0.0; p];
            let (mut s, mut s2) = (0.0, 0.0);
            for r in 0..len {
                let x: Vec<f64> = xs.row(r).iter().copied().collect();
                let y: Vec<f64> = ys.row(r).iter().copied().collect();
                jacobian_row(kind, truth.u(), truth.v(), &x, &y, &mut row);
                let z: f64 = row.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
                s += z * z;
                s2 += z.powi(4);
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = parts.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let n = n_mc as f64;
    let mean = s / n;
    Ok(McEstimate { value: mean, se: ((s2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_features, gen_truth, perturb_within, sample_observations, TruthSpec};
    use crate::model::loss;
    use rand::Rng;

    fn instance(kind: ActivationKind, d1: usize, d2: usize, k: usize, n: usize, m: usize, seed: u64) -> (FactorPair, FeatureSet, ObservationSet) {
        let s = RngSeed::new(seed);
        let truth = gen_truth(kind, d1, d2, k, TruthSpec::Gaussian, s.substream(0)).unwrap();
        let fs = gen_gaussian_features(n, n, d1, d2, s.substream(1)).unwrap();
        let obs = sample_observations(&fs, &truth, m, s.substream(2)).unwrap();
        (truth, fs, obs)
    }

    // Second-order central differences of the loss itself.
    fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
        let n = x.len();
        let eval = |a: usize, sa: f64, b: usize, sb: f64| {
            let mut y = x.to_vec();
            y[a] += sa;
            y[b] += sb;
            f(&y)
        };
        DMatrix::from_fn(n, n, |a, b| {
            (eval(a, h, b, h) - eval(a, h, b, -h) - eval(a, -h, b, h) + eval(a, -h, b, -h)) / (4.0 * h * h)
        })
    }

    #[test]
    fn single_observation_matches_fd() {
        let (truth, fs, obs) = instance(ActivationKind::Sigmoid, 2, 2, 1, 3, 1, 1);
        let fp = perturb_within(&truth, 0.8, RngSeed::new(2)).unwrap();
        let h = assemble_empirical_hessian(&fp, &truth, &fs, &obs).unwrap();
        let fd = fd_hessian(|p| loss(&fp.from_vec(p).unwrap(), &fs, &obs).unwrap().value, &fp.to_vec(), 1e-4);
        assert!((&h.h - fd).amax() <= 1e-5);
    }

    #[test]
    fn smooth_hessians_match_fd_away_from_truth() {
        for (seed, kind) in [(3, ActivationKind::Sigmoid), (4, ActivationKind::Tanh)] {
            let (truth, fs, obs) = instance(kind, 5, 4, 3, 8, 60, seed);
            let fp = perturb_within(&truth, 1.0, RngSeed::new(seed + 10)).unwrap();
            let h = assemble_empirical_hessian(&fp, &truth, &fs, &obs).unwrap();
            assert!(h.asymmetry <= 1e-10);
            assert_eq!(h.h, h.h.transpose());
            let fd = fd_hessian(|p| loss(&fp.from_vec(p).unwrap(), &fs, &obs).unwrap().value, &fp.to_vec(), 1e-4);
            assert!((&h.h - fd).amax() <= 1e-4, "{kind}");
        }
    }

    #[test]
    fn residual_terms_vanish_at_truth() {
        let (truth, fs, obs) = instance(ActivationKind::Tanh, 4, 3, 2, 6, 40, 5);
        let with = assemble(&truth, &truth, &fs, &obs, true).unwrap();
        let without = assemble(&truth, &truth, &fs, &obs, false).unwrap();
        assert_eq!(with.h, without.h);
        assert!(with.at_ground_truth);
        assert!(spectrum(&with).unwrap().lambda_min >= -1e-12);
    }

    #[test]
    fn linear_is_unsupported() {
        let (truth, fs, obs) = instance(ActivationKind::Linear, 3, 3, 1, 4, 5, 6);
        assert!(matches!(assemble_empirical_hessian(&truth, &truth, &fs, &obs), Err(NimcError::Unsupported(_))));
    }

    #[test]
    fn relu_scaling_tangent_is_flat_at_truth() {
        let (truth, fs, obs) = instance(ActivationKind::ReLU, 5, 4, 3, 20, 300, 7);
        let h = assemble_empirical_hessian(&truth, &truth, &fs, &obs).unwrap();
        let t = relu_scaling_direction(&truth, &[1.0, -0.5, 2.0]).unwrap();
        assert!(h.quadratic_form(&t.to_vec()).unwrap().abs() <= 1e-8);
    }

    #[test]
    fn relu_fixed_hessian_shape_and_fd() {
        let (truth, fs, obs) = instance(ActivationKind::ReLU, 4, 3, 2, 10, 80, 8);
        let near = perturb_within(&truth, 0.3, RngSeed::new(9)).unwrap();
        let pinned = FactorPair::new(
            DMatrix::from_fn(4, 2, |i, j| if i == 0 { truth.u()[(0, j)] } else { near.u()[(i, j)] }),
            near.v().clone(),
            ActivationKind::ReLU,
        )
        .unwrap();
        let rf = ReluFixedRow::from_factors(&pinned).unwrap();
        let h = assemble_relu_fixed_hessian(&rf, &truth, &fs, &obs).unwrap();
        assert_eq!(h.dim(), (3 + 3) * 2);
        assert_eq!(h.layout, HessianLayout::ReluFixedRow);
        let f = |p: &[f64]| crate::model::loss_relu_fixed(&rf.from_vec(p).unwrap(), &fs, &obs).unwrap().value;
        let fd = fd_hessian(f, &rf.to_vec(), 1e-5);
        assert!((&h.h - fd).amax() <= 1e-4);
    }

    #[test]
    fn population_mc_self_consistent() {
        let truth = FactorPair::new(DMatrix::identity(3, 2), DMatrix::identity(3, 2), ActivationKind::Sigmoid).unwrap();
        let a = population_hessian_mc(&truth, 50_000, RngSeed::new(1)).unwrap();
        let b = population_hessian_mc(&truth, 50_000, RngSeed::new(2)).unwrap();
        let diff = crate::data::spectral_norm(&(&a.h - &b.h));
        let combined = (a.spectral_se().powi(2) + b.spectral_se().powi(2)).sqrt();
        assert!(diff <= 3.0 * combined, "{diff} vs {combined}");
        let again = population_hessian_mc(&truth, 50_000, RngSeed::new(1)).unwrap();
        assert_eq!(a.h, again.h);
    }

    #[test]
    fn population_matches_empirical_at_truth() {
        let (truth, fs, obs) = instance(ActivationKind::Tanh, 3, 3, 2, 400, 60_000, 11);
        let emp = assemble_empirical_hessian(&truth, &truth, &fs, &obs).unwrap();
        let pop = population_hessian_mc(&truth, 100_000, RngSeed::new(12)).unwrap();
        // Finite user/item pools add their own sampling error on top of MC error.
        let diff = crate::data::spectral_norm(&(&emp.h - &pop.h));
        assert!(diff <= 0.1 * crate::data::spectral_norm(&pop.h), "{diff}");
    }

    #[test]
    fn orthogonal_sigmoid_population_above_rho() {
        let truth = FactorPair::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3), ActivationKind::Sigmoid).unwrap();
        let pop = population_hessian_mc(&truth, 40_000, RngSeed::new(13)).unwrap();
        let lmin = spectrum(&pop).unwrap().lambda_min;
        assert!(lmin >= moment_table(ActivationKind::Sigmoid).rho - 3.0 * pop.spectral_se());
    }

    #[test]
    fn spectrum_diag() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(extreme_eigenvalues(&h).unwrap(), (1.0, 3.0));
        let mut bad = h.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(extreme_eigenvalues(&bad).is_err());
    }

    fn power_iteration(m: &DMatrix<f64>, iters: usize) -> f64 {
        let mut v = DVector::from_fn(m.nrows(), |i, _| 1.0 + (i as f64 * 0.37).sin());
        let mut lambda = 0.0;
        for _ in 0..iters {
            let w = m * &v;
            lambda = v.dot(&w) / v.dot(&v);
            v = &w / w.norm();
        }
        lambda
    }

    #[test]
    fn spectrum_matches_power_iteration_oracle() {
        let mut rng = RngSeed::new(14).rng();
        // PSD with a known gap at both ends so power iteration converges.
        let q = gaussian_matrix(50, 50, &mut rng).qr().q();
        let mut evals: Vec<f64> = (0..50).map(|_| rng.gen_range(1.0..2.0)).collect();
        evals[0] = 4.0;
        evals[1] = 0.1;
        let m = &q * DMatrix::from_diagonal(&DVector::from_vec(evals)) * q.transpose();
        let m = (&m + m.transpose()) * 0.5;
        let (lo, hi) = extreme_eigenvalues(&m).unwrap();
        let top = power_iteration(&m, 400);
        let shifted = DMatrix::identity(50, 50) * top - &m;
        let bottom = top - power_iteration(&shifted, 2000);
        assert!((hi - top).abs() <= 1e-8 && (lo - bottom).abs() <= 1e-8, "{hi} {top} {lo} {bottom}");
    }

    #[test]
    fn condition_number_cases() {
        let id = FactorPair::new(DMatrix::identity(4, 3), DMatrix::identity(4, 3), ActivationKind::Sigmoid).unwrap();
        let c = condition_numbers(&id).unwrap();
        assert_eq!((c.lambda_u, c.kappa_u, c.lambda_v, c.kappa_v), (1.0, 1.0, 1.0, 1.0));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let fp = FactorPair::new(d.clone(), d, ActivationKind::Tanh).unwrap();
        let c = condition_numbers(&fp).unwrap();
        assert!((c.lambda_u - 2.0).abs() < 1e-14 && (c.kappa_u - 2.0).abs() < 1e-14);

        let mut rng = RngSeed::new(15).rng();
        let u = gaussian_matrix(10, 3, &mut rng);
        let fp = FactorPair::new(u.clone(), u.clone(), ActivationKind::Sigmoid).unwrap();
        let c = condition_numbers(&fp).unwrap();
        // Oracle: singular values from the eigenvalues of UᵀU.
        let ev = SymmetricEigen::new(u.tr_mul(&u)).eigenvalues;
        let (s1, s3) = (ev.max().sqrt(), ev.min().sqrt());
        let prod: f64 = ev.iter().map(|e| e.sqrt()).product();
        assert!((c.kappa_u - s1 / s3).abs() <= 1e-10 * c.kappa_u);
        assert!((c.lambda_u - s1.powi(3) / prod).abs() <= 1e-10 * c.lambda_u);
        assert!(c.lambda_u >= 1.0 && c.kappa_u >= 1.0);

        let mut rank1 = DMatrix::zeros(3, 2);
        rank1[(0, 0)] = 1.0;
        rank1[(0, 1)] = 1.0;
        let fp = FactorPair::new(DMatrix::identity(3, 2), rank1, ActivationKind::Sigmoid).unwrap();
        assert!(matches!(condition_numbers(&fp), Err(NimcError::RankDeficient("V", _))));
    }

    #[test]
    fn bound_plug_in_cases() {
        let id = FactorPair::new(DMatrix::identity(4, 4), DMatrix::identity(4, 4), ActivationKind::Sigmoid).unwrap();
        assert_eq!(theoretical_lambda_min_bound(&id).unwrap(), moment_table(ActivationKind::Sigmoid).rho);

        let q = gaussian_matrix(5, 2, &mut RngSeed::new(16).rng()).qr().q();
        let u = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let fp = FactorPair::new(u.clone(), u, ActivationKind::Tanh).unwrap();
        let b = theoretical_lambda_min_bound(&fp).unwrap();
        assert!((b - moment_table(ActivationKind::Tanh).rho / 8.0).abs() < 1e-12);

        let one = FactorPair::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), ActivationKind::ReLU).unwrap();
        assert!((theoretical_lambda_min_bound(&one).unwrap() - 1.0 / 800.0).abs() < 1e-15);

        let relu_id = FactorPair::new(DMatrix::identity(3, 3), DMatrix::identity(3, 3), ActivationKind::ReLU).unwrap();
        assert!(theoretical_lambda_min_bound(&relu_id).is_err());
    }

    #[test]
    fn quadratic_form_estimator_matches_population_hessian() {
        let truth = FactorPair::new(DMatrix::identity(3, 2), DMatrix::identity(3, 2), ActivationKind::Tanh).unwrap();
        let mut rng = RngSeed::new(17).rng();
        let dir = Direction { a: gaussian_matrix(3, 2, &mut rng), b: gaussian_matrix(3, 2, &mut rng) }.normalized();
        let q = min_eig_quadratic_form(&truth, &dir, 60_000, RngSeed::new(18)).unwrap();
        let pop = population_hessian_mc(&truth, 60_000, RngSeed::new(19)).unwrap();
        let qh = pop.quadratic_form(&dir.to_vec()).unwrap();
        let combined = (q.se.powi(2) + pop.spectral_se().powi(2)).sqrt();
        assert!((q.value - qh).abs() <= 3.0 * combined);
        assert!(q.value >= -3.0 * q.se);
        let unnormalized = Direction { a: dir.a.clone() * 2.0, b: dir.b.clone() };
        assert!(min_eig_quadratic_form(&truth, &unnormalized, 10, RngSeed::new(1)).is_err());
    }

    #[test]
    fn relu_tangent_quadratic_form_is_zero() {
        let mut rng = RngSeed::new(20).rng();
        let truth = FactorPair::new(gaussian_matrix(4, 2, &mut rng), gaussian_matrix(3, 2, &mut rng), ActivationKind::ReLU).unwrap();
        let t = relu_scaling_direction(&truth, &[1.0, 1.0]).unwrap();
        let q = min_eig_quadratic_form(&truth, &t, 5_000, RngSeed::new(21)).unwrap();
        assert!(q.value.abs() <= 3.0 * q.se + 1e-20);
    }

    #[test]
    fn fixed_row_population_is_positive_definite() {
        // Normalized 4×4 Hadamard: unitary with a nonzero first row.
        let h4 = DMatrix::from_row_slice(4, 4, &[1., 1., 1., 1., 1., -1., 1., -1., 1., 1., -1., -1., 1., -1., -1., 1.]) * 0.5;
        let truth = FactorPair::new(h4.clone(), h4, ActivationKind::ReLU).unwrap();
        let pop = population_hessian_mc(&truth, 20_000, RngSeed::new(22)).unwrap();
        let full = spectrum(&pop).unwrap();
        assert!(full.lambda_min <= 1e-6 * full.lambda_max);
        let fixed = spectrum(&pop.drop_first_u_row().unwrap()).unwrap();
        assert!(fixed.lambda_min > 0.0);
    }
}
