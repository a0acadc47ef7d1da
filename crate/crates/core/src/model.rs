//! Prediction, losses and analytic gradients.
//!
//! All losses over an observation multiset use the averaged normalization
//! `f(U,V) = 1/(2|Ω|) Σ (φ(Uᵀx)ᵀφ(Vᵀy) − a)²`, duplicates counted with
//! multiplicity. The PU objective keeps its unnormalized `½(…)` form.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{invalid, NimcError, Result};
use crate::types::{FactorPair, FeatureSet, ObservationSet};

/// Default cap on `n₁·n₂` for objectives that enumerate the full grid.
pub const DEFAULT_CELL_BUDGET: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// `1/(2|Ω|)·Σ residual²`
    MeanHalf,
    /// `½·Σ residual²` (PU objective)
    Half,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub gu: DMatrix<f64>,
    pub gv: DMatrix<f64>,
}

impl GradientPair {
    pub fn norm(&self) -> f64 {
        (self.gu.norm_squared() + self.gv.norm_squared()).sqrt()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.gu.as_slice().to_vec();
        out.extend_from_slice(self.gv.as_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.gu.iter().chain(self.gv.iter()).all(|v| v.is_finite())
    }
}

/// `Σᵢ φ(uᵢᵀx)·φ(vᵢᵀy)`.
pub fn predict(fp: &FactorPair, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != fp.d1() || y.len() != fp.d2() {
        return invalid(format!(
            "feature lengths ({}, {}) do not match factor dims ({}, {})",
            x.len(),
            y.len(),
            fp.d1(),
            fp.d2()
        ));
    }
    let kind = fp.activation();
    let (u, v) = (fp.u(), fp.v());
    let mut total = 0.0;
    for c in 0..fp.rank() {
        let zu: f64 = u.column(c).iter().zip(x).map(|(a, b)| a * b).sum();
        let zv: f64 = v.column(c).iter().zip(y).map(|(a, b)| a * b).sum();
        total += kind.phi(zu) * kind.phi(zv);
    }
    Ok(total)
}

/// `h_{x,y} = predict(fp) − predict(truth)`.
pub fn residual_h(fp: &FactorPair, truth: &FactorPair, x: &[f64], y: &[f64]) -> Result<f64> {
    if fp.d1() != truth.d1() || fp.d2() != truth.d2() {
        return invalid("factor pair and truth have different feature dimensions");
    }
    Ok(predict(fp, x, y)? - predict(truth, x, y)?)
}

/// Row activations `φ(XU)` (n₁×k) and `φ(YV)` (n₂×k).
pub fn predict_rows(fp: &FactorPair, fs: &FeatureSet) -> (DMatrix<f64>, DMatrix<f64>) {
    let kind = fp.activation();
    ((fs.x() * fp.u()).map(|z| kind.phi(z)), (fs.y() * fp.v()).map(|z| kind.phi(z)))
}

/// Pre-activations pushed through φ and φ′ for one side.
pub(crate) struct SideActivations {
    pub phi: DMatrix<f64>,
    pub dphi: DMatrix<f64>,
}

pub(crate) fn side_activations(kind: ActivationKind, feats: &DMatrix<f64>, w: &DMatrix<f64>) -> SideActivations {
    let z = feats * w;
    let mut phi = z.clone();
    let mut dphi = z;
    for (p, d) in phi.iter_mut().zip(dphi.iter_mut()) {
        let (a, b) = kind.phi_and_prime(*p);
        *p = a;
        *d = b;
    }
    SideActivations { phi, dphi }
}

fn check_inputs(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet) -> Result<()> {
    fs.check_factors(fp)?;
    if obs.is_empty() {
        return invalid("observation set is empty");
    }
    obs.validate_for(fs)
}

/// `Σ_c a[i,c]·b[j,c]`, adding the products in sorted order so the result is
/// bit-identical under any column permutation of both factors.
pub(crate) fn row_dot(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    let k = a.ncols();
    let mut buf = [0.0f64; 16];
    if k <= buf.len() {
        for c in 0..k {
            buf[c] = a[(i, c)] * b[(j, c)];
        }
        sorted_sum(&mut buf[..k])
    } else {
        let mut v: Vec<f64> = (0..k).map(|c| a[(i, c)] * b[(j, c)]).collect();
        sorted_sum(&mut v)
    }
}

/// Order-independent sum: sorts, then adds left to right.
pub fn sorted_sum(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

/// Loss and gradient in one pass. The gradient is accumulated per user/item
/// row first, then pushed through the features, so the cost is
/// `O(|Ω|·k + (n₁d₁ + n₂d₂)·k)`.
pub fn loss_and_gradient(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet) -> Result<(LossValue, GradientPair)> {
    check_inputs(fp, fs, obs)?;
    let kind = fp.activation();
    let su = side_activations(kind, fs.x(), fp.u());
    let sv = side_activations(kind, fs.y(), fp.v());
    let k = fp.rank();
    let mut gx = DMatrix::<f64>::zeros(fs.n1(), k);
    let mut gy = DMatrix::<f64>::zeros(fs.n2(), k);
    let mut sq = 0.0;
    for o in obs {
        let r = row_dot(&su.phi, o.i, &sv.phi, o.j) - o.a;
        sq += r * r;
        for c in 0..k {
            gx[(o.i, c)] += r * sv.phi[(o.j, c)];
            gy[(o.j, c)] += r * su.phi[(o.i, c)];
        }
    }
    let m = obs.len() as f64;
    gx.component_mul_assign(&su.dphi);
    gy.component_mul_assign(&sv.dphi);
    let gu = fs.x().tr_mul(&gx) / m;
    let gv = fs.y().tr_mul(&gy) / m;
    Ok((LossValue { value: sq / (2.0 * m), normalization: Normalization::MeanHalf }, GradientPair { gu, gv }))
}

pub fn loss(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet) -> Result<LossValue> {
    check_inputs(fp, fs, obs)?;
    let (pu, pv) = predict_rows(fp, fs);
    let sq: f64 = obs.iter().map(|o| (row_dot(&pu, o.i, &pv, o.j) - o.a).powi(2)).sum();
    Ok(LossValue { value: sq / (2.0 * obs.len() as f64), normalization: Normalization::MeanHalf })
}

pub fn gradient(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet) -> Result<GradientPair> {
    loss_and_gradient(fp, fs, obs).map(|(_, g)| g)
}

/// Tied-weight objective with `Y = X` and `V = U`: returns the loss and
/// `∂f/∂U + ∂f/∂V` evaluated at `(U, U)`.
pub fn loss_and_gradient_tied(
    u: &DMatrix<f64>,
    kind: ActivationKind,
    x: &DMatrix<f64>,
    obs: &ObservationSet,
) -> Result<(LossValue, DMatrix<f64>)> {
    if obs.is_empty() {
        return invalid("observation set is empty");
    }
    if u.nrows() != x.ncols() {
        return invalid(format!("U has {} rows but features have {} columns", u.nrows(), x.ncols()));
    }
    let n = x.nrows();
    if let Some(o) = obs.iter().find(|o| o.i >= n || o.j >= n) {
        return invalid(format!("observation ({}, {}) outside {n}x{n} grid", o.i, o.j));
    }
    let s = side_activations(kind, x, u);
    let k = u.ncols();
    let mut g = DMatrix::<f64>::zeros(n, k);
    let mut sq = 0.0;
    for o in obs {
        let r = row_dot(&s.phi, o.i, &s.phi, o.j) - o.a;
        sq += r * r;
        for c in 0..k {
            g[(o.i, c)] += r * s.phi[(o.j, c)];
            g[(o.j, c)] += r * s.phi[(o.i, c)];
        }
    }
    let m = obs.len() as f64;
    g.component_mul_assign(&s.dphi);
    Ok((LossValue { value: sq / (2.0 * m), normalization: Normalization::MeanHalf }, x.tr_mul(&g) / m))
}

fn distinct_cells(obs: &ObservationSet) -> Vec<(usize, usize)> {
    let mut seen = HashSet::with_capacity(obs.len());
    let mut out = Vec::new();
    for o in obs {
        if seen.insert((o.i, o.j)) {
            out.push((o.i, o.j));
        }
    }
    out
}

fn check_pu(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet, beta: f64, cell_budget: usize) -> Result<()> {
    fs.check_factors(fp)?;
    obs.validate_for(fs)?;
    if !(beta >= 0.0) || !beta.is_finite() {
        return invalid(format!("beta must be a finite non-negative number, got {beta}"));
    }
    let cells = fs.n1().saturating_mul(fs.n2());
    if cells > cell_budget {
        return Err(NimcError::ResourceLimit(format!("grid has {cells} cells, budget is {cell_budget}")));
    }
    Ok(())
}

/// PU objective `½(Σ_Ω (pred − a)² + β Σ_{Ωᶜ} pred²)` and its gradient, where
/// `Ωᶜ` is every grid cell not observed at least once.
///
/// The complement sum is `‖φ(XU)φ(YV)ᵀ‖_F² − Σ_{distinct Ω} pred²`, with the
/// first term computed through the k×k Gram matrices.
pub fn loss_and_gradient_pu(
    fp: &FactorPair,
    fs: &FeatureSet,
    obs: &ObservationSet,
    beta: f64,
    cell_budget: usize,
) -> Result<(LossValue, GradientPair)> {
    check_pu(fp, fs, obs, beta, cell_budget)?;
    let kind = fp.activation();
    let su = side_activations(kind, fs.x(), fp.u());
    let sv = side_activations(kind, fs.y(), fp.v());
    let k = fp.rank();
    let mut gx = DMatrix::<f64>::zeros(fs.n1(), k);
    let mut gy = DMatrix::<f64>::zeros(fs.n2(), k);
    let mut observed = 0.0;
    for o in obs {
        let r = row_dot(&su.phi, o.i, &sv.phi, o.j) - o.a;
        observed += r * r;
        for c in 0..k {
            gx[(o.i, c)] += r * sv.phi[(o.j, c)];
            gy[(o.j, c)] += r * su.phi[(o.i, c)];
        }
    }
    let mut unobserved = 0.0;
    if beta > 0.0 {
        let gram_u = su.phi.tr_mul(&su.phi);
        let gram_v = sv.phi.tr_mul(&sv.phi);
        unobserved = gram_u.component_mul(&gram_v).sum();
        gx += (&su.phi * &gram_v) * beta;
        gy += (&sv.phi * &gram_u) * beta;
        for (i, j) in distinct_cells(obs) {
            let p = row_dot(&su.phi, i, &sv.phi, j);
            unobserved -= p * p;
            for c in 0..k {
                gx[(i, c)] -= beta * p * sv.phi[(j, c)];
                gy[(j, c)] -= beta * p * su.phi[(i, c)];
            }
        }
        unobserved = unobserved.max(0.0);
    }
    gx.component_mul_assign(&su.dphi);
    gy.component_mul_assign(&sv.dphi);
    Ok((
        LossValue { value: 0.5 * (observed + beta * unobserved), normalization: Normalization::Half },
        GradientPair { gu: fs.x().tr_mul(&gx), gv: fs.y().tr_mul(&gy) },
    ))
}

pub fn loss_pu(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet, beta: f64) -> Result<LossValue> {
    loss_and_gradient_pu(fp, fs, obs, beta, DEFAULT_CELL_BUDGET).map(|(l, _)| l)
}

pub fn gradient_pu(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet, beta: f64) -> Result<GradientPair> {
    loss_and_gradient_pu(fp, fs, obs, beta, DEFAULT_CELL_BUDGET).map(|(_, g)| g)
}

/// ReLU parameterization with the first row of `U` pinned:
/// `U = [fixed_row; W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluFixedRow {
    w: DMatrix<f64>,
    fixed_row: DVector<f64>,
    v: DMatrix<f64>,
}

impl ReluFixedRow {
    pub fn new(w: DMatrix<f64>, fixed_row: DVector<f64>, v: DMatrix<f64>) -> Result<Self> {
        let k = fixed_row.len();
        if k == 0 || w.ncols() != k || v.ncols() != k {
            return invalid(format!(
                "column counts disagree: W has {}, fixed row has {k}, V has {}",
                w.ncols(),
                v.ncols()
            ));
        }
        if let Some(i) = fixed_row.iter().position(|&u| u == 0.0 || !u.is_finite()) {
            return invalid(format!("fixed row entry {i} must be finite and nonzero"));
        }
        Ok(ReluFixedRow { w, fixed_row, v })
    }

    /// Splits a ReLU factor pair, pinning the first row of `U`.
    pub fn from_factors(fp: &FactorPair) -> Result<Self> {
        if fp.activation() != ActivationKind::ReLU {
            return Err(NimcError::Unsupported("fixed-row parameterization is ReLU-only".into()));
        }
        let u = fp.u();
        let d1 = u.nrows();
        ReluFixedRow::new(u.rows(1, d1 - 1).into_owned(), u.row(0).transpose(), fp.v().clone())
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn fixed_row(&self) -> &DVector<f64> {
        &self.fixed_row
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// `u₀ = minᵢ |u*₁ᵢ|`.
    pub fn u0(&self) -> f64 {
        self.fixed_row.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// The equivalent unconstrained ReLU factor pair.
    pub fn embed(&self) -> Result<FactorPair> {
        let k = self.fixed_row.len();
        let d1 = self.w.nrows() + 1;
        let u = DMatrix::from_fn(d1, k, |i, j| if i == 0 { self.fixed_row[j] } else { self.w[(i - 1, j)] });
        FactorPair::new(u, self.v.clone(), ActivationKind::ReLU)
    }

    /// Free parameters `vec(W)` then `vec(V)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.w.as_slice().to_vec();
        out.extend_from_slice(self.v.as_slice());
        out
    }

    pub fn from_vec(&self, params: &[f64]) -> Result<Self> {
        let split = self.w.len();
        if params.len() != split + self.v.len() {
            return invalid("parameter vector has the wrong length");
        }
        ReluFixedRow::new(
            DMatrix::from_column_slice(self.w.nrows(), self.w.ncols(), &params[..split]),
            self.fixed_row.clone(),
            DMatrix::from_column_slice(self.v.nrows(), self.v.ncols(), &params[split..]),
        )
    }
}

pub fn loss_relu_fixed(rf: &ReluFixedRow, fs: &FeatureSet, obs: &ObservationSet) -> Result<LossValue> {
    loss(&rf.embed()?, fs, obs)
}

/// Gradient over `(W, V)`; `gu` holds `∂f/∂W` ((d₁−1)×k).
pub fn gradient_relu_fixed(rf: &ReluFixedRow, fs: &FeatureSet, obs: &ObservationSet) -> Result<GradientPair> {
    let g = gradient(&rf.embed()?, fs, obs)?;
    let rows = g.gu.nrows() - 1;
    Ok(GradientPair { gu: g.gu.rows(1, rows).into_owned(), gv: g.gv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_features, gen_truth, random_init, sample_observations, TruthSpec};
    use crate::rng::RngSeed;
    use crate::types::Observation;
    use proptest::prelude::*;

    fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
        m.row(i).iter().copied().collect()
    }

    // Scalar-loop oracle, independent of the matrix path.
    fn predict_oracle(kind: ActivationKind, u: &DMatrix<f64>, v: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
        let mut total = 0.0;
        for c in 0..u.ncols() {
            let mut zu = 0.0;
            for p in 0..u.nrows() {
                zu += u[(p, c)] * x[p];
            }
            let mut zv = 0.0;
            for q in 0..v.nrows() {
                zv += v[(q, c)] * y[q];
            }
            total += kind.phi(zu) * kind.phi(zv);
        }
        total
    }

    fn loss_oracle(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet) -> f64 {
        let mut s = 0.0;
        for o in obs {
            let p = predict_oracle(fp.activation(), fp.u(), fp.v(), &row(fs.x(), o.i), &row(fs.y(), o.j));
            s += (p - o.a).powi(2);
        }
        s / (2.0 * obs.len() as f64)
    }

    fn instance(kind: ActivationKind, d1: usize, d2: usize, k: usize, n: usize, m: usize, seed: u64) -> (FactorPair, FactorPair, FeatureSet, ObservationSet) {
        let s = RngSeed::new(seed);
        let truth = gen_truth(kind, d1, d2, k, TruthSpec::Gaussian, s.substream(0)).unwrap();
        let fs = gen_gaussian_features(n, n + 1, d1, d2, s.substream(1)).unwrap();
        let obs = sample_observations(&fs, &truth, m, s.substream(2)).unwrap();
        let fp = random_init(kind, d1, d2, k, s.substream(3)).unwrap();
        (fp, truth, fs, obs)
    }

    #[test]
    fn predict_hand_cases() {
        let u = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.7]);
        let fp = FactorPair::new(u.clone(), u, ActivationKind::Sigmoid).unwrap();
        assert!((predict(&fp, &[0.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        let eye = DMatrix::<f64>::identity(3, 3);
        let relu = FactorPair::new(eye.clone(), eye, ActivationKind::ReLU).unwrap();
        assert_eq!(predict(&relu, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(predict(&relu, &[1.0, 0.0], &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn predict_matches_scalar_oracle() {
        for kind in [ActivationKind::Sigmoid, ActivationKind::Tanh, ActivationKind::ReLU] {
            let (fp, _, fs, _) = instance(kind, 6, 4, 3, 5, 1, 3);
            for i in 0..fs.n1() {
                for j in 0..fs.n2() {
                    let (x, y) = (row(fs.x(), i), row(fs.y(), j));
                    let a = predict(&fp, &x, &y).unwrap();
                    let b = predict_oracle(kind, fp.u(), fp.v(), &x, &y);
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn residual_cases() {
        let (fp, truth, fs, _) = instance(ActivationKind::ReLU, 4, 4, 2, 3, 1, 5);
        let (x, y) = (row(fs.x(), 0), row(fs.y(), 1));
        assert_eq!(residual_h(&truth, &truth, &x, &y).unwrap(), 0.0);
        let zero_v = FactorPair::new(truth.u().clone(), DMatrix::zeros(4, 2), ActivationKind::ReLU).unwrap();
        assert_eq!(residual_h(&fp, &zero_v, &x, &y).unwrap(), predict(&fp, &x, &y).unwrap());
        let h = residual_h(&fp, &truth, &x, &y).unwrap();
        let oracle = predict_oracle(ActivationKind::ReLU, fp.u(), fp.v(), &x, &y)
            - predict_oracle(ActivationKind::ReLU, truth.u(), truth.v(), &x, &y);
        assert!((h - oracle).abs() < 1e-12);
    }

    #[test]
    fn loss_cases() {
        let (fp, truth, fs, obs) = instance(ActivationKind::Sigmoid, 5, 4, 2, 6, 40, 7);
        assert_eq!(loss(&truth, &fs, &obs).unwrap().value, 0.0);
        assert!((loss(&fp, &fs, &obs).unwrap().value - loss_oracle(&fp, &fs, &obs)).abs() <= 1e-12);
        // x = y = 0, k = 1, a = 0: ½·(0.25)²
        let zero = FeatureSet::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)).unwrap();
        let one = FactorPair::new(DMatrix::from_element(1, 1, 0.7), DMatrix::from_element(1, 1, -2.0), ActivationKind::Sigmoid).unwrap();
        let single = ObservationSet::new(vec![Observation { i: 0, j: 0, a: 0.0 }]);
        assert!((loss(&one, &zero, &single).unwrap().value - 0.03125).abs() < 1e-16);
        assert!(loss(&one, &zero, &ObservationSet::default()).is_err());
    }

    #[test]
    fn gradient_zero_at_truth() {
        let (_, truth, fs, obs) = instance(ActivationKind::Tanh, 5, 4, 2, 6, 40, 9);
        let g = gradient(&truth, &fs, &obs).unwrap();
        assert!(g.gu.amax() <= 1e-14 && g.gv.amax() <= 1e-14);
    }

    fn fd_gradient(fp: &FactorPair, f: impl Fn(&FactorPair) -> f64, h: f64) -> Vec<f64> {
        let base = fp.to_vec();
        (0..base.len())
            .map(|p| {
                let mut plus = base.clone();
                plus[p] += h;
                let mut minus = base.clone();
                minus[p] -= h;
                (f(&fp.from_vec(&plus).unwrap()) - f(&fp.from_vec(&minus).unwrap())) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, kind) in [(1, ActivationKind::Sigmoid), (2, ActivationKind::Tanh)] {
            let (fp, _, fs, obs) = instance(kind, 5, 4, 3, 6, 50, seed);
            let g = gradient(&fp, &fs, &obs).unwrap().to_vec();
            let fd = fd_gradient(&fp, |p| loss(p, &fs, &obs).unwrap().value, 1e-6);
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-5 * scale.max(1e-8), "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_gradient_hand_expansion() {
        // k = 1, two observations: ∂f/∂u = (1/|Ω|) Σ h·(vᵀy)·x
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let y = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 3.0, 1.0]);
        let fs = FeatureSet::new(x.clone(), y.clone()).unwrap();
        let u = DMatrix::from_column_slice(2, 1, &[0.2, -0.4]);
        let v = DMatrix::from_column_slice(2, 1, &[1.0, 0.3]);
        let fp = FactorPair::new(u.clone(), v.clone(), ActivationKind::Linear).unwrap();
        let obs = ObservationSet::new(vec![Observation { i: 0, j: 1, a: 1.5 }, Observation { i: 1, j: 0, a: -0.25 }]);
        let g = gradient(&fp, &fs, &obs).unwrap();
        let mut expect = [0.0; 2];
        for o in &obs {
            let ux = u[0] * x[(o.i, 0)] + u[1] * x[(o.i, 1)];
            let vy = v[0] * y[(o.j, 0)] + v[1] * y[(o.j, 1)];
            let h = ux * vy - o.a;
            for p in 0..2 {
                expect[p] += h * vy * x[(o.i, p)] / 2.0;
            }
        }
        assert!((g.gu[0] - expect[0]).abs() < 1e-15 && (g.gu[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn tied_gradient_is_sum_of_partials() {
        let s = RngSeed::new(4);
        let x = crate::data::gaussian_matrix(7, 4, &mut s.rng());
        let fs = FeatureSet::new(x.clone(), x.clone()).unwrap();
        let u = crate::data::gaussian_matrix(4, 2, &mut s.substream(1).rng()) * 0.5;
        let obs = ObservationSet::new((0..20).map(|t| Observation { i: t % 7, j: (3 * t) % 7, a: (t % 2) as f64 }).collect());
        let fp = FactorPair::new(u.clone(), u.clone(), ActivationKind::ReLU).unwrap();
        let (l, g) = loss_and_gradient(&fp, &fs, &obs).unwrap();
        let (lt, gt) = loss_and_gradient_tied(&u, ActivationKind::ReLU, &x, &obs).unwrap();
        assert!((l.value - lt.value).abs() < 1e-15);
        assert!((&g.gu + &g.gv - gt).amax() < 1e-14);
    }

    fn pu_oracle(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet, beta: f64) -> f64 {
        let mut observed = 0.0;
        for o in obs {
            let p = predict_oracle(fp.activation(), fp.u(), fp.v(), &row(fs.x(), o.i), &row(fs.y(), o.j));
            observed += (p - o.a).powi(2);
        }
        let mut unobserved = 0.0;
        for i in 0..fs.n1() {
            for j in 0..fs.n2() {
                if obs.iter().any(|o| o.i == i && o.j == j) {
                    continue;
                }
                let p = predict_oracle(fp.activation(), fp.u(), fp.v(), &row(fs.x(), i), &row(fs.y(), j));
                unobserved += p * p;
            }
        }
        0.5 * (observed + beta * unobserved)
    }

    #[test]
    fn pu_matches_double_loop_oracle() {
        let s = RngSeed::new(12);
        let fs = gen_gaussian_features(5, 4, 3, 3, s.substream(0)).unwrap();
        let fp = random_init(ActivationKind::Sigmoid, 3, 3, 2, s.substream(1)).unwrap();
        let obs = ObservationSet::new(vec![
            Observation { i: 0, j: 1, a: 1.0 },
            Observation { i: 0, j: 1, a: 1.0 },
            Observation { i: 3, j: 2, a: 1.0 },
            Observation { i: 4, j: 0, a: 1.0 },
        ]);
        for beta in [0.0, 0.01, 1.0] {
            let v = loss_pu(&fp, &fs, &obs, beta).unwrap().value;
            assert!((v - pu_oracle(&fp, &fs, &obs, beta)).abs() <= 1e-12);
            let g = gradient_pu(&fp, &fs, &obs, beta).unwrap().to_vec();
            let fd = fd_gradient(&fp, |p| loss_pu(p, &fs, &obs, beta).unwrap().value, 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-7, "beta {beta}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pu_special_cases() {
        let (fp, truth, fs, _) = instance(ActivationKind::Sigmoid, 3, 3, 2, 3, 1, 13);
        let full = crate::data::full_grid_observations(&fs, &truth).unwrap();
        // Full grid: complement empty, so β is irrelevant.
        let base = loss_pu(&fp, &fs, &full, 0.0).unwrap().value;
        for beta in [0.5, 3.0] {
            assert!((loss_pu(&fp, &fs, &full, beta).unwrap().value - base).abs() <= 1e-12);
        }
        // β = 0 is half the plain sum of squared residuals.
        let plain = loss(&fp, &fs, &full).unwrap().value * full.len() as f64;
        assert!((base - plain).abs() <= 1e-12);
        // β = 1 on the full grid: gradient equals |Ω| times the plain gradient.
        let gp = gradient_pu(&fp, &fs, &full, 1.0).unwrap();
        let g = gradient(&fp, &fs, &full).unwrap();
        let m = full.len() as f64;
        assert!((gp.gu - g.gu * m).amax() < 1e-12 && (gp.gv - g.gv * m).amax() < 1e-12);
    }

    #[test]
    fn pu_cell_budget() {
        let (fp, _, fs, obs) = instance(ActivationKind::Sigmoid, 3, 3, 2, 30, 5, 14);
        let err = loss_and_gradient_pu(&fp, &fs, &obs, 0.1, 100).unwrap_err();
        assert!(matches!(err, NimcError::ResourceLimit(_)));
        assert!(loss_pu(&fp, &fs, &obs, -1.0).is_err());
    }

    #[test]
    fn relu_fixed_row_embedding() {
        let (fp, truth, fs, obs) = instance(ActivationKind::ReLU, 5, 4, 3, 8, 60, 15);
        let rt = ReluFixedRow::from_factors(&truth).unwrap();
        assert_eq!(loss_relu_fixed(&rt, &fs, &obs).unwrap().value, 0.0);
        let pinned = FactorPair::new(
            DMatrix::from_fn(5, 3, |i, j| if i == 0 { truth.u()[(0, j)] } else { fp.u()[(i, j)] }),
            fp.v().clone(),
            ActivationKind::ReLU,
        )
        .unwrap();
        let rf = ReluFixedRow::from_factors(&pinned).unwrap();
        assert!((loss_relu_fixed(&rf, &fs, &obs).unwrap().value - loss(&pinned, &fs, &obs).unwrap().value).abs() <= 1e-14);
        let g = gradient_relu_fixed(&rf, &fs, &obs).unwrap();
        assert_eq!(g.gu.shape(), (4, 3));
        // FD over (W, V) at a kink-free point.
        let base = rf.to_vec();
        let emb = rf.embed().unwrap();
        let zu = fs.x() * emb.u();
        let zv = fs.y() * emb.v();
        let h = 1e-7;
        let margin = zu.iter().chain(zv.iter()).fold(f64::INFINITY, |m, z| m.min(z.abs()));
        assert!(margin > 1e-6 * 10.0, "instance too close to a kink: {margin}");
        let gv = {
            let mut v = g.gu.as_slice().to_vec();
            v.extend_from_slice(g.gv.as_slice());
            v
        };
        for p in 0..base.len() {
            let mut plus = base.clone();
            plus[p] += h;
            let mut minus = base.clone();
            minus[p] -= h;
            let fd = (loss_relu_fixed(&rf.from_vec(&plus).unwrap(), &fs, &obs).unwrap().value
                - loss_relu_fixed(&rf.from_vec(&minus).unwrap(), &fs, &obs).unwrap().value)
                / (2.0 * h);
            assert!((fd - gv[p]).abs() <= 1e-4 * gv[p].abs().max(1e-3), "param {p}: {fd} vs {}", gv[p]);
        }
    }

    #[test]
    fn relu_fixed_row_rejects_zero_entries() {
        let w = DMatrix::zeros(2, 2);
        assert!(ReluFixedRow::new(w.clone(), DVector::from_vec(vec![1.0, 0.0]), DMatrix::zeros(3, 2)).is_err());
        assert!(ReluFixedRow::new(w, DVector::from_vec(vec![1.0, -0.5]), DMatrix::zeros(3, 2)).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn loss_is_column_permutation_invariant(seed in 0u64..1000, shift in 1usize..3) {
            let (fp, _, fs, obs) = instance(ActivationKind::Tanh, 5, 4, 3, 5, 30, seed);
            let perm: Vec<usize> = (0..3).map(|c| (c + shift) % 3).collect();
            let pu = DMatrix::from_fn(5, 3, |i, j| fp.u()[(i, perm[j])]);
            let pv = DMatrix::from_fn(4, 3, |i, j| fp.v()[(i, perm[j])]);
            let q = FactorPair::new(pu, pv, ActivationKind::Tanh).unwrap();
            let a = loss(&fp, &fs, &obs).unwrap().value;
            let b = loss(&q, &fs, &obs).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-15 * a.max(1.0));
        }

        #[test]
        fn relu_loss_invariant_under_positive_rescaling(seed in 0u64..1000, d in proptest::collection::vec(0.2f64..5.0, 3)) {
            let (fp, _, fs, obs) = instance(ActivationKind::ReLU, 5, 4, 3, 5, 30, seed);
            let mut u = fp.u().clone();
            let mut v = fp.v().clone();
            for c in 0..3 {
                u.column_mut(c).scale_mut(d[c]);
                v.column_mut(c).scale_mut(1.0 / d[c]);
            }
            let q = FactorPair::new(u, v, ActivationKind::ReLU).unwrap();
            let a = loss(&fp, &fs, &obs).unwrap().value;
            prop_assert!((a - loss(&q, &fs, &obs).unwrap().value).abs() <= 1e-12);
        }

        #[test]
        fn linear_loss_invariant_under_inverse_transpose(seed in 0u64..1000) {
            let (fp, _, fs, obs) = instance(ActivationKind::Linear, 5, 4, 3, 5, 30, seed);
            let mut rng = RngSeed::with_stream(seed, 77).rng();
            let r = crate::data::gaussian_matrix(3, 3, &mut rng) + DMatrix::<f64>::identity(3, 3) * 2.0;
            let rinv_t = r.clone().try_inverse().unwrap().transpose();
            let q = FactorPair::new(fp.u() * &r, fp.v() * rinv_t, ActivationKind::Linear).unwrap();
            let a = loss(&fp, &fs, &obs).unwrap().value;
            prop_assert!((a - loss(&q, &fs, &obs).unwrap().value).abs() <= 1e-10 * a.max(1.0));
        }
    }
}
