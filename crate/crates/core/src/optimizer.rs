//! Full-batch gradient descent with optional fresh resampling, traces and
//! convergence diagnostics.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{gen_gaussian_features, sample_observations};
use crate::error::{invalid, NimcError, Result};
use crate::model::{gradient, loss_and_gradient, predict_rows, sorted_sum};
use crate::rng::RngSeed;
use crate::types::{FactorPair, FeatureSet, ObservationSet};

/// Substream reserved for the step-size probe sample.
const PROBE_STREAM: u64 = 1 << 40;
/// Substream reserved for the held-out test features.
const TEST_STREAM: u64 = (1 << 40) + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resample {
    None,
    FreshPerIter { m: usize },
}

impl fmt::Display for Resample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resample::None => write!(f, "none"),
            Resample::FreshPerIter { m } => write!(f, "fresh:{m}"),
        }
    }
}

impl FromStr for Resample {
    type Err = NimcError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Resample::None);
        }
        match s.strip_prefix("fresh:").map(str::parse::<usize>) {
            Some(Ok(m)) if m > 0 => Ok(Resample::FreshPerIter { m }),
            _ => invalid(format!("resample mode must be 'none' or 'fresh:<m>' with m > 0, got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSize {
    Fixed(f64),
    /// `η = 1/(2·λ̂_max)` from power iteration on the initial Hessian.
    Probe,
}

/// Stop once the loss has improved by less than `rel_tol` (relative) over
/// the last `window` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub window: usize,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_size: StepSize,
    pub max_iters: usize,
    pub resample: Resample,
    /// Stop when the relative test error is at or below this value.
    pub tolerance: f64,
    pub seed: RngSeed,
    /// Users and items in the held-out test grid.
    pub n_test: usize,
    pub plateau: Option<Plateau>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: StepSize::Probe,
            max_iters: 1000,
            resample: Resample::None,
            tolerance: 1e-3,
            seed: RngSeed::default(),
            n_test: 100,
            plateau: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let StepSize::Fixed(eta) = self.step_size {
            if !(eta > 0.0) || !eta.is_finite() {
                return invalid(format!("step size must be positive, got {eta}"));
            }
        }
        if !(self.tolerance > 0.0) {
            return invalid(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.n_test == 0 {
            return invalid("n_test must be at least 1");
        }
        if let Some(p) = self.plateau {
            if p.window == 0 || !(p.rel_tol >= 0.0) {
                return invalid("plateau window must be positive and rel_tol non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss: f64,
    /// `‖U − U*‖_F² + ‖V − V*‖_F²`
    pub param_error: Option<f64>,
    pub test_error: Option<f64>,
    pub grad_norm: f64,
    /// Hash of the observation multiset used at this iteration.
    pub sample_hash: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Tolerance,
    MaxIters,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub step_size: f64,
    pub stop: StopReason,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn final_test_error(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.test_error)
    }

    pub const CSV_HEADER: &'static str = "iter,loss,param_error,test_error,grad_norm";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(crate::io::fmt_f64).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iter,
                crate::io::fmt_f64(r.loss),
                opt(r.param_error),
                opt(r.test_error),
                crate::io::fmt_f64(r.grad_norm)
            ));
        }
        out
    }
}

/// One full-batch step `θ ← θ − η∇f_Ω(θ)`.
pub fn gd_step(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet, eta: f64) -> Result<FactorPair> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return invalid(format!("step size must be non-negative and finite, got {eta}"));
    }
    let g = gradient(fp, fs, obs)?;
    apply_step(fp, &g.gu, &g.gv, eta)
}

fn apply_step(fp: &FactorPair, gu: &DMatrix<f64>, gv: &DMatrix<f64>, eta: f64) -> Result<FactorPair> {
    if gu.iter().chain(gv.iter()).any(|v| !v.is_finite()) {
        return Err(NimcError::Numeric(format!(
            "non-finite gradient (|U|max = {:.3e}, |V|max = {:.3e})",
            fp.u().amax(),
            fp.v().amax()
        )));
    }
    if eta == 0.0 {
        return Ok(fp.clone());
    }
    FactorPair::new(fp.u() - gu * eta, fp.v() - gv * eta, fp.activation())
}

/// Held-out features for the relative test error.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    features: FeatureSet,
}

impl TestSet {
    pub fn new(d1: usize, d2: usize, n_test: usize, seed: RngSeed) -> Result<Self> {
        if n_test == 0 {
            return invalid("n_test must be at least 1");
        }
        Ok(TestSet { features: gen_gaussian_features(n_test, n_test, d1, d2, seed)? })
    }

    pub fn features(&self) -> &FeatureSet {
        &self.features
    }

    /// `‖φ(X_tU)φ(Y_tV)ᵀ − φ(X_tU*)φ(Y_tV*)ᵀ‖_F / ‖φ(X_tU*)φ(Y_tV*)ᵀ‖_F`
    pub fn relative_error(&self, fp: &FactorPair, truth: &FactorPair) -> Result<f64> {
        self.features.check_factors(fp)?;
        self.features.check_factors(truth)?;
        let (pu, pv) = predict_rows(fp, &self.features);
        let (tu, tv) = predict_rows(truth, &self.features);
        let truth_grid = &tu * tv.transpose();
        let den = truth_grid.norm_squared();
        let num = (&pu * pv.transpose() - truth_grid).norm_squared();
        if den == 0.0 {
            return Err(NimcError::Numeric("ground-truth test predictions are all zero".into()));
        }
        Ok((num / den).sqrt())
    }

    /// The tied form `‖φ(X_tU)φ(X_tU)ᵀ − φ(X_tU*)φ(X_tU*)ᵀ‖_F / ‖φ(X_tU*)φ(X_tU*)ᵀ‖_F`
    /// on the user-side test features.
    pub fn relative_error_tied(&self, u: &DMatrix<f64>, u_star: &DMatrix<f64>, kind: crate::ActivationKind) -> Result<f64> {
        let tied = FeatureSet::new(self.features.x().clone(), self.features.x().clone())?;
        let fp = FactorPair::new(u.clone(), u.clone(), kind)?;
        let truth = FactorPair::new(u_star.clone(), u_star.clone(), kind)?;
        TestSet { features: tied }.relative_error(&fp, &truth)
    }
}

/// Relative test error on a fresh `n_test × n_test` Gaussian grid.
pub fn relative_test_error(fp: &FactorPair, truth: &FactorPair, n_test: usize, seed: RngSeed) -> Result<f64> {
    TestSet::new(truth.d1(), truth.d2(), n_test, seed)?.relative_error(fp, truth)
}

fn param_error(fp: &FactorPair, truth: &FactorPair) -> f64 {
    let mut sq: Vec<f64> = fp.u().iter().zip(truth.u().iter()).chain(fp.v().iter().zip(truth.v().iter())).map(|(a, b)| (a - b) * (a - b)).collect();
    sorted_sum(&mut sq)
}

fn obs_hash(obs: &ObservationSet) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for o in obs {
        (o.i, o.j, o.a.to_bits()).hash(&mut h);
    }
    h.finish()
}

fn invariant_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    sorted_sum(&mut p)
}

/// Power iteration for the top Hessian eigenvalue using central differences
/// of the analytic gradient as Hessian-vector products. The start vector is
/// all ones and every reduction is order-independent, so the estimate is
/// unchanged by column permutations of the factors.
pub fn estimate_lambda_max(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet, iters: usize) -> Result<f64> {
    power_lambda_max(&fp.to_vec(), |theta| Ok(gradient(&fp.from_vec(theta)?, fs, obs)?.to_vec()), iters)
}

/// Top Hessian eigenvalue of the objective whose gradient is `grad`, by
/// power iteration on central-difference Hessian-vector products. When the
/// dominant eigenvalue is negative the iteration is repeated on `H − λI`.
pub fn power_lambda_max(theta: &[f64], grad: impl Fn(&[f64]) -> Result<Vec<f64>>, iters: usize) -> Result<f64> {
    let dominant = shifted_power(theta, &grad, iters, 0.0)?;
    if dominant > 0.0 {
        return Ok(dominant);
    }
    Ok(dominant + shifted_power(theta, &grad, iters, dominant)?)
}

fn shifted_power(theta: &[f64], grad: &impl Fn(&[f64]) -> Result<Vec<f64>>, iters: usize, shift: f64) -> Result<f64> {
    let n = theta.len();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let scale = invariant_dot(theta, theta).sqrt().max(1.0);
    let eps = 1e-5 * scale;
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let plus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t + eps * d).collect();
        let minus: Vec<f64> = theta.iter().zip(&v).map(|(t, d)| t - eps * d).collect();
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        let hv: Vec<f64> = gp.iter().zip(&gm).zip(&v).map(|((a, b), x)| (a - b) / (2.0 * eps) - shift * x).collect();
        lambda = invariant_dot(&v, &hv);
        let norm = invariant_dot(&hv, &hv).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        v = hv.iter().map(|x| x / norm).collect();
    }
    if !lambda.is_finite() {
        return Err(NimcError::Numeric("step-size probe produced a non-finite eigenvalue".into()));
    }
    Ok(lambda)
}

pub(crate) const PROBE_ITERS: usize = 30;

fn draw_fresh(fs: &FeatureSet, truth: &FactorPair, m: usize, seed: RngSeed) -> Result<ObservationSet> {
    sample_observations(fs, truth, m, seed)
}

/// Gradient descent from `fp0`.
///
/// With [`Resample::FreshPerIter`] every iteration draws a new observation set
/// of size `m` from the full `n₁×n₂` grid, labeled by `truth`; otherwise `obs`
/// is used throughout. The trace holds the starting point (iteration 0) and
/// every iterate after it.
pub fn train(fp0: &FactorPair, truth: Option<&FactorPair>, fs: &FeatureSet, obs: &ObservationSet, cfg: &TrainConfig) -> Result<(FactorPair, TrainTrace)> {
    cfg.validate()?;
    fs.check_factors(fp0)?;
    if let Some(t) = truth {
        fs.check_factors(t)?;
        if t.activation() != fp0.activation() || t.rank() != fp0.rank() {
            return invalid("truth and initial point differ in activation or rank");
        }
    }
    let fresh_m = match cfg.resample {
        Resample::FreshPerIter { m } => {
            if truth.is_none() {
                return invalid("fresh resampling needs the ground truth to label samples");
            }
            Some(m)
        }
        Resample::None => {
            if obs.is_empty() {
                return invalid("observation set is empty");
            }
            obs.validate_for(fs)?;
            None
        }
    };
    let sample = |iter: u64| -> Result<ObservationSet> {
        match (fresh_m, truth) {
            (Some(m), Some(t)) => draw_fresh(fs, t, m, cfg.seed.substream(iter)),
            _ => Ok(obs.clone()),
        }
    };
    let eta = match cfg.step_size {
        StepSize::Fixed(eta) => eta,
        StepSize::Probe => {
            let probe_obs = sample(PROBE_STREAM)?;
            let lmax = estimate_lambda_max(fp0, fs, &probe_obs, PROBE_ITERS)?;
            if !(lmax > 0.0) {
                return Err(NimcError::Numeric(format!("step-size probe found no positive curvature ({lmax:e})")));
            }
            0.5 / lmax
        }
    };
    let test = match truth {
        Some(t) => Some(TestSet::new(t.d1(), t.d2(), cfg.n_test, cfg.seed.substream(TEST_STREAM))?),
        None => None,
    };

    let mut fp = fp0.clone();
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut current = sample(0)?;
    for iter in 0..=cfg.max_iters {
        let (l, g) = loss_and_gradient(&fp, fs, &current)?;
        let (param_error, test_error) = match (truth, &test) {
            (Some(t), Some(ts)) => (Some(param_error(&fp, t)), Some(ts.relative_error(&fp, t)?)),
            _ => (None, None),
        };
        if !l.value.is_finite() {
            return Err(NimcError::Numeric(format!("loss became non-finite at iteration {iter}")));
        }
        records.push(TraceRecord { iter, loss: l.value, param_error, test_error, grad_norm: g.norm(), sample_hash: obs_hash(&current) });
        losses.push(l.value);
        if test_error.is_some_and(|e| e <= cfg.tolerance) {
            stop = StopReason::Tolerance;
            break;
        }
        if let Some(p) = cfg.plateau {
            if losses.len() > p.window {
                let old = losses[losses.len() - 1 - p.window];
                if old - l.value <= p.rel_tol * old.abs() {
                    stop = StopReason::Plateau;
                    break;
                }
            }
        }
        if iter == cfg.max_iters {
            break;
        }
        fp = apply_step(&fp, &g.gu, &g.gv, eta)?;
        if fresh_m.is_some() {
            current = sample(iter as u64 + 1)?;
        }
    }
    Ok((fp, TrainTrace { records, step_size: eta, stop }))
}

/// Per-step contraction factor: `exp` of the least-squares slope of
/// `ln(param_error)` against the iteration index.
pub fn contraction_rate(trace: &TrainTrace) -> Result<f64> {
    let pts: Vec<(f64, f64)> = trace
        .records
        .iter()
        .filter_map(|r| r.param_error.filter(|e| *e > 0.0 && e.is_finite()).map(|e| (r.iter as f64, e.ln())))
        .collect();
    if pts.len() < 5 {
        return Err(NimcError::Insufficient(format!("{} records with positive parameter error, need 5", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok((sxy / sxx).exp())
}
