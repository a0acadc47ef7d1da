//! Third-moment tensor initialization for sigmoid models.
//!
//! For Gaussian features, `M₃ = E[A(x,y)·(x^{⊗3} − x⊗̃I)] = Σᵢ αᵢ ūᵢ^{⊗3}` with
//! `αᵢ = γ₀(‖vᵢ‖)·(γ₃(‖uᵢ‖) − 3γ₁(‖uᵢ‖))`. Decomposing `M₃` yields the
//! directions `ūᵢ`; inverting the monotone map `‖uᵢ‖ ↦ αᵢ` yields the norms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{gamma_sigma, ActivationKind};
use crate::error::{invalid, NimcError, Result};
use crate::model::side_activations;
use crate::rng::RngSeed;
use crate::types::{FactorPair, FeatureSet, ObservationSet};

/// Dense symmetric `d×d×d` tensor, stored with index `(a·d + b)·d + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensor3 {
    d: usize,
    data: Vec<f64>,
    pub n_used: usize,
}

impl MomentTensor3 {
    pub fn zeros(d: usize) -> Self {
        MomentTensor3 { d, data: vec![0.0; d * d * d], n_used: 0 }
    }

    /// `Σᵢ wᵢ·vᵢ^{⊗3}`.
    pub fn from_components(weights: &[f64], dirs: &[DVector<f64>]) -> Result<Self> {
        let d = dirs.first().map_or(0, |v| v.len());
        if d == 0 || weights.len() != dirs.len() || dirs.iter().any(|v| v.len() != d) {
            return invalid("components must be non-empty with matching lengths");
        }
        let mut t = MomentTensor3::zeros(d);
        for (w, v) in weights.iter().zip(dirs) {
            t.add_rank_one(*w, v.as_slice());
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.d + b) * self.d + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &MomentTensor3) -> Result<MomentTensor3> {
        if self.d != other.d {
            return invalid("tensor dimensions differ");
        }
        Ok(MomentTensor3 { d: self.d, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(), n_used: self.n_used })
    }

    pub fn add_scaled(&mut self, other: &MomentTensor3, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    fn add_rank_one(&mut self, w: f64, v: &[f64]) {
        let d = self.d;
        for a in 0..d {
            for b in 0..d {
                let wab = w * v[a] * v[b];
                let base = (a * d + b) * d;
                for c in 0..d {
                    self.data[base + c] += wab * v[c];
                }
            }
        }
    }

    /// Adds `s·(x^{⊗3} − x⊗̃I)`, where `(x⊗̃I)_{abc} = x_a δ_bc + x_b δ_ac + x_c δ_ab`.
    fn add_hermite_cubic(&mut self, s: f64, x: &[f64]) {
        self.add_rank_one(s, x);
        let d = self.d;
        for a in 0..d {
            for j in 0..d {
                self.data[(a * d + j) * d + j] -= s * x[a];
                self.data[(j * d + a) * d + j] -= s * x[a];
                self.data[(j * d + j) * d + a] -= s * x[a];
            }
        }
    }

    /// Averages over the six index permutations.
    pub fn symmetrize(&mut self) {
        let d = self.d;
        let old = self.data.clone();
        let at = |a: usize, b: usize, c: usize| old[(a * d + b) * d + c];
        for a in 0..d {
            for b in 0..d {
                for c in 0..d {
                    self.data[(a * d + b) * d + c] =
                        (at(a, b, c) + at(a, c, b) + at(b, a, c) + at(b, c, a) + at(c, a, b) + at(c, b, a)) / 6.0;
                }
            }
        }
    }

    /// Mode-1 unfolding, `d × d²`.
    pub fn unfolding(&self) -> DMatrix<f64> {
        let d = self.d;
        DMatrix::from_fn(d, d * d, |a, bc| self.data[a * d * d + bc])
    }

    /// `T(v, v, v)`.
    pub fn cubic_form(&self, v: &[f64]) -> f64 {
        let d = self.d;
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                let base = (a * d + b) * d;
                let inner: f64 = (0..d).map(|c| self.data[base + c] * v[c]).sum();
                s += v[a] * v[b] * inner;
            }
        }
        s
    }

    /// `T(I, v, v)`.
    pub fn contract_two(&self, v: &[f64]) -> Vec<f64> {
        let d = self.d;
        (0..d)
            .map(|a| {
                let mut s = 0.0;
                for b in 0..d {
                    let base = (a * d + b) * d;
                    let inner: f64 = (0..d).map(|c| self.data[base + c] * v[c]).sum();
                    s += v[b] * inner;
                }
                s
            })
            .collect()
    }

    /// `T(P, P, P)` for `P` with `d` rows.
    pub fn multilinear(&self, p: &DMatrix<f64>) -> MomentTensor3 {
        let (d, k) = (self.d, p.ncols());
        // Contract one mode at a time: d³ → k·d² → k²·d → k³.
        let mut t1 = vec![0.0; k * d * d];
        for i in 0..k {
            for a in 0..d {
                let pa = p[(a, i)];
                if pa == 0.0 {
                    continue;
                }
                for bc in 0..d * d {
                    t1[i * d * d + bc] += pa * self.data[a * d * d + bc];
                }
            }
        }
        let mut t2 = vec![0.0; k * k * d];
        for i in 0..k {
            for j in 0..k {
                for b in 0..d {
                    let pb = p[(b, j)];
                    for c in 0..d {
                        t2[(i * k + j) * d + c] += pb * t1[(i * d + b) * d + c];
                    }
                }
            }
        }
        let mut out = MomentTensor3::zeros(k);
        for ij in 0..k * k {
            for l in 0..k {
                out.data[ij * k + l] = (0..d).map(|c| p[(c, l)] * t2[ij * d + c]).sum();
            }
        }
        out.n_used = self.n_used;
        out
    }
}

fn check_obs(fs: &FeatureSet, obs: &ObservationSet) -> Result<()> {
    if obs.is_empty() {
        return invalid("observation set is empty");
    }
    obs.validate_for(fs)
}

/// Per-user rating sums and counts.
fn user_totals(n1: usize, obs: &ObservationSet) -> (Vec<f64>, Vec<usize>) {
    let mut sum = vec![0.0; n1];
    let mut count = vec![0usize; n1];
    for o in obs {
        sum[o.i] += o.a;
        count[o.i] += 1;
    }
    (sum, count)
}

/// `(1/|Ω|)·Σ a·(x^{⊗3} − x⊗̃I)` over the observations, using user features.
pub fn empirical_m3(fs: &FeatureSet, obs: &ObservationSet) -> Result<MomentTensor3> {
    check_obs(fs, obs)?;
    let (sum, _) = user_totals(fs.n1(), obs);
    let mut t = MomentTensor3::zeros(fs.d1());
    let m = obs.len() as f64;
    for (i, s) in sum.iter().enumerate() {
        if *s != 0.0 {
            let x: Vec<f64> = fs.x().row(i).iter().copied().collect();
            t.add_hermite_cubic(s / m, &x);
        }
    }
    t.symmetrize();
    t.n_used = obs.len();
    Ok(t)
}

fn hermite_1d(order: usize, z: f64) -> f64 {
    match order {
        0 => 1.0,
        1 => z,
        2 => z * z - 1.0,
        _ => z * z * z - 3.0 * z,
    }
}

/// Multi-indices of total degree ≤ 3 in `d` variables, as variable lists.
fn cubic_basis(d: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for a in 0..d {
        out.push(vec![a]);
    }
    for a in 0..d {
        for b in a..d {
            out.push(vec![a, b]);
        }
    }
    for a in 0..d {
        for b in a..d {
            for c in b..d {
                out.push(vec![a, b, c]);
            }
        }
    }
    out
}

/// Number of basis functions used by [`hermite_projected_m3`].
pub fn cubic_basis_size(d: usize) -> usize {
    (d + 1) * (d + 2) * (d + 3) / 6
}

fn eval_basis(term: &[usize], x: &[f64]) -> f64 {
    let mut v = 1.0;
    let mut p = 0;
    while p < term.len() {
        let var = term[p];
        let mut order = 0;
        while p < term.len() && term[p] == var {
            order += 1;
            p += 1;
        }
        v *= hermite_1d(order, x[var]);
    }
    v
}

fn multiplicity_factorial(term: &[usize]) -> f64 {
    let mut f = 1.0;
    let mut p = 0;
    while p < term.len() {
        let mut run = 0;
        let var = term[p];
        while p < term.len() && term[p] == var {
            run += 1;
            p += 1;
        }
        f *= (1..=run).product::<usize>() as f64;
    }
    f
}

/// Estimates of `E_y[A(x_i, y)]` per user. Users with enough ratings get the
/// intercept of a least-squares fit of their ratings on the item features,
/// which removes the item-side variation linear in `y` (`y` has mean zero);
/// the rest fall back to their plain mean.
fn user_conditional_means(fs: &FeatureSet, obs: &ObservationSet, sum: &[f64], count: &[usize]) -> Vec<f64> {
    let d2 = fs.d2();
    let min_count = 2 * (d2 + 1);
    let mut out: Vec<f64> = sum.iter().zip(count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let mut grams: Vec<Option<(DMatrix<f64>, DVector<f64>)>> =
        count.iter().map(|&c| (c >= min_count).then(|| (DMatrix::zeros(d2 + 1, d2 + 1), DVector::zeros(d2 + 1)))).collect();
    let mut z = DVector::zeros(d2 + 1);
    for o in obs {
        if let Some((g, r)) = grams[o.i].as_mut() {
            z[0] = 1.0;
            for q in 0..d2 {
                z[q + 1] = fs.y()[(o.j, q)];
            }
            g.ger(1.0, &z, &z, 1.0);
            r.axpy(o.a, &z, 1.0);
        }
    }
    for (i, entry) in grams.into_iter().enumerate() {
        if let Some((g, r)) = entry {
            if let Some(ch) = g.cholesky() {
                out[i] = ch.solve(&r)[0];
            }
        }
    }
    out
}

/// Lower-variance estimate of the same population tensor.
///
/// Ratings are regressed by least squares on every multivariate Hermite
/// polynomial `He_β(x)` of degree ≤ 3. Because `(x^{⊗3} − x⊗̃I)_{abc}` is
/// `He_β(x)` for the multiplicity pattern `β` of `(a,b,c)` and
/// `E[He_β²] = β!`, the tensor entry is `c_β·β!`. Fitting the low-degree
/// terms jointly removes their contribution from the cubic coefficients,
/// which dominates the error of the plain average.
pub fn hermite_projected_m3(fs: &FeatureSet, obs: &ObservationSet) -> Result<MomentTensor3> {
    check_obs(fs, obs)?;
    let d = fs.d1();
    let basis = cubic_basis(d);
    let nb = basis.len();
    let (sum, count) = user_totals(fs.n1(), obs);
    let users: Vec<usize> = (0..fs.n1()).filter(|&i| count[i] > 0).collect();
    if users.len() <= nb {
        return Err(NimcError::Insufficient(format!("{} distinct users for {nb} basis functions", users.len())));
    }
    let target = user_conditional_means(fs, obs, &sum, &count);
    // Weighted least squares with per-user counts as weights.
    let design = DMatrix::from_fn(users.len(), nb, |r, b| {
        let x: Vec<f64> = fs.x().row(users[r]).iter().copied().collect();
        eval_basis(&basis[b], &x)
    });
    let mut weighted = design.clone();
    for (r, &i) in users.iter().enumerate() {
        weighted.row_mut(r).scale_mut(count[i] as f64);
    }
    let gram = design.tr_mul(&weighted);
    let rhs = weighted.tr_mul(&DVector::from_iterator(users.len(), users.iter().map(|&i| target[i])));
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| NimcError::Numeric(format!("Hermite regression failed: {e}")))?,
    };
    let mut t = MomentTensor3::zeros(d);
    for (b, term) in basis.iter().enumerate() {
        if term.len() != 3 {
            continue;
        }
        let value = coef[b] * multiplicity_factorial(term);
        let (a, bb, c) = (term[0], term[1], term[2]);
        for (p, q, r) in [(a, bb, c), (a, c, bb), (bb, a, c), (bb, c, a), (c, a, bb), (c, bb, a)] {
            t.data[(p * d + q) * d + r] = value;
        }
    }
    t.n_used = obs.len();
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum M3Estimator {
    /// Plain average of `a·(x^{⊗3} − x⊗̃I)`.
    Empirical,
    /// Hermite regression; see [`hermite_projected_m3`].
    HermiteProjection,
    /// Hermite regression when there are at least twice as many distinct
    /// users as basis functions, otherwise the plain average.
    Auto,
}

pub fn estimate_m3(fs: &FeatureSet, obs: &ObservationSet, estimator: M3Estimator) -> Result<MomentTensor3> {
    match estimator {
        M3Estimator::Empirical => empirical_m3(fs, obs),
        M3Estimator::HermiteProjection => hermite_projected_m3(fs, obs),
        M3Estimator::Auto => {
            check_obs(fs, obs)?;
            let (_, count) = user_totals(fs.n1(), obs);
            let users = count.iter().filter(|&&c| c > 0).count();
            if users > cubic_basis_size(fs.d1()) {
                hermite_projected_m3(fs, obs)
            } else {
                empirical_m3(fs, obs)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub restarts: usize,
    pub iters: usize,
    pub tol: f64,
    pub als_iters: usize,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig { restarts: 50, iters: 100, tol: 1e-10, als_iters: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Unit vectors, signed so that every weight is non-negative.
    pub directions: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    /// `‖T − Σ wᵢ vᵢ^{⊗3}‖_F / ‖T‖_F`.
    pub relative_residual: f64,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn power_iterate(t: &MomentTensor3, mut v: Vec<f64>, iters: usize, tol: f64) -> Vec<f64> {
    normalize(&mut v);
    for _ in 0..iters {
        let mut next = t.contract_two(&v);
        if normalize(&mut next) == 0.0 {
            break;
        }
        // Sign is irrelevant for convergence; compare up to sign.
        let dot: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
        v = next;
        if 1.0 - dot.abs() <= tol {
            break;
        }
    }
    v
}

fn khatri_rao(c: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (k, r) = (b.nrows(), b.ncols());
    DMatrix::from_fn(k * c.nrows(), r, |row, col| b[(row % k, col)] * c[(row / k, col)])
}

fn als_update(unfold: &DMatrix<f64>, c: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = c.tr_mul(c).component_mul(&b.tr_mul(b));
    let rhs = unfold * khatri_rao(c, b);
    match gram.clone().pseudo_inverse(1e-14) {
        Ok(inv) => rhs * inv,
        Err(_) => rhs,
    }
}

/// Rank-`k` symmetric CP decomposition.
///
/// The tensor is first compressed onto the top-`k` left singular subspace `P`
/// of its unfolding. On the `k×k×k` core, tensor power iteration with `L`
/// random restarts and deflation gives starting components, which are then
/// refined by alternating least squares. Weights are re-fit by least squares
/// against the symmetrized components and signs are moved into the
/// directions so every weight is non-negative.
pub fn decompose_rank_k(t: &MomentTensor3, k: usize, cfg: &DecompositionConfig, seed: RngSeed) -> Result<Decomposition> {
    let d = t.dim();
    if k == 0 || k > d {
        return invalid(format!("need 1 <= k <= d, got k={k}, d={d}"));
    }
    if cfg.restarts == 0 || cfg.iters == 0 {
        return invalid("restarts and iterations must be positive");
    }
    let tn = t.norm();
    if !(tn > 0.0) || !tn.is_finite() {
        return Err(NimcError::DegenerateSpectrum("tensor is zero or non-finite".into()));
    }
    let unfold = t.unfolding();
    let eig = SymmetricEigen::new(&unfold * unfold.transpose());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let kth = eig.eigenvalues[order[k - 1]];
    if !(kth > 1e-12 * top) {
        return Err(NimcError::DegenerateSpectrum(format!(
            "whitening subspace has rank < {k}: eigenvalue {kth:e} vs top {top:e}"
        )));
    }
    let p = DMatrix::from_fn(d, k, |r, c| eig.eigenvectors[(r, order[c])]);
    let core = t.multilinear(&p);

    let mut residual = core.clone();
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    for comp in 0..k {
        let starts: Vec<(f64, Vec<f64>)> = (0..cfg.restarts)
            .into_par_iter()
            .map(|r| {
                let mut rng = seed.substream((comp * cfg.restarts + r) as u64).rng();
                let v0: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                let v = power_iterate(&residual, v0, cfg.iters, cfg.tol);
                (residual.cubic_form(&v).abs(), v)
            })
            .collect();
        let mut best = 0;
        for (i, s) in starts.iter().enumerate() {
            if s.0 > starts[best].0 {
                best = i;
            }
        }
        let v = power_iterate(&residual, starts[best].1.clone(), cfg.iters, cfg.tol);
        let w = residual.cubic_form(&v);
        residual.add_rank_one(-w, &v);
        comps.push(v);
    }

    // ALS refinement; all three factors start from the deflation result.
    let core_unfold = core.unfolding();
    let init = DMatrix::from_fn(k, k, |r, c| comps[c][r]);
    let (mut a, mut b, mut c) = (init.clone(), init.clone(), init);
    for _ in 0..cfg.als_iters {
        a = als_update(&core_unfold, &c, &b);
        b = als_update(&core_unfold, &c, &a);
        c = als_update(&core_unfold, &b, &a);
    }
    let mut thetas: Vec<Vec<f64>> = Vec::with_capacity(k);
    for r in 0..k {
        let mut av: Vec<f64> = a.column(r).iter().copied().collect();
        let mut bv: Vec<f64> = b.column(r).iter().copied().collect();
        let mut cv: Vec<f64> = c.column(r).iter().copied().collect();
        let ok = normalize(&mut av) > 0.0 && normalize(&mut bv) > 0.0 && normalize(&mut cv) > 0.0;
        if !ok || av.iter().chain(&bv).chain(&cv).any(|x| !x.is_finite()) {
            thetas.push(comps[r].clone());
            continue;
        }
        let sb = av.iter().zip(&bv).map(|(x, y)| x * y).sum::<f64>().signum();
        let sc = av.iter().zip(&cv).map(|(x, y)| x * y).sum::<f64>().signum();
        let mut th: Vec<f64> = (0..k).map(|i| av[i] + sb * bv[i] + sc * cv[i]).collect();
        normalize(&mut th);
        thetas.push(th);
    }
    // Keep the ALS result only if it fits the core better than deflation.
    let fit = |dirs: &[Vec<f64>]| -> Option<(Vec<f64>, f64)> {
        let gram = DMatrix::from_fn(k, k, |i, j| dirs[i].iter().zip(&dirs[j]).map(|(x, y)| x * y).sum::<f64>().powi(3));
        let rhs = DVector::from_iterator(k, dirs.iter().map(|v| core.cubic_form(v)));
        let w = gram.pseudo_inverse(1e-12).ok()? * rhs;
        let mut approx = MomentTensor3::zeros(k);
        for (wi, v) in w.iter().zip(dirs) {
            approx.add_rank_one(*wi, v);
        }
        let res = core.sub(&approx).ok()?.norm();
        Some((w.iter().copied().collect(), res))
    };
    let (mut dirs, (mut weights, _)) = match (fit(&thetas), fit(&comps)) {
        (Some(a), Some(b)) if a.1 <= b.1 => (thetas, a),
        (_, Some(b)) => (comps, b),
        (Some(a), None) => (thetas, a),
        (None, None) => return Err(NimcError::Numeric("weight least squares failed".into())),
    };
    for (w, v) in weights.iter_mut().zip(dirs.iter_mut()) {
        if *w < 0.0 {
            *w = -*w;
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let directions: Vec<DVector<f64>> = dirs
        .iter()
        .map(|th| {
            let mut v = &p * DVector::from_column_slice(th);
            v /= v.norm();
            v
        })
        .collect();
    let approx = MomentTensor3::from_components(&weights, &directions)?;
    let relative_residual = t.sub(&approx)?.norm() / tn;
    Ok(Decomposition { directions, weights, relative_residual })
}

/// `γ₀·(γ₃(σ) − 3γ₁(σ))`, the tensor weight of a component with norm `σ`.
pub fn alpha_of_norm(kind: ActivationKind, sigma: f64, gamma0_v: f64) -> Result<f64> {
    Ok(gamma0_v * (gamma_sigma(kind, 3, sigma)? - 3.0 * gamma_sigma(kind, 1, sigma)?))
}

/// Default upper end of the bisection bracket for [`invert_alpha_to_norm`].
pub const DEFAULT_SIGMA_MAX: f64 = 10.0;

/// Solves `γ₀·(γ₃(σ) − 3γ₁(σ)) = alpha` for `σ ∈ (0, σ_max]` by bisection.
/// For the sigmoid the map is strictly decreasing from 0, so the attainable
/// range is `[α(σ_max), 0)`.
pub fn invert_alpha_to_norm(kind: ActivationKind, alpha: f64, gamma0_v: f64, sigma_max: f64) -> Result<f64> {
    if kind != ActivationKind::Sigmoid {
        return Err(NimcError::Unsupported(format!(
            "norm inversion needs a sigmoid activation (the {kind} weight map is not invertible)"
        )));
    }
    if !(gamma0_v > 0.0) || !(sigma_max > 0.0) {
        return invalid("gamma0 and sigma_max must be positive");
    }
    let lo = alpha_of_norm(kind, sigma_max, gamma0_v)?;
    if !(alpha < 0.0 && alpha >= lo) {
        return Err(NimcError::OutOfRange { value: alpha, lo, hi: 0.0 });
    }
    let (mut a, mut b) = (0.0, sigma_max);
    while b - a > 1e-8 {
        let mid = 0.5 * (a + b);
        if mid <= 0.0 || mid == a || mid == b {
            break;
        }
        if alpha_of_norm(kind, mid, gamma0_v)? > alpha {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitEstimate {
    /// Unit estimates of `ūᵢ`.
    pub directions: Vec<DVector<f64>>,
    /// Estimates of `αᵢ` (negative for the sigmoid).
    pub weights: Vec<f64>,
    pub norms: Vec<f64>,
    /// Column `i` is `norms[i]·directions[i]`.
    pub u0: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorInitConfig {
    pub decomposition: DecompositionConfig,
    pub sigma_max: f64,
    pub estimator: M3Estimator,
}

impl Default for TensorInitConfig {
    fn default() -> Self {
        TensorInitConfig { decomposition: DecompositionConfig::default(), sigma_max: DEFAULT_SIGMA_MAX, estimator: M3Estimator::Auto }
    }
}

/// Directions and norms for the user-side factor.
pub fn initialize_side(fs: &FeatureSet, obs: &ObservationSet, k: usize, kind: ActivationKind, cfg: &TensorInitConfig, seed: RngSeed) -> Result<InitEstimate> {
    if kind != ActivationKind::Sigmoid {
        return Err(NimcError::Unsupported(format!("tensor initialization is sigmoid-only, got {kind}")));
    }
    let t = estimate_m3(fs, obs, cfg.estimator)?;
    let dec = decompose_rank_k(&t, k, &cfg.decomposition, seed)?;
    let gamma0 = gamma_sigma(kind, 0, 1.0)?;
    let mut directions = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    let mut norms = Vec::with_capacity(k);
    for (w, v) in dec.weights.iter().zip(&dec.directions) {
        // Positive weight on v means a negative α on ū = −v.
        let alpha = -w;
        norms.push(invert_alpha_to_norm(kind, alpha, gamma0, cfg.sigma_max)?);
        directions.push(-v);
        weights.push(alpha);
    }
    let d = fs.d1();
    let u0 = DMatrix::from_fn(d, k, |r, c| norms[c] * directions[c][r]);
    Ok(InitEstimate { directions, weights, norms, u0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInit {
    pub u: InitEstimate,
    pub v: InitEstimate,
    /// Column `c` of `V0` is column `pairing[c]` of the item-side estimate.
    pub pairing: Vec<usize>,
    pub init: FactorPair,
}

/// Runs the initialization on both sides, then pairs user and item
/// components by the column permutation with the smallest training loss.
pub fn tensor_initialize(fs: &FeatureSet, obs: &ObservationSet, k: usize, kind: ActivationKind, cfg: &TensorInitConfig, seed: RngSeed) -> Result<TensorInit> {
    let u = initialize_side(fs, obs, k, kind, cfg, seed.substream(0))?;
    let v = initialize_side(&fs.transposed(), &obs.transposed(), k, kind, cfg, seed.substream(1))?;
    let pairing = best_pairing(&u.u0, &v.u0, kind, fs, obs)?;
    let v0 = DMatrix::from_fn(v.u0.nrows(), k, |r, c| v.u0[(r, pairing[c])]);
    let init = FactorPair::new(u.u0.clone(), v0, kind)?;
    Ok(TensorInit { u, v, pairing, init })
}

const EXHAUSTIVE_PAIRING_MAX_K: usize = 8;

/// Permutation `π` minimizing `Σ_Ω (Σ_c φ(XU)_{ic} φ(YV)_{j,π(c)} − a)²`.
///
/// The loss is quadratic in the permutation matrix, so after one pass
/// building the `k⁴` moment array every candidate costs `O(k²)`. All `k!`
/// candidates are scored for `k ≤ 8`; larger `k` uses pairwise-swap descent.
pub fn best_pairing(u: &DMatrix<f64>, v: &DMatrix<f64>, kind: ActivationKind, fs: &FeatureSet, obs: &ObservationSet) -> Result<Vec<usize>> {
    let k = u.ncols();
    if v.ncols() != k || u.nrows() != fs.d1() || v.nrows() != fs.d2() {
        return invalid("factor shapes do not match features");
    }
    check_obs(fs, obs)?;
    let pu = side_activations(kind, fs.x(), u).phi;
    let pv = side_activations(kind, fs.y(), v).phi;
    let mut lin = DMatrix::<f64>::zeros(k, k);
    let mut quad = vec![0.0; k * k * k * k];
    for o in obs {
        for c in 0..k {
            let a = pu[(o.i, c)];
            for e in 0..k {
                lin[(c, e)] += o.a * a * pv[(o.j, e)];
            }
            for c2 in 0..k {
                let aa = a * pu[(o.i, c2)];
                for e in 0..k {
                    let base = ((c * k + c2) * k + e) * k;
                    let ae = aa * pv[(o.j, e)];
                    for e2 in 0..k {
                        quad[base + e2] += ae * pv[(o.j, e2)];
                    }
                }
            }
        }
    }
    let score = |perm: &[usize]| -> f64 {
        let mut s = 0.0;
        for c in 0..k {
            s -= 2.0 * lin[(c, perm[c])];
            for c2 in 0..k {
                s += quad[((c * k + c2) * k + perm[c]) * k + perm[c2]];
            }
        }
        s
    };
    let mut best: Vec<usize> = (0..k).collect();
    let mut best_score = score(&best);
    if k <= EXHAUSTIVE_PAIRING_MAX_K {
        let mut perm: Vec<usize> = (0..k).collect();
        while next_permutation(&mut perm) {
            let s = score(&perm);
            if s < best_score {
                best_score = s;
                best = perm.clone();
            }
        }
    } else {
        let mut improved = true;
        while improved {
            improved = false;
            for a in 0..k {
                for b in a + 1..k {
                    best.swap(a, b);
                    let s = score(&best);
                    if s < best_score - 1e-15 * best_score.abs() {
                        best_score = s;
                        improved = true;
                    } else {
                        best.swap(a, b);
                    }
                }
            }
        }
    }
    Ok(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Greedy maximum-cosine matching of estimated columns to reference columns.
/// Returns, for each reference column, the matched estimate column and the
/// signed cosine between them.
pub fn align_columns(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Vec<(usize, f64)>> {
    let k = reference.ncols();
    if estimate.ncols() != k || estimate.nrows() != reference.nrows() {
        return invalid("column sets have different shapes");
    }
    let cos = DMatrix::from_fn(k, k, |r, e| {
        let a = reference.column(r);
        let b = estimate.column(e);
        a.dot(&b) / (a.norm() * b.norm())
    });
    let mut out = vec![(usize::MAX, 0.0); k];
    let mut used_r = vec![false; k];
    let mut used_e = vec![false; k];
    for _ in 0..k {
        let mut pick = (0, 0, f64::NEG_INFINITY);
        for r in (0..k).filter(|&r| !used_r[r]) {
            for e in (0..k).filter(|&e| !used_e[e]) {
                if cos[(r, e)] > pick.2 {
                    pick = (r, e, cos[(r, e)]);
                }
            }
        }
        used_r[pick.0] = true;
        used_e[pick.1] = true;
        out[pick.0] = (pick.1, pick.2);
    }
    Ok(out)
}

/// Smallest matched cosine under [`align_columns`].
pub fn min_cosine(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64> {
    Ok(align_columns(estimate, reference)?.iter().fold(f64::INFINITY, |m, p| m.min(p.1)))
}
