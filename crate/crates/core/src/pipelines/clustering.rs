use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::data::gaussian_matrix;
use crate::error::{invalid, NimcError, Result};
use crate::model::loss_and_gradient_tied;
use crate::optimizer::{power_lambda_max, StepSize, PROBE_ITERS};
use crate::rng::RngSeed;
use crate::types::{Observation, ObservationSet};

/// Fraction of unordered pairs on which two partitions disagree about
/// co-membership. Computed from the contingency table in exact integer
/// arithmetic, so it is independent of how either side names its clusters.
pub fn clustering_error(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() {
        return invalid(format!("label lengths differ: {} vs {}", truth.len(), pred.len()));
    }
    let n = truth.len();
    if n < 2 {
        return invalid("clustering error needs at least two items");
    }
    let pairs = |c: u128| c * c.saturating_sub(1) / 2;
    let count = |labels: &[usize]| {
        let mut m = std::collections::HashMap::<usize, u128>::new();
        labels.iter().for_each(|l| *m.entry(*l).or_default() += 1);
        m.values().map(|&c| pairs(c)).sum::<u128>()
    };
    let mut joint = std::collections::HashMap::<(usize, usize), u128>::new();
    for (a, b) in truth.iter().zip(pred) {
        *joint.entry((*a, *b)).or_default() += 1;
    }
    let both: u128 = joint.values().map(|&c| pairs(c)).sum();
    let disagreements = count(truth) + count(pred) - 2 * both;
    Ok(disagreements as f64 / pairs(n as u128) as f64)
}

/// Random Fourier features `r(x) = (1/√q)[sin(Qx); cos(Qx)]` with a single
/// shared `Q ∈ ℝ^{q×d}` whose entries are `N(0, σ²)`, approximating the
/// Gaussian kernel `exp(−σ²‖x−x′‖²/2)`.
pub fn rff(x: &DMatrix<f64>, q: usize, sigma: f64, seed: RngSeed) -> Result<DMatrix<f64>> {
    if q == 0 {
        return invalid("q must be at least 1");
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return invalid(format!("sigma must be positive and finite, got {sigma}"));
    }
    let mut rng = seed.rng();
    let qm = gaussian_matrix(q, x.ncols(), &mut rng) * sigma;
    rff_with_matrix(x, &qm)
}

/// Random Fourier features for a caller-supplied projection `Q` (q×d).
pub fn rff_with_matrix(x: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if q.ncols() != x.ncols() || q.nrows() == 0 {
        return invalid(format!("projection is {}x{} but features have {} columns", q.nrows(), q.ncols(), x.ncols()));
    }
    let z = x * q.transpose();
    let nq = q.nrows();
    let s = 1.0 / (nq as f64).sqrt();
    Ok(DMatrix::from_fn(x.nrows(), 2 * nq, |i, c| if c < nq { s * z[(i, c)].sin() } else { s * z[(i, c - nq)].cos() }))
}

/// `k` isotropic unit-variance Gaussian clusters of `per_cluster` points in
/// `ℝ^d`. Centers are drawn as `separation·g/‖g‖` for Gaussian `g`, redrawn
/// until every pair is at least `separation` apart.
pub fn gaussian_blobs(k: usize, per_cluster: usize, d: usize, separation: f64, seed: RngSeed) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if k == 0 || per_cluster == 0 || d == 0 {
        return invalid("blob counts and dimension must be at least 1");
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return invalid(format!("separation must be finite and non-negative, got {separation}"));
    }
    let mut rng = seed.rng();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while centers.len() < k {
        attempts += 1;
        if attempts > 100_000 {
            return Err(NimcError::ResourceLimit("could not place well-separated blob centers".into()));
        }
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let c: Vec<f64> = g.iter().map(|v| separation * v / norm).collect();
        let far = centers.iter().all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation);
        if far {
            centers.push(c);
        }
    }
    let n = k * per_cluster;
    let mut x = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for p in 0..per_cluster {
            let row = c * per_cluster + p;
            for (col, mu) in center.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[(row, col)] = mu + z;
            }
            labels.push(c);
        }
    }
    Ok((x, labels))
}

/// Semi-supervised clustering instance: items with features, their
/// ground-truth clusters and a sample of the same-cluster indicator matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTask {
    pub x: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub omega: ObservationSet,
    pub k: usize,
}

impl ClusterTask {
    /// Builds a task from explicit observations, checking that every label is
    /// below `k` and that each observed value equals the similarity entry.
    pub fn new(x: DMatrix<f64>, labels: Vec<usize>, omega: ObservationSet, k: usize) -> Result<Self> {
        let n = x.nrows();
        if labels.len() != n {
            return invalid(format!("{} labels for {n} items", labels.len()));
        }
        if n < 2 || k == 0 {
            return invalid("need at least two items and one cluster");
        }
        if let Some(l) = labels.iter().find(|l| **l >= k) {
            return invalid(format!("label {l} is not below k={k}"));
        }
        if omega.is_empty() {
            return invalid("observation set is empty");
        }
        for o in &omega {
            if o.i >= n || o.j >= n {
                return invalid(format!("observation ({}, {}) outside {n}x{n} grid", o.i, o.j));
            }
            let a = if labels[o.i] == labels[o.j] { 1.0 } else { 0.0 };
            if o.a != a {
                return invalid(format!("observation ({}, {}) has value {} but similarity is {a}", o.i, o.j, o.a));
            }
        }
        Ok(ClusterTask { x, labels, omega, k })
    }

    /// Samples `m` entries of the similarity matrix uniformly with replacement.
    pub fn sample(x: DMatrix<f64>, labels: Vec<usize>, k: usize, m: usize, seed: RngSeed) -> Result<Self> {
        let n = x.nrows();
        if m == 0 || n == 0 {
            return invalid("need at least one item and one observation");
        }
        let mut rng = seed.rng();
        let idx = Uniform::new(0, n);
        let omega: ObservationSet = (0..m)
            .map(|_| {
                let (i, j) = (idx.sample(&mut rng), idx.sample(&mut rng));
                Observation { i, j, a: Self::sim(&labels, i, j) }
            })
            .collect();
        Self::new(x, labels, omega, k)
    }

    /// Observes every entry of the similarity matrix once.
    pub fn fully_observed(x: DMatrix<f64>, labels: Vec<usize>, k: usize) -> Result<Self> {
        let n = x.nrows();
        let omega: ObservationSet = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| Observation { i, j, a: Self::sim(&labels, i, j) }).collect();
        Self::new(x, labels, omega, k)
    }

    fn sim(labels: &[usize], i: usize, j: usize) -> f64 {
        if labels.get(i) == labels.get(j) {
            1.0
        } else {
            0.0
        }
    }

    /// Similarity matrix entry `A_ij`.
    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        Self::sim(&self.labels, i, j)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: DMatrix<f64>,
    pub inertia: f64,
}

fn sq_dist(p: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    (0..p.ncols()).map(|t| (p[(i, t)] - c[(j, t)]).powi(2)).sum()
}

fn kmeans_once(p: &DMatrix<f64>, k: usize, iters: usize, seed: RngSeed) -> KMeansResult {
    let (n, dim) = p.shape();
    let mut rng = seed.rng();
    // k-means++ seeding.
    let mut centers = DMatrix::zeros(k, dim);
    let first = rng.gen_range(0..n);
    centers.row_mut(0).copy_from(&p.row(first));
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(p, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in best.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).copy_from(&p.row(pick));
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(p, i, &centers, c));
        }
    }
    let assign = |centers: &DMatrix<f64>| -> (Vec<usize>, f64) {
        let mut labels = vec![0; n];
        let mut inertia = 0.0;
        for (i, l) in labels.iter_mut().enumerate() {
            let (arg, dist) = (0..k).map(|c| (c, sq_dist(p, i, centers, c))).fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            *l = arg;
            inertia += dist;
        }
        (labels, inertia)
    };
    let (mut labels, mut inertia) = assign(&centers);
    for _ in 0..iters {
        let mut sums = DMatrix::<f64>::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for t in 0..dim {
                sums[(l, t)] += p[(i, t)];
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous center.
            if counts[c] > 0 {
                for t in 0..dim {
                    centers[(c, t)] = sums[(c, t)] / counts[c] as f64;
                }
            }
        }
        let (nl, ni) = assign(&centers);
        let done = nl == labels;
        labels = nl;
        inertia = ni;
        if done {
            break;
        }
    }
    KMeansResult { labels, centers, inertia }
}

/// Lloyd's algorithm with k-means++ seeding on the rows of `points`. Each
/// restart uses its own substream; the lowest inertia wins, ties going to
/// the earliest restart.
pub fn kmeans(points: &DMatrix<f64>, k: usize, restarts: usize, iters: usize, seed: RngSeed) -> Result<KMeansResult> {
    if k == 0 || k > points.nrows() {
        return invalid(format!("need 1 <= k <= n, got k={k}, n={}", points.nrows()));
    }
    if restarts == 0 {
        return invalid("restarts must be at least 1");
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(NimcError::Numeric("k-means input contains non-finite values".into()));
    }
    let runs: Vec<KMeansResult> = (0..restarts).into_par_iter().map(|r| kmeans_once(points, k, iters, seed.substream(r as u64))).collect();
    let mut best = None::<KMeansResult>;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Factor applied to the step after every accepted descent step.
const STEP_GROWTH: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub activation: ActivationKind,
    /// Initial step; grown after each accepted step and halved (with the
    /// step rejected) whenever the loss would increase.
    pub step_size: StepSize,
    pub max_iters: usize,
    /// Training stops once the loss falls to this value.
    pub tolerance: f64,
    pub kmeans_restarts: usize,
    pub kmeans_iters: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            activation: ActivationKind::ReLU,
            step_size: StepSize::Probe,
            max_iters: 2000,
            tolerance: 1e-6,
            kmeans_restarts: 10,
            kmeans_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    pub labels: Vec<usize>,
    pub error: f64,
    pub u: Vec<f64>,
    pub k_latent: usize,
    pub step_size: f64,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Fits the weight-tied model `A ≈ φ(XU)φ(XU)ᵀ` on the observed similarity
/// entries by gradient descent, embeds items with the top `task.k` left
/// singular vectors of `φ(XU)`, and clusters them with k-means.
pub fn cluster_pipeline(task: &ClusterTask, cfg: &ClusterConfig, k_latent: usize, seed: RngSeed) -> Result<ClusterOutcome> {
    let d = task.x.ncols();
    if k_latent < task.k {
        return invalid(format!("k_latent={k_latent} must be at least the cluster count {}", task.k));
    }
    if task.k > task.n() {
        return invalid("more clusters than items");
    }
    if !(cfg.tolerance >= 0.0) {
        return invalid("tolerance must be non-negative");
    }
    let kind = cfg.activation;
    let mut u = {
        let mut rng = seed.substream(0).rng();
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        DMatrix::from_fn(d, k_latent, |_, _| normal.sample(&mut rng))
    };
    let grad = |theta: &[f64]| -> Result<Vec<f64>> {
        let um = DMatrix::from_column_slice(d, k_latent, theta);
        Ok(loss_and_gradient_tied(&um, kind, &task.x, &task.omega)?.1.as_slice().to_vec())
    };
    let eta = match cfg.step_size {
        StepSize::Fixed(e) => e,
        StepSize::Probe => {
            let lam = power_lambda_max(u.as_slice(), grad, PROBE_ITERS)?;
            if !(lam > 0.0) {
                return Err(NimcError::Numeric(format!("step-size probe found non-positive curvature {lam}")));
            }
            0.5 / lam
        }
    };
    if !(eta > 0.0 && eta.is_finite()) {
        return invalid(format!("step size must be positive and finite, got {eta}"));
    }
    let (l0, mut g) = loss_and_gradient_tied(&u, kind, &task.x, &task.omega)?;
    let mut loss = l0.value;
    let mut iterations = 0;
    let mut step = eta;
    while iterations < cfg.max_iters && loss > cfg.tolerance {
        let trial = &u - &g * step;
        let (l, ng) = loss_and_gradient_tied(&trial, kind, &task.x, &task.omega)?;
        iterations += 1;
        if l.value.is_finite() && l.value <= loss {
            u = trial;
            loss = l.value;
            g = ng;
            step *= STEP_GROWTH;
        } else {
            step *= 0.5;
            // No descent left at any usable step: a stationary point.
            if step < eta * 1e-12 {
                break;
            }
        }
    }
    let embedding = top_left_singular_vectors(&(&task.x * &u).map(|z| kind.phi(z)), task.k)?;
    let km = kmeans(&embedding, task.k, cfg.kmeans_restarts, cfg.kmeans_iters, seed.substream(1))?;
    let error = clustering_error(&task.labels, &km.labels)?;
    Ok(ClusterOutcome {
        labels: km.labels,
        error,
        u: u.as_slice().to_vec(),
        k_latent,
        step_size: eta,
        iterations,
        initial_loss: l0.value,
        final_loss: loss,
    })
}

/// Top `k` left singular vectors of the tall matrix `f`, via the
/// eigendecomposition of its small Gram matrix. Directions with zero singular
/// value come out as zero columns.
pub fn top_left_singular_vectors(f: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    if k > f.ncols() {
        return invalid(format!("asked for {k} singular vectors of a matrix with {} columns", f.ncols()));
    }
    let eig = SymmetricEigen::new(f.tr_mul(f));
    let mut order: Vec<usize> = (0..f.ncols()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut out = DMatrix::zeros(f.nrows(), k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        let s = eig.eigenvalues[idx].max(0.0).sqrt();
        if s > 1e-12 * top.sqrt() && s > 0.0 {
            out.set_column(c, &(f * eig.eigenvectors.column(idx) / s));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_error(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let mut bad = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if (a[i] == a[j]) != (b[i] == b[j]) {
                    bad += 1;
                }
            }
        }
        2.0 * bad as f64 / (n * (n - 1)) as f64
    }

    #[test]
    fn clustering_error_hand_cases() {
        assert_eq!(clustering_error(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 0.0);
        assert_eq!(clustering_error(&[0, 0], &[0, 1]).unwrap(), 1.0);
        assert_eq!(clustering_error(&[0, 1], &[3, 3]).unwrap(), 1.0);
        assert!(clustering_error(&[0, 1], &[0]).is_err());
        assert!(clustering_error(&[0], &[0]).is_err());
    }

    #[test]
    fn clustering_error_matches_pair_loop() {
        let mut rng = RngSeed::new(4).rng();
        for _ in 0..200 {
            let n = rng.gen_range(2..60);
            let ka = rng.gen_range(1..6);
            let kb = rng.gen_range(1..6);
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ka)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kb)).collect();
            assert_eq!(clustering_error(&a, &b).unwrap(), brute_force_error(&a, &b));
            // Relabeling either side by a bijection changes nothing.
            let relabel: Vec<usize> = b.iter().map(|l| 100 - l * 7).collect();
            assert_eq!(clustering_error(&a, &relabel).unwrap(), clustering_error(&a, &b).unwrap());
        }
    }

    #[test]
    fn rff_zero_projection_and_unit_rows() {
        let x = gaussian_matrix(7, 3, &mut RngSeed::new(1).rng());
        let r = rff_with_matrix(&x, &DMatrix::zeros(4, 3)).unwrap();
        for i in 0..7 {
            for c in 0..8 {
                let expect = if c < 4 { 0.0 } else { 0.5 };
                assert_eq!(r[(i, c)], expect);
            }
        }
        let r = rff(&x, 50, 0.7, RngSeed::new(2)).unwrap();
        assert_eq!(r.shape(), (7, 100));
        for i in 0..7 {
            assert!((r.row(i).norm() - 1.0).abs() <= 1e-12);
        }
        assert!(rff(&x, 0, 1.0, RngSeed::new(2)).is_err());
        assert!(rff(&x, 3, 0.0, RngSeed::new(2)).is_err());
    }

    #[test]
    fn rff_approximates_gaussian_kernel() {
        let x = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, -0.3, 1.0, 1.0]);
        let sigma = 0.8;
        let r = rff(&x, 10_000, sigma, RngSeed::new(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d2: f64 = (0..2).map(|t| (x[(i, t)] - x[(j, t)]).powi(2)).sum();
                let kernel = (-sigma * sigma * d2 / 2.0).exp();
                let approx = r.row(i).dot(&r.row(j));
                assert!((approx - kernel).abs() <= 0.02, "({i},{j}) {approx} vs {kernel}");
            }
        }
    }

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let (x, labels) = gaussian_blobs(3, 30, 2, 20.0, RngSeed::new(5)).unwrap();
        let km = kmeans(&x, 3, 10, 100, RngSeed::new(6)).unwrap();
        assert_eq!(clustering_error(&labels, &km.labels).unwrap(), 0.0);
        assert_eq!(km, kmeans(&x, 3, 10, 100, RngSeed::new(6)).unwrap());
        assert!(kmeans(&x, 0, 10, 100, RngSeed::new(6)).is_err());
    }

    #[test]
    fn task_construction_checks() {
        let x = gaussian_matrix(4, 2, &mut RngSeed::new(1).rng());
        let t = ClusterTask::sample(x.clone(), vec![0, 0, 1, 1], 2, 30, RngSeed::new(2)).unwrap();
        assert_eq!(t.omega.len(), 30);
        assert!(t.omega.iter().all(|o| o.a == t.similarity(o.i, o.j)));
        assert_eq!(t.similarity(0, 0), 1.0);
        assert_eq!(t.similarity(0, 1), t.similarity(1, 0));
        let bad = ObservationSet::new(vec![Observation { i: 0, j: 2, a: 1.0 }]);
        assert!(ClusterTask::new(x.clone(), vec![0, 0, 1, 1], bad, 2).is_err());
        assert!(ClusterTask::sample(x, vec![0, 0, 2, 1], 2, 3, RngSeed::new(2)).is_err());
    }

    #[test]
    fn singular_vectors_match_svd() {
        let f = gaussian_matrix(20, 4, &mut RngSeed::new(9).rng());
        let ours = top_left_singular_vectors(&f, 2).unwrap();
        let svd = f.clone().svd(true, false);
        let uref = svd.u.unwrap();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for c in 0..2 {
            let dot = ours.column(c).dot(&uref.column(order[c])).abs();
            assert!((dot - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn three_blobs_are_recovered() {
        let (x, labels) = gaussian_blobs(3, 50, 5, 6.0, RngSeed::new(11)).unwrap();
        let task = ClusterTask::sample(x, labels, 3, 20 * 150, RngSeed::new(12)).unwrap();
        let out = cluster_pipeline(&task, &ClusterConfig::default(), 10, RngSeed::new(13)).unwrap();
        assert!(out.final_loss < out.initial_loss);
        assert!(out.error <= 0.05, "error {} loss {}->{} iters {}", out.error, out.initial_loss, out.final_loss, out.iterations);
        assert_eq!(out, cluster_pipeline(&task, &ClusterConfig::default(), 10, RngSeed::new(13)).unwrap());
    }
}
