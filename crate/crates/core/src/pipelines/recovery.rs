use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::spearman;
use crate::activations::ActivationKind;
use crate::data::{gen_gaussian_features, gen_truth, random_init, sample_observations, TruthSpec};
use crate::error::{invalid, Result};
use crate::optimizer::{train, Plateau, TrainConfig};
use crate::rng::RngSeed;

/// A trial succeeds when the final relative test error is at most this.
pub const SUCCESS_THRESHOLD: f64 = 1e-3;
pub const GRID_MAX_ITERS: usize = 20_000;
/// Failed trials stall well before the iteration cap; stop them early.
pub const GRID_PLATEAU: Plateau = Plateau { window: 500, rel_tol: 1e-4 };

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Template for every trial; its seed is replaced per trial.
    pub train: TrainConfig,
    pub truth: TruthSpec,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            train: TrainConfig { max_iters: GRID_MAX_ITERS, plateau: Some(GRID_PLATEAU), ..TrainConfig::default() },
            truth: TruthSpec::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryGridResult {
    pub activation: ActivationKind,
    pub n_values: Vec<usize>,
    pub m_values: Vec<usize>,
    /// `success_rate[a][b]` is the cell `(n_values[a], m_values[b])`.
    pub success_rate: Vec<Vec<f64>>,
    pub trials_per_cell: usize,
    /// Final relative test error of every trial, per cell.
    pub test_errors: Vec<Vec<Vec<f64>>>,
}

impl RecoveryGridResult {
    pub const CSV_HEADER: &'static str = "n,m,success_rate";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (a, n) in self.n_values.iter().enumerate() {
            for (b, m) in self.m_values.iter().enumerate() {
                out.push_str(&format!("{n},{m},{}\n", crate::io::fmt_f64(self.success_rate[a][b])));
            }
        }
        out
    }

    pub fn rate(&self, n: usize, m: usize) -> Option<f64> {
        let a = self.n_values.iter().position(|&v| v == n)?;
        let b = self.m_values.iter().position(|&v| v == m)?;
        Some(self.success_rate[a][b])
    }

    /// Smallest `n` reaching rate 1.0 at the largest `m`.
    pub fn min_n_full_rate(&self) -> Option<usize> {
        let b = self.m_values.len() - 1;
        self.n_values.iter().enumerate().find(|(a, _)| self.success_rate[*a][b] >= 1.0).map(|(_, n)| *n)
    }

    /// Smallest `m` reaching rate 1.0 at the largest `n`.
    pub fn min_m_full_rate(&self) -> Option<usize> {
        let a = self.n_values.len() - 1;
        self.m_values.iter().enumerate().find(|(b, _)| self.success_rate[a][*b] >= 1.0).map(|(_, m)| *m)
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.n_values.iter().enumerate().flat_map(move |(a, n)| {
            self.m_values.iter().enumerate().map(move |(b, m)| (*n, *m, self.success_rate[a][b]))
        })
    }

    /// Spearman correlation of success rate with `n` over all cells.
    pub fn spearman_n(&self) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self.cells().map(|(n, _, r)| (n as f64, r)).unzip();
        spearman(&x, &y)
    }

    /// Spearman correlation of success rate with `m` over all cells.
    pub fn spearman_m(&self) -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self.cells().map(|(_, m, r)| (m as f64, r)).unzip();
        spearman(&x, &y)
    }
}

/// Success-rate grid over user/item counts `n` (with `n₁ = n₂ = n`) and
/// observation counts `m`. Every trial draws its own truth, features,
/// observations and random start from a dedicated RNG substream and trains
/// on a fixed observation set.
#[allow(clippy::too_many_arguments)]
pub fn recovery_grid(
    kind: ActivationKind,
    d: usize,
    k: usize,
    n_values: &[usize],
    m_values: &[usize],
    trials: usize,
    cfg: &GridConfig,
    seed: RngSeed,
) -> Result<RecoveryGridResult> {
    if trials == 0 {
        return invalid("trials must be at least 1");
    }
    if n_values.is_empty() || m_values.is_empty() || n_values.contains(&0) || m_values.contains(&0) {
        return invalid("grid axes must be non-empty with positive entries");
    }
    if k == 0 || k > d {
        return invalid(format!("need 1 <= k <= d, got k={k}, d={d}"));
    }
    cfg.train.validate()?;
    let jobs: Vec<(usize, usize, usize)> = (0..n_values.len())
        .flat_map(|a| (0..m_values.len()).flat_map(move |b| (0..trials).map(move |t| (a, b, t))))
        .collect();
    let errors: Vec<f64> = jobs
        .par_iter()
        .map(|&(a, b, t)| {
            let s = seed.substream(a as u64).substream(b as u64).substream(t as u64);
            let (n, m) = (n_values[a], m_values[b]);
            let truth = gen_truth(kind, d, d, k, cfg.truth, s.substream(0))?;
            let fs = gen_gaussian_features(n, n, d, d, s.substream(1))?;
            let obs = sample_observations(&fs, &truth, m, s.substream(2))?;
            let fp0 = random_init(kind, d, d, k, s.substream(3))?;
            let tc = TrainConfig { seed: s.substream(4), ..cfg.train };
            // A diverged run counts as a failure rather than aborting the grid.
            Ok(match train(&fp0, Some(&truth), &fs, &obs, &tc) {
                Ok((_, trace)) => trace.final_test_error().unwrap_or(f64::INFINITY),
                Err(_) => f64::INFINITY,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut success_rate = vec![vec![0.0; m_values.len()]; n_values.len()];
    let mut test_errors = vec![vec![Vec::with_capacity(trials); m_values.len()]; n_values.len()];
    for (&(a, b, _), e) in jobs.iter().zip(&errors) {
        test_errors[a][b].push(*e);
    }
    for (a, row) in success_rate.iter_mut().enumerate() {
        for (b, r) in row.iter_mut().enumerate() {
            let wins = test_errors[a][b].iter().filter(|e| **e <= SUCCESS_THRESHOLD).count();
            *r = wins as f64 / trials as f64;
        }
    }
    Ok(RecoveryGridResult {
        activation: kind,
        n_values: n_values.to_vec(),
        m_values: m_values.to_vec(),
        success_rate,
        trials_per_cell: trials,
        test_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{Plateau, StepSize};

    fn quick_cfg() -> GridConfig {
        GridConfig {
            train: TrainConfig { step_size: StepSize::Probe, max_iters: 4000, plateau: Some(Plateau { window: 300, rel_tol: 1e-4 }), ..TrainConfig::default() },
            truth: TruthSpec::Gaussian,
        }
    }

    #[test]
    fn trials_zero_is_rejected() {
        assert!(recovery_grid(ActivationKind::Sigmoid, 4, 2, &[10], &[50], 0, &quick_cfg(), RngSeed::new(1)).is_err());
        assert!(recovery_grid(ActivationKind::Sigmoid, 4, 2, &[], &[50], 1, &quick_cfg(), RngSeed::new(1)).is_err());
    }

    #[test]
    fn small_grid_shape_trend_and_determinism() {
        let cfg = quick_cfg();
        let r = recovery_grid(ActivationKind::Sigmoid, 4, 2, &[4, 40], &[16, 400], 3, &cfg, RngSeed::new(2)).unwrap();
        assert_eq!(r.success_rate.len(), 2);
        assert!(r.success_rate.iter().all(|row| row.len() == 2 && row.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(r.rate(40, 400), Some(1.0));
        assert!(r.rate(4, 16).unwrap() < 1.0);
        assert!(r.spearman_n().unwrap() >= 0.0 && r.spearman_m().unwrap() >= 0.0);
        assert_eq!(r.min_n_full_rate(), Some(40));
        let again = recovery_grid(ActivationKind::Sigmoid, 4, 2, &[4, 40], &[16, 400], 3, &cfg, RngSeed::new(2)).unwrap();
        assert_eq!(r, again);
        let csv = r.to_csv();
        assert!(csv.starts_with("n,m,success_rate\n4,16,"));
        assert_eq!(csv.lines().count(), 5);
    }
}
