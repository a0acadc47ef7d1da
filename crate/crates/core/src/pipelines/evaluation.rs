use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::fmt_f64;
use crate::model::{predict_rows, row_dot};
use crate::types::{FactorPair, FeatureSet, ObservationSet};

/// Root mean squared residual of `fp` over the test triples.
pub fn rmse_eval(fp: &FactorPair, fs: &FeatureSet, obs: &ObservationSet) -> Result<f64> {
    if obs.is_empty() {
        return invalid("test set is empty");
    }
    fs.check_factors(fp)?;
    obs.validate_for(fs)?;
    let (pu, pv) = predict_rows(fp, fs);
    let sq: f64 = obs.iter().map(|o| (row_dot(&pu, o.i, &pv, o.j) - o.a).powi(2)).sum();
    Ok((sq / obs.len() as f64).sqrt())
}

/// Largest number of points kept on the precision–recall curve.
pub const MAX_PR_POINTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuEvalResult {
    pub r_values: Vec<usize>,
    /// Fraction of query columns whose top-`r` rows contain a positive.
    pub cumulative: Vec<f64>,
    /// `(precision, recall)` along a descending global score threshold.
    pub precision_recall: Vec<(f64, f64)>,
    /// Columns with at least one positive; the curve's denominator.
    pub columns_evaluated: usize,
}

impl PuEvalResult {
    pub fn cumulative_csv(&self) -> String {
        let mut out = String::from("r,cumulative\n");
        for (r, c) in self.r_values.iter().zip(&self.cumulative) {
            out.push_str(&format!("{r},{}\n", fmt_f64(*c)));
        }
        out
    }

    pub fn precision_recall_csv(&self) -> String {
        let mut out = String::from("precision,recall\n");
        for (p, r) in &self.precision_recall {
            out.push_str(&format!("{},{}\n", fmt_f64(*p), fmt_f64(*r)));
        }
        out
    }
}

/// Ranking evaluation for positive-unlabeled data. Each column `j` is a
/// query; its rows are ranked by predicted score (descending, ties by row
/// index). Unobserved cells count as negatives.
pub fn pu_eval(fp: &FactorPair, fs: &FeatureSet, positives: &[(usize, usize)], r_values: &[usize]) -> Result<PuEvalResult> {
    fs.check_factors(fp)?;
    let (pu, pv) = predict_rows(fp, fs);
    let scores = nalgebra::DMatrix::from_fn(fs.n1(), fs.n2(), |i, j| row_dot(&pu, i, &pv, j));
    pu_eval_scores(&scores, positives, r_values)
}

/// [`pu_eval`] on a precomputed `n₁×n₂` score matrix.
pub fn pu_eval_scores(scores: &nalgebra::DMatrix<f64>, positives: &[(usize, usize)], r_values: &[usize]) -> Result<PuEvalResult> {
    let (n1, n2) = scores.shape();
    if positives.is_empty() {
        return invalid("positive set is empty");
    }
    if let Some((i, j)) = positives.iter().find(|(i, j)| *i >= n1 || *j >= n2) {
        return invalid(format!("positive ({i}, {j}) outside {n1}x{n2} grid"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return invalid("scores must be finite");
    }
    let pos: BTreeSet<(usize, usize)> = positives.iter().copied().collect();
    let desc = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));

    // Best (0-based) rank of any positive in each column that has one.
    let mut best_rank = Vec::new();
    for j in 0..n2 {
        if !pos.iter().any(|&(_, c)| c == j) {
            continue;
        }
        let mut rows: Vec<(f64, usize)> = (0..n1).map(|i| (scores[(i, j)], i)).collect();
        rows.sort_by(desc);
        let first = rows.iter().position(|&(_, i)| pos.contains(&(i, j))).expect("column has a positive");
        best_rank.push(first);
    }
    let cols = best_rank.len() as f64;
    let cumulative = r_values.iter().map(|&r| best_rank.iter().filter(|&&b| b < r).count() as f64 / cols).collect();

    let mut cells: Vec<(f64, usize)> = (0..n1 * n2).map(|idx| (scores[(idx / n2, idx % n2)], idx)).collect();
    cells.sort_by(desc);
    let total_pos = pos.len() as f64;
    let stride = cells.len().div_ceil(MAX_PR_POINTS).max(1);
    let mut precision_recall = Vec::new();
    let mut tp = 0usize;
    for (t, &(_, idx)) in cells.iter().enumerate() {
        if pos.contains(&(idx / n2, idx % n2)) {
            tp += 1;
        }
        let taken = t + 1;
        if taken % stride == 0 || taken == cells.len() {
            precision_recall.push((tp as f64 / taken as f64, tp as f64 / total_pos));
        }
    }
    Ok(PuEvalResult { r_values: r_values.to_vec(), cumulative, precision_recall, columns_evaluated: best_rank.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationKind;
    use crate::data::{gen_gaussian_features, gen_truth, sample_observations, TruthSpec};
    use crate::rng::RngSeed;
    use crate::types::Observation;
    use nalgebra::DMatrix;
    use rand::Rng;

    #[test]
    fn rmse_cases() {
        let truth = gen_truth(ActivationKind::Sigmoid, 3, 3, 2, TruthSpec::Gaussian, RngSeed::new(1)).unwrap();
        let fs = gen_gaussian_features(10, 12, 3, 3, RngSeed::new(2)).unwrap();
        let obs = sample_observations(&fs, &truth, 50, RngSeed::new(3)).unwrap();
        assert_eq!(rmse_eval(&truth, &fs, &obs).unwrap(), 0.0);
        assert!(rmse_eval(&truth, &fs, &ObservationSet::default()).is_err());

        // ReLU with zero factors predicts 0 everywhere.
        let zero = FactorPair::new(DMatrix::zeros(3, 2), DMatrix::zeros(3, 2), ActivationKind::ReLU).unwrap();
        let twos: ObservationSet = obs.iter().map(|o| Observation { a: 2.0, ..*o }).collect();
        assert_eq!(rmse_eval(&zero, &fs, &twos).unwrap(), 2.0);

        // Scalar oracle.
        let other = gen_truth(ActivationKind::Sigmoid, 3, 3, 2, TruthSpec::Gaussian, RngSeed::new(4)).unwrap();
        let mut sq = 0.0;
        for o in &obs {
            let mut p = 0.0;
            for c in 0..2 {
                let zu: f64 = (0..3).map(|t| fs.x()[(o.i, t)] * other.u()[(t, c)]).sum();
                let zv: f64 = (0..3).map(|t| fs.y()[(o.j, t)] * other.v()[(t, c)]).sum();
                p += ActivationKind::Sigmoid.phi(zu) * ActivationKind::Sigmoid.phi(zv);
            }
            sq += (p - o.a).powi(2);
        }
        let oracle = (sq / obs.len() as f64).sqrt();
        assert!((rmse_eval(&other, &fs, &obs).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn perfect_scores_hit_one_at_rank_one() {
        let positives = vec![(0, 0), (3, 1), (2, 3), (4, 3)];
        let mut scores = DMatrix::zeros(5, 4);
        for &(i, j) in &positives {
            scores[(i, j)] = 1.0;
        }
        let r = pu_eval_scores(&scores, &positives, &[1, 2, 5]).unwrap();
        assert_eq!(r.columns_evaluated, 3);
        assert_eq!(r.cumulative, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.precision_recall[3], (1.0, 1.0));
        assert!(pu_eval_scores(&scores, &[], &[1]).is_err());
        assert!(pu_eval_scores(&scores, &[(5, 0)], &[1]).is_err());
    }

    #[test]
    fn ties_break_by_row_index() {
        let scores = DMatrix::from_element(4, 1, 0.5);
        let r = pu_eval_scores(&scores, &[(2, 0)], &[1, 2, 3, 4]).unwrap();
        assert_eq!(r.cumulative, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn random_scores_follow_uniform_rank() {
        let (rows, cols) = (50, 2000);
        let mut rng = RngSeed::new(7).rng();
        let scores = DMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>());
        let positives: Vec<(usize, usize)> = (0..cols).map(|j| (rng.gen_range(0..rows), j)).collect();
        let rs = [1, 5, 10, 25, 50];
        let res = pu_eval_scores(&scores, &positives, &rs).unwrap();
        for (r, c) in rs.iter().zip(&res.cumulative) {
            let p = *r as f64 / rows as f64;
            let band = 4.0 * (p * (1.0 - p) / cols as f64).sqrt() + 1e-12;
            assert!((c - p).abs() <= band, "r={r}: {c} vs {p}");
        }
        assert!(res.cumulative.windows(2).all(|w| w[0] <= w[1]));
        assert!(res.precision_recall.len() <= MAX_PR_POINTS + 1);
        assert_eq!(res.precision_recall.last().unwrap().1, 1.0);
    }
}
