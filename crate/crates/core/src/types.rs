//! Shared domain types.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::error::{invalid, Result};

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Parameter pair `(U, V)` with `U: d₁×k`, `V: d₂×k` and the activation that
/// links them.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    activation: ActivationKind,
}

impl FactorPair {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>, activation: ActivationKind) -> Result<Self> {
        if u.ncols() != v.ncols() {
            return invalid(format!("U has {} columns but V has {}", u.ncols(), v.ncols()));
        }
        let k = u.ncols();
        if k == 0 {
            return invalid("rank k must be at least 1");
        }
        if k > u.nrows().min(v.nrows()) {
            return invalid(format!("rank k={k} exceeds min(d1={}, d2={})", u.nrows(), v.nrows()));
        }
        if !all_finite(&u) || !all_finite(&v) {
            return invalid("factor entries must be finite");
        }
        Ok(FactorPair { u, v, activation })
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn d1(&self) -> usize {
        self.u.nrows()
    }

    pub fn d2(&self) -> usize {
        self.v.nrows()
    }

    /// Number of free parameters, `(d₁ + d₂)·k`.
    pub fn num_params(&self) -> usize {
        (self.d1() + self.d2()) * self.rank()
    }

    pub fn with_activation(&self, activation: ActivationKind) -> Self {
        FactorPair { activation, ..self.clone() }
    }

    /// Flattened parameters: columns u₁..u_k then v₁..v_k.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.u.as_slice());
        out.extend_from_slice(self.v.as_slice());
        out
    }

    pub fn from_vec(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.num_params() {
            return invalid(format!("expected {} parameters, got {}", self.num_params(), params.len()));
        }
        let split = self.d1() * self.rank();
        let u = DMatrix::from_column_slice(self.d1(), self.rank(), &params[..split]);
        let v = DMatrix::from_column_slice(self.d2(), self.rank(), &params[split..]);
        FactorPair::new(u, v, self.activation)
    }

    /// `‖U − U'‖_F² + ‖V − V'‖_F²`.
    pub fn squared_distance(&self, other: &FactorPair) -> f64 {
        (&self.u - &other.u).norm_squared() + (&self.v - &other.v).norm_squared()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>, ActivationKind) {
        (self.u, self.v, self.activation)
    }
}

/// Row-wise user features `X: n₁×d₁` and item features `Y: n₂×d₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || y.nrows() == 0 || x.ncols() == 0 || y.ncols() == 0 {
            return invalid("feature matrices must be non-empty");
        }
        if !all_finite(&x) || !all_finite(&y) {
            return invalid("feature entries must be finite");
        }
        Ok(FeatureSet { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n1(&self) -> usize {
        self.x.nrows()
    }

    pub fn n2(&self) -> usize {
        self.y.nrows()
    }

    pub fn d1(&self) -> usize {
        self.x.ncols()
    }

    pub fn d2(&self) -> usize {
        self.y.ncols()
    }

    /// Same features with the roles of users and items exchanged.
    pub fn transposed(&self) -> FeatureSet {
        FeatureSet { x: self.y.clone(), y: self.x.clone() }
    }

    pub(crate) fn check_factors(&self, fp: &FactorPair) -> Result<()> {
        if fp.d1() != self.d1() || fp.d2() != self.d2() {
            return invalid(format!(
                "factor dims ({}, {}) do not match feature dims ({}, {})",
                fp.d1(),
                fp.d2(),
                self.d1(),
                self.d2()
            ));
        }
        Ok(())
    }
}

/// One observed rating `a` for user `i` and item `j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub i: usize,
    pub j: usize,
    pub a: f64,
}

/// Multiset of observed cells; duplicates are kept.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    triples: Vec<Observation>,
}

impl ObservationSet {
    pub fn new(triples: Vec<Observation>) -> Self {
        ObservationSet { triples }
    }

    pub fn triples(&self) -> &[Observation] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.triples.iter()
    }

    pub fn validate_for(&self, fs: &FeatureSet) -> Result<()> {
        for (line, o) in self.triples.iter().enumerate() {
            if o.i >= fs.n1() || o.j >= fs.n2() {
                return invalid(format!(
                    "observation {line} ({}, {}) outside {}x{} grid",
                    o.i,
                    o.j,
                    fs.n1(),
                    fs.n2()
                ));
            }
            if !o.a.is_finite() {
                return invalid(format!("observation {line} has non-finite rating"));
            }
        }
        Ok(())
    }

    /// Observations with user and item indices swapped.
    pub fn transposed(&self) -> ObservationSet {
        ObservationSet::new(self.triples.iter().map(|o| Observation { i: o.j, j: o.i, a: o.a }).collect())
    }
}

impl FromIterator<Observation> for ObservationSet {
    fn from_iter<T: IntoIterator<Item = Observation>>(iter: T) -> Self {
        ObservationSet::new(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a ObservationSet {
    type Item = &'a Observation;
    type IntoIter = std::slice::Iter<'a, Observation>;

    fn into_iter(self) -> Self::IntoIter {
        self.triples.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_pair_rejects_bad_shapes() {
        let a = DMatrix::<f64>::zeros(3, 2);
        assert!(FactorPair::new(a.clone(), DMatrix::zeros(3, 1), ActivationKind::Sigmoid).is_err());
        assert!(FactorPair::new(DMatrix::zeros(3, 0), DMatrix::zeros(3, 0), ActivationKind::Sigmoid).is_err());
        assert!(FactorPair::new(a.clone(), DMatrix::zeros(1, 2), ActivationKind::Sigmoid).is_err());
        let mut bad = a.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(FactorPair::new(bad, a.clone(), ActivationKind::Sigmoid).is_err());
        assert!(FactorPair::new(a.clone(), DMatrix::zeros(4, 2), ActivationKind::Sigmoid).is_ok());
    }

    #[test]
    fn vec_round_trip() {
        let u = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let v = DMatrix::from_fn(4, 2, |i, j| -((i + j) as f64));
        let fp = FactorPair::new(u, v, ActivationKind::Tanh).unwrap();
        let back = fp.from_vec(&fp.to_vec()).unwrap();
        assert_eq!(fp, back);
        assert_eq!(fp.to_vec()[3], fp.u()[(0, 1)]);
    }
}
