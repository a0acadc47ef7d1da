//! Activation functions and their Gaussian moment constants.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, NimcError, Result};
use crate::quadrature::{composite_normal_expectation, GaussHermite};

/// Node count used for all moment tables.
pub const MOMENT_NODES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    #[serde(rename = "relu")]
    ReLU,
    /// Only for degeneracy studies; training pipelines reject it.
    Linear,
}

impl ActivationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::ReLU => "relu",
            ActivationKind::Linear => "linear",
        }
    }

    #[inline]
    pub fn phi(&self, z: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(z),
            ActivationKind::Tanh => z.tanh(),
            ActivationKind::ReLU => z.max(0.0),
            ActivationKind::Linear => z,
        }
    }

    /// First derivative. ReLU uses φ′(0) = 0.
    #[inline]
    pub fn phi_prime(&self, z: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            ActivationKind::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Linear => 1.0,
        }
    }

    /// Second derivative. Zero everywhere for ReLU and Linear.
    #[inline]
    pub fn phi_second(&self, z: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            ActivationKind::ReLU | ActivationKind::Linear => 0.0,
        }
    }

    /// `(φ(z), φ′(z))` sharing one transcendental evaluation.
    #[inline]
    pub fn phi_and_prime(&self, z: f64) -> (f64, f64) {
        match self {
            ActivationKind::Sigmoid => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            _ => (self.phi(z), self.phi_prime(z)),
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, ActivationKind::ReLU)
    }

    pub fn trainable(&self) -> bool {
        !matches!(self, ActivationKind::Linear)
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = NimcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "relu" => Ok(ActivationKind::ReLU),
            "linear" => Ok(ActivationKind::Linear),
            other => invalid(format!("unknown activation '{other}'")),
        }
    }
}

/// Gaussian moment constants of an activation, z ∼ N(0,1):
/// `alpha_ij = E[φ(z)^i z^j]`, `beta_ij = E[φ′(z)^i z^j]`,
/// `gamma_cross = E[φ(z)φ′(z)z]`, and the spectral constant
/// `rho = min(α₂₀β₂₀ − α₁₀²β₁₀² − β₁₀²α₁₁², α₂₀β₂₂ − α₁₀²β₁₂² − γ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub activation: ActivationKind,
    pub alpha10: f64,
    pub alpha11: f64,
    pub alpha20: f64,
    pub beta10: f64,
    pub beta11: f64,
    pub beta12: f64,
    pub beta20: f64,
    pub beta22: f64,
    pub gamma_cross: f64,
    pub rho: f64,
}

impl MomentTable {
    fn from_raw(
        activation: ActivationKind,
        [alpha10, alpha11, alpha20]: [f64; 3],
        [beta10, beta11, beta12, beta20, beta22]: [f64; 5],
        gamma_cross: f64,
    ) -> Self {
        let mut table = MomentTable {
            activation,
            alpha10,
            alpha11,
            alpha20,
            beta10,
            beta11,
            beta12,
            beta20,
            beta22,
            gamma_cross,
            rho: 0.0,
        };
        let (first, second) = table.rho_terms();
        table.rho = first.min(second);
        table
    }

    /// The two candidate terms whose minimum is `rho`.
    pub fn rho_terms(&self) -> (f64, f64) {
        let a = self;
        (
            a.alpha20 * a.beta20 - a.alpha10.powi(2) * a.beta10.powi(2) - a.beta10.powi(2) * a.alpha11.powi(2),
            a.alpha20 * a.beta22 - a.alpha10.powi(2) * a.beta12.powi(2) - a.gamma_cross.powi(2),
        )
    }
}

/// Moment table with an explicit node count; used for quadrature stability checks.
pub fn moment_table_with_nodes(kind: ActivationKind, nodes: usize) -> MomentTable {
    match kind {
        ActivationKind::ReLU => {
            // Half-Gaussian moments: E[z·1{z>0}] = 1/√(2π), E[z²·1{z>0}] = 1/2.
            let h1 = 1.0 / (2.0 * PI).sqrt();
            MomentTable::from_raw(kind, [h1, 0.5, 0.5], [0.5, h1, 0.5, 0.5, 0.5], 0.5)
        }
        ActivationKind::Linear => MomentTable::from_raw(kind, [0.0, 1.0, 1.0], [1.0, 0.0, 1.0, 1.0, 1.0], 1.0),
        ActivationKind::Sigmoid | ActivationKind::Tanh => {
            let gh = GaussHermite::cached(nodes);
            let e = |f: &dyn Fn(f64) -> f64| gh.expect(f);
            let p = |z: f64| kind.phi(z);
            let d = |z: f64| kind.phi_prime(z);
            MomentTable::from_raw(
                kind,
                [e(&p), e(&|z| p(z) * z), e(&|z| p(z) * p(z))],
                [
                    e(&d),
                    e(&|z| d(z) * z),
                    e(&|z| d(z) * z * z),
                    e(&|z| d(z) * d(z)),
                    e(&|z| d(z) * d(z) * z * z),
                ],
                e(&|z| p(z) * d(z) * z),
            )
        }
    }
}

/// Moment table for `kind`. Smooth activations use 128-node Gauss–Hermite
/// quadrature; ReLU and Linear are closed form.
pub fn moment_table(kind: ActivationKind) -> MomentTable {
    moment_table_with_nodes(kind, MOMENT_NODES)
}

/// `γ_q(σ) = E_{z∼N(0,1)}[φ(σz) z^q]` tagged with its arguments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaMoments {
    pub q: u32,
    pub sigma: f64,
    pub value: f64,
}

const HALF_GAUSSIAN_MOMENTS: [f64; 6] = [
    0.5,
    0.398_942_280_401_432_7, // 1/√(2π)
    0.5,
    0.797_884_560_802_865_4, // 2/√(2π)
    1.5,
    3.191_538_243_211_461_8, // 8/√(2π)
];

/// `γ_q(σ)` for q ∈ {0,…,4}, σ > 0.
///
/// Smooth activations start with 128-node Gauss–Hermite; if doubling the node
/// count moves the value by more than 1e-12 the composite Gauss–Legendre rule
/// is used instead. ReLU is closed form: `σ·E[z^{q+1}·1{z>0}]`.
pub fn gamma_sigma(kind: ActivationKind, q: u32, sigma: f64) -> Result<f64> {
    if q > 4 {
        return invalid(format!("moment order {q} not in 0..=4"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return invalid(format!("sigma must be positive and finite, got {sigma}"));
    }
    let qi = q as i32;
    Ok(match kind {
        ActivationKind::ReLU => sigma * HALF_GAUSSIAN_MOMENTS[q as usize + 1],
        ActivationKind::Linear => sigma * [0.0, 1.0, 0.0, 3.0, 0.0][q as usize],
        _ => {
            let f = |z: f64| kind.phi(sigma * z) * z.powi(qi);
            let coarse = GaussHermite::cached(MOMENT_NODES).expect(f);
            let fine = GaussHermite::cached(2 * MOMENT_NODES).expect(f);
            if (coarse - fine).abs() <= 1e-12 {
                fine
            } else {
                composite_normal_expectation(f)
            }
        }
    })
}

pub fn sigma_moment(kind: ActivationKind, q: u32, sigma: f64) -> Result<SigmaMoments> {
    Ok(SigmaMoments { q, sigma, value: gamma_sigma(kind, q, sigma)? })
}
