//! Spectral truncation: eigenvalues of −A, state vectors in the eigenbasis
//! and the unstable/stable splitting with its coordinate projections.

use std::ops::{Add, Index, IndexMut, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Eigenvalues μ_1 ≥ μ_2 ≥ … ≥ μ_J of −A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    mu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<String>,
}

impl SpectralModel {
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if mu.len() < 2 {
            return Err(Error::param(format!(
                "at least 2 modes are required, got {}",
                mu.len()
            )));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::param("eigenvalues must be finite"));
        }
        if mu.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::param("eigenvalues must be non-increasing"));
        }
        Ok(Self {
            mu,
            labels: Vec::new(),
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.mu.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mu.len(),
                got: labels.len(),
            });
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn modes(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Dirichlet Laplacian on (0, π) shifted by `a`: μ_j = a − j².
pub fn shifted_dirichlet_laplacian(modes: usize, a: f64) -> Result<SpectralModel> {
    let mu = (1..=modes).map(|j| a - (j * j) as f64).collect();
    let labels = (1..=modes).map(|j| format!("sin({j}x)")).collect();
    SpectralModel::new(mu)?.with_labels(labels)
}

/// Coefficients of a state in the eigenbasis {e_j}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        stats::norm(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn distance_to(&self, other: &StateVector) -> f64 {
        stats::dist(&self.0, &other.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|x| s * x).collect())
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for StateVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for &StateVector {
    type Output = StateVector;
    fn add(self, rhs: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &StateVector {
    type Output = StateVector;
    fn sub(self, rhs: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Unstable,
    Stable,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Unstable => Side::Stable,
            Side::Stable => Side::Unstable,
        }
    }
}

/// The splitting H = E^u ⊕ E^s at a spectral gap λ.
///
/// E^u is spanned by the first `cut` eigenmodes, E^s by the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splitting {
    pub cut: usize,
    pub dim: usize,
    pub lambda: f64,
    /// Smallest unstable eigenvalue μ_u, or +∞ if E^u = {0}.
    pub alpha_raw: f64,
    /// Largest stable eigenvalue μ_s, or −∞ if E^s = {0}.
    pub beta_raw: f64,
}

impl Splitting {
    pub fn range(&self, side: Side) -> std::ops::Range<usize> {
        match side {
            Side::Unstable => 0..self.cut,
            Side::Stable => self.cut..self.dim,
        }
    }

    pub fn side_of(&self, mode: usize) -> Side {
        if mode < self.cut {
            Side::Unstable
        } else {
            Side::Stable
        }
    }

    pub fn dim_of(&self, side: Side) -> usize {
        self.range(side).len()
    }

    /// Embeds block coordinates of `side` into the full space.
    pub fn embed(&self, side: Side, block: &[f64]) -> Result<StateVector> {
        let r = self.range(side);
        if block.len() != r.len() {
            return Err(Error::DimensionMismatch {
                expected: r.len(),
                got: block.len(),
            });
        }
        let mut x = StateVector::zeros(self.dim);
        x.0[r].copy_from_slice(block);
        Ok(x)
    }

    /// Coordinates of `x` in the block of `side`.
    pub fn block<'a>(&self, side: Side, x: &'a StateVector) -> &'a [f64] {
        &x.0[self.range(side)]
    }
}

pub fn make_splitting(model: &SpectralModel, lambda: f64) -> Result<Splitting> {
    if !lambda.is_finite() {
        return Err(Error::param("lambda must be finite"));
    }
    if let Some(index) = model.mu.iter().position(|&m| m == lambda) {
        return Err(Error::SpectralCollision {
            lambda,
            index: index + 1,
        });
    }
    let cut = model.mu.iter().filter(|&&m| m > lambda).count();
    let dim = model.modes();
    Ok(Splitting {
        cut,
        dim,
        lambda,
        alpha_raw: if cut > 0 { model.mu[cut - 1] } else { f64::INFINITY },
        beta_raw: if cut < dim { model.mu[cut] } else { f64::NEG_INFINITY },
    })
}

/// Π^u or Π^s: zeroes the complementary block.
pub fn project(split: &Splitting, side: Side, x: &StateVector) -> Result<StateVector> {
    if x.dim() != split.dim {
        return Err(Error::DimensionMismatch {
            expected: split.dim,
            got: x.dim(),
        });
    }
    let keep = split.range(side);
    let mut out = StateVector::zeros(split.dim);
    out.0[keep.clone()].copy_from_slice(&x.0[keep]);
    Ok(out)
}
