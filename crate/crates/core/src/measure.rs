use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

/// Tolerance on `|Σ w − 1|` accepted for probability weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Finitely supported probability measure on ℝ^dim. Atoms are stored flat,
/// one row of `dim` entries per atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("measure dimension must be positive".into()));
        }
        if weights.is_empty() {
            return Err(Error::InvalidInput("measure has no atoms".into()));
        }
        check_dim("measure atoms", weights.len() * dim, atoms.len())?;
        check_finite("measure atoms", &atoms)?;
        validate_weights(&weights)?;
        Ok(Self { dim, atoms, weights })
    }

    /// Equal weights `1/n`.
    pub fn uniform(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 || atoms.len() % dim != 0 {
            return Err(Error::InvalidInput(format!(
                "atom buffer of length {} is not a multiple of dim {dim}",
                atoms.len()
            )));
        }
        let n = atoms.len() / dim;
        Self::new(dim, atoms, vec![1.0 / n as f64; n])
    }

    pub fn from_points(points: &[Vec<f64>], weights: Vec<f64>) -> Result<Self> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        let mut atoms = Vec::with_capacity(points.len() * dim);
        for p in points {
            check_dim("measure point", dim, p.len())?;
            atoms.extend_from_slice(p);
        }
        Self::new(dim, atoms, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.atoms.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    /// Push-forward under the coordinate projection onto `start..start+len`.
    pub fn marginal(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.dim || len == 0 {
            return Err(Error::InvalidInput(format!(
                "marginal {start}..{} outside dim {}",
                start + len,
                self.dim
            )));
        }
        let mut atoms = Vec::with_capacity(self.len() * len);
        for a in self.atoms.chunks_exact(self.dim) {
            atoms.extend_from_slice(&a[start..start + len]);
        }
        Ok(Self {
            dim: len,
            atoms,
            weights: self.weights.clone(),
        })
    }

    /// Product-free pairing `(x_i, y_i)` of two measures over the same index set.
    pub fn pair(&self, other: &Self) -> Result<Self> {
        check_dim("paired measure", self.len(), other.len())?;
        let dim = self.dim + other.dim;
        let mut atoms = Vec::with_capacity(self.len() * dim);
        for i in 0..self.len() {
            atoms.extend_from_slice(self.atom(i));
            atoms.extend_from_slice(other.atom(i));
        }
        Ok(Self {
            dim,
            atoms,
            weights: self.weights.clone(),
        })
    }

    /// Every atom replaced by two copies carrying half its weight.
    pub fn duplicated(&self) -> Self {
        let mut atoms = Vec::with_capacity(2 * self.atoms.len());
        let mut weights = Vec::with_capacity(2 * self.len());
        for (a, w) in self.iter() {
            atoms.extend_from_slice(a);
            atoms.extend_from_slice(a);
            weights.push(w / 2.0);
            weights.push(w / 2.0);
        }
        Self {
            dim: self.dim,
            atoms,
            weights,
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.atoms
            .chunks_exact(self.dim)
            .map(crate::linalg::norm)
            .fold(0.0, f64::max)
    }
}

pub(crate) fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::InvalidInput(format!(
            "weights sum to {s}, expected 1 within {WEIGHT_SUM_TOL:e}"
        )));
    }
    Ok(())
}
