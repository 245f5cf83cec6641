use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{at_b, norm};
use crate::measure::validate_weights;

/// The four blocks of a head, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Query,
    Key,
    Value,
    Output,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Query, Block::Key, Block::Value, Block::Output];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One attention head θ = (θ_Q, θ_K, θ_V, θ_O), each block a row-major
/// `k × d` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    k: usize,
    d: usize,
    data: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            k,
            d,
            data: vec![0.0; 4 * k * d],
        }
    }

    /// Builds a head from its flat `[Q | K | V | O]` buffer.
    pub fn from_flat(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidInput("head dimensions must be positive".into()));
        }
        check_dim("head parameters", 4 * k * d, data.len())?;
        check_finite("head parameters", &data)?;
        Ok(Self { k, d, data })
    }

    pub fn from_blocks(k: usize, d: usize, q: &[f64], key: &[f64], v: &[f64], o: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(4 * k * d);
        for b in [q, key, v, o] {
            check_dim("head block", k * d, b.len())?;
            data.extend_from_slice(b);
        }
        Self::from_flat(k, d, data)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn block_len(&self) -> usize {
        self.k * self.d
    }

    pub fn block(&self, b: Block) -> &[f64] {
        let n = self.block_len();
        &self.data[b.index() * n..(b.index() + 1) * n]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let n = self.block_len();
        &mut self.data[b.index() * n..(b.index() + 1) * n]
    }

    pub fn q(&self) -> &[f64] {
        self.block(Block::Query)
    }

    pub fn key(&self) -> &[f64] {
        self.block(Block::Key)
    }

    pub fn v(&self) -> &[f64] {
        self.block(Block::Value)
    }

    pub fn o(&self) -> &[f64] {
        self.block(Block::Output)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.k == other.k && self.d == other.d
    }

    pub fn block_norms(&self) -> [f64; 4] {
        Block::ALL.map(|b| norm(self.block(b)))
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
    }

    pub fn dist_sq(&self, other: &Self) -> f64 {
        crate::linalg::dist_sq(&self.data, &other.data)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            k: self.k,
            d: self.d,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Interaction matrix `β θ_Kᵀ θ_Q` (d × d).
    pub fn interaction(&self, beta: f64) -> Vec<f64> {
        let mut a = at_b(self.key(), self.q(), self.k, self.d);
        a.iter_mut().for_each(|v| *v *= beta);
        a
    }

    /// Value-output map `θ_Oᵀ θ_V` (d × d).
    pub fn value_output(&self) -> Vec<f64> {
        at_b(self.o(), self.v(), self.k, self.d)
    }
}

/// Weighted collection of heads: the empirical head law at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadCloud {
    heads: Vec<HeadParams>,
    weights: Vec<f64>,
}

impl HeadCloud {
    pub fn new(heads: Vec<HeadParams>, weights: Vec<f64>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::InvalidInput("head cloud is empty".into()));
        }
        check_dim("head cloud weights", heads.len(), weights.len())?;
        if heads.iter().any(|h| !h.same_shape(&heads[0])) {
            return Err(Error::InvalidInput("heads in a cloud must share (k, d)".into()));
        }
        validate_weights(&weights)?;
        Ok(Self { heads, weights })
    }

    pub fn uniform(heads: Vec<HeadParams>) -> Result<Self> {
        let n = heads.len().max(1);
        Self::new(heads, vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn k(&self) -> usize {
        self.heads[0].k()
    }

    pub fn d(&self) -> usize {
        self.heads[0].d()
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [HeadParams] {
        &mut self.heads
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&HeadParams, f64)> + '_ {
        self.heads.iter().zip(self.weights.iter().copied())
    }

    /// Every head replaced by two copies at half weight.
    pub fn duplicated(&self) -> Self {
        let mut heads = Vec::with_capacity(2 * self.len());
        let mut weights = Vec::with_capacity(2 * self.len());
        for (h, w) in self.iter() {
            heads.push(h.clone());
            heads.push(h.clone());
            weights.push(w / 2.0);
            weights.push(w / 2.0);
        }
        Self { heads, weights }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interaction_is_scaled_key_query_product() {
        let h = HeadParams::from_blocks(
            1,
            2,
            &[1.0, 2.0],
            &[3.0, -1.0],
            &[0.5, 0.5],
            &[1.0, 0.0],
        )
        .unwrap();
        // θ_Kᵀ θ_Q = [3, -1]ᵀ [1, 2]
        assert_eq!(h.interaction(2.0), vec![6.0, 12.0, -2.0, -4.0]);
        assert_eq!(h.value_output(), vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn blocks_are_laid_out_in_order() {
        let data: Vec<f64> = (0..8).map(f64::from).collect();
        let h = HeadParams::from_flat(1, 2, data).unwrap();
        assert_eq!(h.block(Block::Value), &[4.0, 5.0]);
        assert_eq!(h.block_norms()[0], 1.0);
    }
}
