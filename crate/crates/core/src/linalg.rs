//! Small dense helpers. Everything here is row-major on plain slices; the
//! matrices involved are at most a few dozen entries wide.

use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        mat_vec(&self.data, self.rows, self.cols, x, &mut out);
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self[(i, l)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(l, j)];
                }
            }
        }
        out
    }

    /// Hilbert-Schmidt (Frobenius) norm.
    pub fn frobenius(&self) -> f64 {
        norm(&self.data)
    }

    /// Spectral norm via power iteration on `AᵀA`.
    pub fn operator_norm(&self) -> f64 {
        let ata = self.transpose().matmul(self);
        let n = ata.rows;
        if n == 0 {
            return 0.0;
        }
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = ata.mul_vec(&v);
            let nw = norm(&w);
            if nw == 0.0 {
                return 0.0;
            }
            v = w.iter().map(|x| x / nw).collect();
            if (nw - lambda).abs() <= 1e-15 * nw {
                lambda = nw;
                break;
            }
            lambda = nw;
        }
        lambda.sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix::from_row_major(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_row_major(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `out = M x` for a row-major `rows × cols` matrix.
#[inline]
pub fn mat_vec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        out[i] = dot(&m[i * cols..(i + 1) * cols], x);
    }
}

/// `out = Mᵀ x` for a row-major `rows × cols` matrix.
#[inline]
pub fn mat_t_vec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out[..cols].iter_mut().for_each(|v| *v = 0.0);
    for i in 0..rows {
        let xi = x[i];
        let row = &m[i * cols..(i + 1) * cols];
        for j in 0..cols {
            out[j] += row[j] * xi;
        }
    }
}

/// `Aᵀ B` for two row-major `k × d` matrices; result is `d × d`.
pub fn at_b(a: &[f64], b: &[f64], k: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for r in 0..k {
        let ar = &a[r * d..(r + 1) * d];
        let br = &b[r * d..(r + 1) * d];
        for i in 0..d {
            let ai = ar[i];
            if ai == 0.0 {
                continue;
            }
            let row = &mut out[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += ai * br[j];
            }
        }
    }
    out
}

/// Sums `n` vectors of length `out.len()` produced by `term` along a fixed
/// binary tree whose left subtree always holds the largest power of two
/// strictly below the node size. Replacing every term by two copies at half
/// weight reproduces the same tree one level deeper, so the result is
/// bit-identical under atom duplication.
pub fn tree_sum<F>(n: usize, out: &mut [f64], term: &mut F)
where
    F: FnMut(usize, &mut [f64]),
{
    assert!(n > 0, "tree_sum over zero terms");
    let depth = usize::BITS as usize - (n - 1).leading_zeros() as usize;
    let mut scratch = vec![0.0; out.len() * depth.max(1)];
    tree_rec(0, n, out, &mut scratch, term);
}

fn tree_rec<F>(lo: usize, hi: usize, out: &mut [f64], scratch: &mut [f64], term: &mut F)
where
    F: FnMut(usize, &mut [f64]),
{
    let n = hi - lo;
    if n == 1 {
        term(lo, out);
        return;
    }
    let split = lo + largest_pow2_below(n);
    let (tmp, rest) = scratch.split_at_mut(out.len());
    tree_rec(lo, split, out, rest, term);
    tree_rec(split, hi, tmp, rest, term);
    for (o, t) in out.iter_mut().zip(tmp.iter()) {
        *o += *t;
    }
}

#[inline]
fn largest_pow2_below(n: usize) -> usize {
    debug_assert!(n >= 2);
    let p = 1usize << (usize::BITS - 1 - n.leading_zeros());
    if p == n {
        p / 2
    } else {
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_b_matches_explicit_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.5, -1.0, 2.0, 1.0, 0.0, -2.0];
        let got = at_b(&a, &b, 2, 3);
        let am = Matrix::from_row_major(2, 3, a.to_vec());
        let bm = Matrix::from_row_major(2, 3, b.to_vec());
        assert_eq!(got, am.transpose().matmul(&bm).into_vec());
    }

    #[test]
    fn tree_sum_is_invariant_under_duplication() {
        let vals: Vec<f64> = (0..7).map(|i| 0.1 * (i as f64 + 1.0).sqrt() + 1e-3 * i as f64).collect();
        let weights = [0.1, 0.2, 0.05, 0.15, 0.25, 0.13, 0.12];
        let mut once = [0.0];
        tree_sum(7, &mut once, &mut |h, out| out[0] = weights[h] * vals[h]);
        let mut twice = [0.0];
        tree_sum(14, &mut twice, &mut |h, out| out[0] = (weights[h / 2] / 2.0) * vals[h / 2]);
        assert_eq!(once[0].to_bits(), twice[0].to_bits());
    }

    #[test]
    fn operator_norm_of_diagonal() {
        let m = Matrix::from_row_major(2, 2, vec![3.0, 0.0, 0.0, -5.0]);
        assert!((m.operator_norm() - 5.0).abs() < 1e-12);
    }
}
