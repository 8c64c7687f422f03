use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of a 2-D tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub(crate) fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            })
        }
    }
}

// Every matrix product funnels into `gemm_acc`, which adds the products for
// one output entry in ascending order of the shared index, starting from the
// entry's existing value. Tiling only decides which entries are computed
// together. `dot` (and `gemm_nt`, built on it) keeps four lane partials,
// lane `l` summing indices `≡ l (mod 4)` in ascending order, combined as
// (0+2) + (1+3) before the tail is added in order.

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + TILE_ROWS <= m {
        let mut j = 0;
        while j + TILE_COLS <= n {
            let mut acc = [[0.0f64; TILE_COLS]; TILE_ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + TILE_COLS]);
            }
            for p in 0..k {
                let bv: &[f64; TILE_COLS] = b[p * n + j..p * n + j + TILE_COLS]
                    .try_into()
                    .expect("tile width");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for l in 0..TILE_COLS {
                        row[l] += av * bv[l];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + TILE_COLS].copy_from_slice(row);
            }
            j += TILE_COLS;
        }
        if j < n {
            for r in i..i + TILE_ROWS {
                for jj in j..n {
                    let mut s = out[r * n + jj];
                    for p in 0..k {
                        s += a[r * k + p] * b[p * n + jj];
                    }
                    out[r * n + jj] = s;
                }
            }
        }
        i += TILE_ROWS;
    }
    while i < m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
        i += 1;
    }
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(&mut out, a, b, m, k, n);
    out
}

/// `a[m×k] · b[n×k]ᵀ`; every entry is a [`dot`] of two contiguous rows.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut i = 0;
    while i + 2 <= m {
        let (a0, a1) = (&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]);
        let mut j = 0;
        while j + 4 <= n {
            let rows = [
                &b[j * k..(j + 1) * k],
                &b[(j + 1) * k..(j + 2) * k],
                &b[(j + 2) * k..(j + 3) * k],
                &b[(j + 3) * k..(j + 4) * k],
            ];
            let d = dot_tile(a0, a1, rows);
            for c in 0..4 {
                out[i * n + j + c] = d[0][c];
                out[(i + 1) * n + j + c] = d[1][c];
            }
            j += 4;
        }
        for jj in j..n {
            let brow = &b[jj * k..(jj + 1) * k];
            out[i * n + jj] = dot(a0, brow);
            out[(i + 1) * n + jj] = dot(a1, brow);
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// Eight simultaneous [`dot`]s with identical per-entry summation order.
#[inline]
fn dot_tile(a0: &[f64], a1: &[f64], b: [&[f64]; 4]) -> [[f64; 4]; 2] {
    let k = a0.len();
    let chunks = k / DOT_LANES;
    let mut acc = [[[0.0f64; DOT_LANES]; 4]; 2];
    for c in 0..chunks {
        let o = c * DOT_LANES;
        let x0: &[f64; DOT_LANES] = a0[o..o + DOT_LANES].try_into().unwrap();
        let x1: &[f64; DOT_LANES] = a1[o..o + DOT_LANES].try_into().unwrap();
        for (col, brow) in b.iter().enumerate() {
            let y: &[f64; DOT_LANES] = brow[o..o + DOT_LANES].try_into().unwrap();
            for l in 0..DOT_LANES {
                acc[0][col][l] += x0[l] * y[l];
                acc[1][col][l] += x1[l] * y[l];
            }
        }
    }
    let mut out = [[0.0; 4]; 2];
    for (r, x) in [a0, a1].iter().enumerate() {
        for col in 0..4 {
            let mut s = combine_lanes(&acc[r][col]);
            for j in chunks * DOT_LANES..k {
                s += x[j] * b[col][j];
            }
            out[r][col] = s;
        }
    }
    out
}

/// `acc[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn gemm_tn_acc(acc: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    gemm_acc(acc, &transpose_raw(a, m, k), g, k, m, n);
}

const DOT_LANES: usize = 4;

#[inline]
fn combine_lanes(l: &[f64; DOT_LANES]) -> f64 {
    (l[0] + l[2]) + (l[1] + l[3])
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len().min(b.len());
    let chunks = len / DOT_LANES;
    let mut lanes = [0.0f64; DOT_LANES];
    for c in 0..chunks {
        let o = c * DOT_LANES;
        for l in 0..DOT_LANES {
            lanes[l] += a[o + l] * b[o + l];
        }
    }
    let mut s = combine_lanes(&lanes);
    for j in chunks * DOT_LANES..len {
        s += a[j] * b[j];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let got = gemm(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[p * 4 + j];
                }
                assert!((got[i * 4 + j] - s).abs() < 1e-12);
            }
        }
        let bt = transpose_raw(&b, 3, 4);
        let nt = gemm_nt(&a, &bt, 2, 3, 4);
        for (x, y) in nt.iter().zip(&got) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tiled_kernel_matches_reference_order_exactly() {
        // sizes exercise full tiles plus row and column remainders
        let (m, k, n) = (9, 13, 19);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 17) as f64 - 8.0) / 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 7 % 23) as f64 - 11.0) / 7.0).collect();
        let got = gemm(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert_eq!(got[i * n + j].to_bits(), s.to_bits());
            }
        }
        let bt = transpose_raw(&b, k, n);
        let nt = gemm_nt(&a, &bt, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let d = dot(&a[i * k..(i + 1) * k], &bt[j * k..(j + 1) * k]);
                assert_eq!(nt[i * n + j].to_bits(), d.to_bits());
            }
        }
    }
}
