//! Dense row-major matrices and gather-style permutation vectors.
//!
//! Every weight matrix in the pipeline is stored as `rows × cols` with the
//! input features on the row axis, so a linear layer computes `X · W` with
//! `X` of shape `S × rows`.

use serde::{Deserialize, Serialize};

use crate::error::{PgbError, Result};

/// Dense `rows × cols` matrix of finite reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(PgbError::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(PgbError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(PgbError::Validation(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(PgbError::Shape("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the `[r0, r0+nr) × [c0, c0+nc)` window.
    pub fn submatrix(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Result<Self> {
        if nr == 0 || nc == 0 || r0 + nr > self.rows || c0 + nc > self.cols {
            return Err(PgbError::Shape(format!(
                "window {nr}x{nc} at ({r0},{c0}) outside {}x{} matrix",
                self.rows, self.cols
            )));
        }
        Ok(Self::from_fn(nr, nc, |i, j| self.get(r0 + i, c0 + j)))
    }

    /// Columns `[c0, c0+nc)` of every row.
    pub fn column_slice(&self, c0: usize, nc: usize) -> Result<Self> {
        self.submatrix(0, c0, self.rows, nc)
    }

    /// Frobenius norm of `self - other`.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(PgbError::Shape(format!(
                "cannot compare {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(PgbError::Shape(format!(
                "cannot compare {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| PgbError::Shape("vstack of zero matrices".into()))?;
        let cols = first.cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(PgbError::Shape("vstack column counts differ".into()));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self { rows, cols, data })
    }
}

/// Gather-style permutation: entry at destination position `i` names the
/// source index that lands there.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(entries: Vec<usize>) -> Result<Self> {
        let n = entries.len();
        let mut seen = vec![false; n];
        for &e in &entries {
            if e >= n || seen[e] {
                return Err(PgbError::Validation(format!(
                    "permutation of length {n} is not a bijection (entry {e})"
                )));
            }
            seen[e] = true;
        }
        Ok(Self(entries))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &e)| i == e)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    /// `argsort` of a bijection: `inv[p[i]] = i`.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    /// Gathers `items` so that `out[i] = items[self[i]]`.
    pub fn gather<T: Copy>(&self, items: &[T]) -> Vec<T> {
        self.0.iter().map(|&p| items[p]).collect()
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = PgbError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

/// Validates a raw index vector and inverts it.
pub fn inverse_permutation(entries: &[usize]) -> Result<Permutation> {
    Ok(Permutation::new(entries.to_vec())?.inverse())
}

/// `out[i][j] = w[pr[i]][pc[j]]`.
pub fn apply_permutation(w: &Matrix, pr: &Permutation, pc: &Permutation) -> Result<Matrix> {
    if pr.len() != w.rows() || pc.len() != w.cols() {
        return Err(PgbError::Shape(format!(
            "permutations of length {}x{} do not match {}x{} matrix",
            pr.len(),
            pc.len(),
            w.rows(),
            w.cols()
        )));
    }
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        let src = w.row(pr.get(i));
        for (dst, &c) in out.row_mut(i).iter_mut().zip(pc.as_slice()) {
            *dst = src[c];
        }
    }
    Ok(out)
}

/// Gathers the columns of `x`: `out[s][j] = x[s][p[j]]`.
pub fn permute_columns(x: &Matrix, p: &Permutation) -> Result<Matrix> {
    apply_permutation(x, &Permutation::identity(x.rows()), p)
}

/// `S×M · M×N`. Loop order i-k-j so the inner loop streams rows of both
/// `w` and the output.
pub fn matmul(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(PgbError::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), w.cols());
    matmul_into(x.as_slice(), x.cols(), w, out.data.as_mut_slice());
    Ok(out)
}

/// Accumulates `x · w` into `out`, where `x` is row-major with `x_stride`
/// values per row, of which the first `w.rows()` are used.
pub(crate) fn matmul_into(x: &[f64], x_stride: usize, w: &Matrix, out: &mut [f64]) {
    let n = w.cols();
    let k_dim = w.rows();
    for (x_row, out_row) in x.chunks(x_stride).zip(out.chunks_mut(n)) {
        for (k, &xv) in x_row[..k_dim].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in out_row.iter_mut().zip(w.row(k)) {
                *o += xv * wv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn perm(v: &[usize]) -> Permutation {
        Permutation::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Matrix::from_vec(0, 3, vec![]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn grouping_example_permutation() {
        // 1-indexed [1,3,2,4] / [1,4,2,3] in the original write-up.
        let w = m(&[
            &[1.0, 0.0, 0.0, 2.0],
            &[0.0, 1.0, 1.0, 0.0],
            &[2.0, 0.0, 0.0, 1.0],
            &[0.0, 1.0, 1.0, 0.0],
        ]);
        let out = apply_permutation(&w, &perm(&[0, 2, 1, 3]), &perm(&[0, 3, 1, 2])).unwrap();
        let expected = m(&[
            &[1.0, 2.0, 0.0, 0.0],
            &[2.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 1.0],
            &[0.0, 0.0, 1.0, 1.0],
        ]);
        assert_eq!(out, expected);
    }

    #[test]
    fn identity_and_reversal() {
        let w = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let id = Permutation::identity(2);
        assert_eq!(apply_permutation(&w, &id, &id).unwrap(), w);
        let rev = perm(&[1, 0]);
        assert_eq!(
            apply_permutation(&w, &rev, &rev).unwrap(),
            m(&[&[4.0, 3.0], &[2.0, 1.0]])
        );
    }

    #[test]
    fn apply_rejects_length_mismatch() {
        let w = Matrix::zeros(2, 3);
        let err = apply_permutation(&w, &Permutation::identity(2), &Permutation::identity(2));
        assert!(matches!(err, Err(PgbError::Shape(_))));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse_permutation(&[0, 2, 1, 3]).unwrap(), perm(&[0, 2, 1, 3]));
        assert_eq!(inverse_permutation(&[2, 0, 1]).unwrap(), perm(&[1, 2, 0]));
        assert!(Permutation::identity(5).inverse().is_identity());
        assert!(inverse_permutation(&[0, 0, 1]).is_err());
        assert!(inverse_permutation(&[0, 3]).is_err());
    }

    #[test]
    fn inverse_round_trips_every_permutation_of_three() {
        use itertools::Itertools;
        let w = Matrix::from_fn(3, 1, |i, _| (i + 1) as f64);
        let id = Permutation::identity(1);
        for p in (0..3).permutations(3) {
            let p = Permutation::new(p).unwrap();
            let inv = p.inverse();
            for i in 0..3 {
                assert_eq!(inv.get(p.get(i)), i);
            }
            let there = apply_permutation(&w, &p, &id).unwrap();
            assert_eq!(apply_permutation(&there, &inv, &id).unwrap(), w);
        }
    }

    #[test]
    fn matmul_small_cases() {
        let w = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &w).unwrap(), w);
        assert_eq!(matmul(&m(&[&[1.0, 1.0]]), &w).unwrap(), m(&[&[4.0, 6.0]]));
        assert!(matmul(&Matrix::zeros(1, 3), &w).is_err());
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-2.0..2.0));
        let w = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-2.0..2.0));
        let got = matmul(&x, &w).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += x.as_slice()[i * 4 + k] * w.as_slice()[k * 5 + j];
                }
                assert!((got.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn serde_rejects_non_bijection() {
        assert!(serde_json::from_str::<Permutation>("[1,0,2]").is_ok());
        assert!(serde_json::from_str::<Permutation>("[1,1,2]").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_perm(n: usize) -> impl Strategy<Value = Permutation> {
            Just((0..n).collect::<Vec<_>>())
                .prop_shuffle()
                .prop_map(|v| Permutation::new(v).unwrap())
        }

        fn arb_case() -> impl Strategy<Value = (Matrix, Permutation, Permutation)> {
            (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
                (
                    proptest::collection::vec(-100.0f64..100.0, r * c)
                        .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap()),
                    arb_perm(r),
                    arb_perm(c),
                )
            })
        }

        proptest! {
            #[test]
            fn double_inverse_is_identity(p in (1usize..20).prop_flat_map(arb_perm)) {
                prop_assert_eq!(p.inverse().inverse(), p);
            }

            #[test]
            fn permute_then_inverse_restores_exactly((w, pr, pc) in arb_case()) {
                let there = apply_permutation(&w, &pr, &pc).unwrap();
                let back = apply_permutation(&there, &pr.inverse(), &pc.inverse()).unwrap();
                prop_assert_eq!(back, w);
            }
        }
    }
}
