//! Binary (boolean) matrices and the sparsity-pattern semiring.
//!
//! A [`BinaryMatrix`] `X` encodes a sparsity pattern: `X[i,j] = 1` marks an
//! entry that is allowed to be nonzero. Patterns multiply and add in the
//! boolean semiring (OR for `+`, AND/OR for `*`), so `bool_mul(X, Z)` is the
//! pattern of `Y1 * Y2` for any real `Y1` in the pattern of `X` and `Y2` in
//! the pattern of `Z`. The partial order `leq` is entrywise `<=`; `X <= Y`
//! says every matrix that fits `X` also fits `Y`.

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense 0/1 matrix over the boolean semiring.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

/// Outcome of a partial-order comparison, with the offending entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeqReport {
    /// True when `x[i,j] <= y[i,j]` for every entry.
    pub holds: bool,
    /// Positions where `x[i,j] = 1` but `y[i,j] = 0`.
    pub violations: Vec<(usize, usize)>,
}

impl BinaryMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BinaryMatrix {
            rows,
            cols,
            bits: vec![0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        BinaryMatrix {
            rows,
            cols,
            bits: vec![1; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut x = Self::zeros(n, n);
        for i in 0..n {
            x.set(i, i, true);
        }
        x
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut x = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                x.set(i, j, f(i, j));
            }
        }
        x
    }

    /// Builds from row-major 0/1 data; rejects ragged rows and entries other
    /// than 0 or 1.
    pub fn from_rows(data: &[Vec<u8>]) -> Result<Self> {
        let rows = data.len();
        let cols = data.first().map_or(0, Vec::len);
        let mut x = Self::zeros(rows, cols);
        for (i, row) in data.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::RaggedRows {
                    row: i,
                    expected: cols,
                    found: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => x.set(i, j, true),
                    other => {
                        return Err(Error::NotBinary {
                            row: i,
                            col: j,
                            value: other as i64,
                        })
                    }
                }
            }
        }
        Ok(x)
    }

    /// `Struct(Y)`: the sparsity pattern of a real matrix, with entries of
    /// magnitude `<= tol` treated as structural zeros.
    pub fn struct_of(y: &DMatrix<f64>, tol: f64) -> Self {
        assert!(tol >= 0.0, "struct_of requires tol >= 0");
        Self::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)].abs() > tol)
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j] != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v as u8;
    }

    pub fn is_zero(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Positions of the 1-entries in row-major order.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.count_ones());
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Boolean product: `(X * Z)[i,j] = OR_k X[i,k] AND Z[k,j]`.
    ///
    /// This is `Struct(Y1 * Y2)` for generic real `Y1 in Sparse(X)`,
    /// `Y2 in Sparse(Z)`.
    pub fn bool_mul(&self, z: &BinaryMatrix) -> Result<BinaryMatrix> {
        if self.cols != z.rows {
            return Err(Error::dims(
                "bool_mul",
                format!("inner dimension {}", self.cols),
                format!("{}x{}", z.rows, z.cols),
            ));
        }
        let mut out = BinaryMatrix::zeros(self.rows, z.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                if self.get(i, k) {
                    for j in 0..z.cols {
                        if z.get(k, j) {
                            out.set(i, j, true);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Boolean sum (entrywise OR), the pattern union.
    pub fn bool_add(&self, x: &BinaryMatrix) -> Result<BinaryMatrix> {
        if self.shape() != x.shape() {
            return Err(Error::dims(
                "bool_add",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", x.rows, x.cols),
            ));
        }
        Ok(BinaryMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.get(i, j) || x.get(i, j)
        }))
    }

    /// Boolean power of a square pattern; `bool_pow(X, 0)` is the identity.
    pub fn bool_pow(&self, r: usize) -> Result<BinaryMatrix> {
        if self.rows != self.cols {
            return Err(Error::dims(
                "bool_pow",
                "square matrix".to_string(),
                format!("{}x{}", self.rows, self.cols),
            ));
        }
        let mut out = BinaryMatrix::identity(self.rows);
        for _ in 0..r {
            out = out.bool_mul(self)?;
        }
        Ok(out)
    }

    /// Entrywise partial order `self <= other`, reporting the entries where
    /// it fails.
    pub fn leq(&self, other: &BinaryMatrix) -> Result<LeqReport> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                "leq",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut violations = Vec::new();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.get(i, j) && !other.get(i, j) {
                    violations.push((i, j));
                }
            }
        }
        Ok(LeqReport {
            holds: violations.is_empty(),
            violations,
        })
    }

    /// Membership in `Sparse(self)`: every entry of `y` outside the pattern
    /// must satisfy `|y[i,j]| <= tol`.
    pub fn member(&self, y: &DMatrix<f64>, tol: f64) -> Result<bool> {
        if (y.nrows(), y.ncols()) != self.shape() {
            return Err(Error::dims(
                "member",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", y.nrows(), y.ncols()),
            ));
        }
        for i in 0..self.rows {
            for j in 0..self.cols {
                if !self.get(i, j) && y[(i, j)].abs() > tol {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// The pattern as a real 0.0/1.0 matrix.
    pub fn to_real(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j) as u8 as f64)
    }

    /// Copies `block` into `self` with its (0,0) entry at `(i0, j0)`.
    pub fn insert_block(&mut self, i0: usize, j0: usize, block: &BinaryMatrix) {
        assert!(i0 + block.rows <= self.rows && j0 + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.set(i0 + i, j0 + j, block.get(i, j));
            }
        }
    }

    /// Extracts the `rows x cols` sub-pattern at `(i0, j0)`.
    pub fn block(&self, i0: usize, j0: usize, rows: usize, cols: usize) -> BinaryMatrix {
        assert!(i0 + rows <= self.rows && j0 + cols <= self.cols);
        BinaryMatrix::from_fn(rows, cols, |i, j| self.get(i0 + i, j0 + j))
    }
}

/// Zeroes the entries of `y` outside the pattern `x`, the projection onto
/// `Sparse(x)`.
pub fn project(y: &DMatrix<f64>, x: &BinaryMatrix) -> Result<DMatrix<f64>> {
    if (y.nrows(), y.ncols()) != x.shape() {
        return Err(Error::dims(
            "project",
            format!("{}x{}", x.nrows(), x.ncols()),
            format!("{}x{}", y.nrows(), y.ncols()),
        ));
    }
    Ok(DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
        if x.get(i, j) {
            y[(i, j)]
        } else {
            0.0
        }
    }))
}

impl std::fmt::Debug for BinaryMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{}", self.get(i, j) as u8)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Serialize for BinaryMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<u8>> = (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) as u8).collect())
            .collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BinaryMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<u8>>::deserialize(deserializer)?;
        BinaryMatrix::from_rows(&rows).map_err(D::Error::custom)
    }
}
