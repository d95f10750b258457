use crate::error::{Error, Result};

/// Dense row-major f64 matrix.
///
/// Every product accumulates each output element with one fixed left-to-right
/// loop, so a row's result does not depend on how many rows share the batch.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_f32_rows(cols: usize, data: &[f32]) -> Result<Self> {
        if cols == 0 || !data.len().is_multiple_of(cols) {
            return Err(Error::invalid(format!(
                "{} values do not tile rows of width {cols}",
                data.len()
            )));
        }
        Ok(Self {
            rows: data.len() / cols,
            cols,
            data: data.iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Rows picked by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · wᵀ` where `w` is `out × in`.
    pub fn matmul_transposed(&self, w: &Matrix) -> Result<Matrix> {
        Error::check_dim(w.cols, self.cols)?;
        let mut out = Matrix::zeros(self.rows, w.rows);
        for i in 0..self.rows {
            let x = self.row(i);
            for o in 0..w.rows {
                out.data[i * w.rows + o] = dot(x, w.row(o));
            }
        }
        Ok(out)
    }

    /// `self · w` where `w` is `in × out`, i.e. backprop through `x·wᵀ`.
    pub fn matmul(&self, w: &Matrix) -> Result<Matrix> {
        Error::check_dim(w.rows, self.cols)?;
        let mut out = Matrix::zeros(self.rows, w.cols);
        for i in 0..self.rows {
            let g = self.row(i);
            let o = &mut out.data[i * w.cols..(i + 1) * w.cols];
            for (k, &gk) in g.iter().enumerate() {
                if gk == 0.0 {
                    continue;
                }
                for (oj, &wj) in o.iter_mut().zip(w.row(k)) {
                    *oj += gk * wj;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · x`: with `self = dY (n×out)` and `x (n×in)` gives `dW (out×in)`.
    pub fn transpose_matmul(&self, x: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.rows, x.rows)?;
        let mut out = Matrix::zeros(self.cols, x.cols);
        for n in 0..self.rows {
            let g = self.row(n);
            let xr = x.row(n);
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let dst = &mut out.data[o * x.cols..(o + 1) * x.cols];
                for (d, &xv) in dst.iter_mut().zip(xr) {
                    *d += go * xv;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        Error::check_dim(self.rows, other.rows)?;
        Error::check_dim(self.cols, other.cols)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.data.chunks_exact(self.cols.max(1)) {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        sums
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
