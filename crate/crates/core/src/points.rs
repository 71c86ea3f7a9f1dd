//! Dense row-major point sets.

use crate::error::{Error, Result};

/// `n` points in `dim` dimensions, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Points {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Points {
            n,
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn from_vec(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * dim {
            return Err(Error::dims("point buffer length", n * dim, data.len()));
        }
        Ok(Points { n, dim, data })
    }

    /// Builds from a list of equally sized rows. An empty list yields zero points of dimension 0.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::dims(format!("row {i}"), dim, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Points {
            n: rows.len(),
            dim,
            data,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        (0..self.n).map(move |i| self.row(i))
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

    /// The first `count` rows.
    pub fn head(&self, count: usize) -> Points {
        let count = count.min(self.n);
        Points {
            n: count,
            dim: self.dim,
            data: self.data[..count * self.dim].to_vec(),
        }
    }

    /// Rows picked (and ordered) by `indices`.
    pub fn select(&self, indices: &[usize]) -> Points {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Points {
            n: indices.len(),
            dim: self.dim,
            data,
        }
    }

    /// Column `j` as an owned vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Appends `extra` zero columns (`ι_s`).
    pub fn pad_columns(&self, extra: usize) -> Points {
        if extra == 0 {
            return self.clone();
        }
        let dim = self.dim + extra;
        let mut data = Vec::with_capacity(self.n * dim);
        for r in self.rows() {
            data.extend_from_slice(r);
            data.extend(std::iter::repeat_n(0.0, extra));
        }
        Points {
            n: self.n,
            dim,
            data,
        }
    }

    /// Keeps the first `keep` columns (`π_r` with `r = dim - keep`).
    pub fn truncate_columns(&self, keep: usize) -> Points {
        if keep >= self.dim {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.n * keep);
        for r in self.rows() {
            data.extend_from_slice(&r[..keep]);
        }
        Points {
            n: self.n,
            dim: keep,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}
