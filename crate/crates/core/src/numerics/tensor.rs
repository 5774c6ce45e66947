use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Real;
use crate::error::{shape_err, Result};

/// Dense row-major array. Values only; gradients live on the [`Tape`](super::Tape).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(shape_err!("ragged rows"));
        }
        let data = rows.iter().flatten().map(|&x| S::from_f64(x)).collect();
        Self::new(&[m, n], data)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&x| S::from_f64(x)).collect())
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::from_f64(z * std)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-d tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err!("expected a matrix, got shape {:?}", s)),
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let n = *self.shape.last().unwrap_or(&0);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn get2(&self, i: usize, j: usize) -> S {
        self.data[i * self.shape[1] + j]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn all_zero(&self) -> bool {
        self.data.iter().all(|x| *x == S::zero())
    }

    /// Appends a copy of column `src` to a matrix (or a copy of entry `src` to a vector).
    pub fn append_column_copy(&mut self, src: usize) -> Result<()> {
        match self.shape.clone().as_slice() {
            [n] => {
                if src >= *n {
                    return Err(shape_err!("column {} out of range {}", src, n));
                }
                self.data.push(self.data[src]);
                self.shape[0] += 1;
            }
            [m, n] => {
                if src >= *n {
                    return Err(shape_err!("column {} out of range {}", src, n));
                }
                let mut out = Vec::with_capacity(m * (n + 1));
                for row in self.data.chunks(*n) {
                    out.extend_from_slice(row);
                    out.push(row[src]);
                }
                self.data = out;
                self.shape[1] += 1;
            }
            s => return Err(shape_err!("cannot append a column to shape {:?}", s)),
        }
        Ok(())
    }

    /// Appends a column of `value` to a matrix, or an entry to a vector.
    pub fn append_column_fill(&mut self, value: S) -> Result<()> {
        match self.shape.clone().as_slice() {
            [_] => {
                self.data.push(value);
                self.shape[0] += 1;
            }
            [m, n] => {
                let mut out = Vec::with_capacity(m * (n + 1));
                for row in self.data.chunks(*n) {
                    out.extend_from_slice(row);
                    out.push(value);
                }
                self.data = out;
                self.shape[1] += 1;
            }
            s => return Err(shape_err!("cannot append a column to shape {:?}", s)),
        }
        Ok(())
    }
}

/// Plain (untaped) row-major matrix product, `a[m×k] · b[k×n]`.
///
/// Each output entry accumulates over `k` in ascending order regardless of `m`,
/// so a row's result does not depend on which other rows share the call.
pub fn matmul_raw<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}
