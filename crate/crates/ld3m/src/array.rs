//! Dense row-major `f64` arrays: the value type flowing through the tape.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A dense array of 64-bit reals with an explicit shape.
///
/// Invariant: `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DiffArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape {
                op: "DiffArray::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(DiffArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        DiffArray {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        DiffArray {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        DiffArray {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 1-D vector.
    pub fn vector(data: Vec<f64>) -> Self {
        DiffArray {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        DiffArray::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single element of a scalar array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// Number of rows when interpreted as a matrix ([n] counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns when interpreted as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.len(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DiffArray {
        DiffArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Maximum absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &DiffArray) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn same_shape(&self, other: &DiffArray) -> bool {
        self.shape == other.shape
    }
}

/// `a @ b` for 2-D row-major matrices.
pub fn matmul(a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    DiffArray::new(vec![m, n], out)
}

/// Transpose a 2-D matrix.
pub fn transpose(a: &DiffArray) -> DiffArray {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    DiffArray::new(vec![n, m], out).expect("transpose shape")
}
