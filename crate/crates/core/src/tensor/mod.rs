//! Dense tensors, a per-step autodiff tape, and plain SGD.

mod graph;
pub(crate) mod kernels;

pub use graph::{Gradients, Graph, Var};

use crate::error::{dim_err, Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Leading dimension, i.e. the batch size for batched tensors.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Stacks equally shaped tensors along the leading dimension.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return dim_err(format!(
                    "cannot stack {:?} onto {:?}",
                    p.shape, first.shape
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Ok(Self { shape, data })
    }

    /// Plain matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, &self.data, &other.data, &mut out);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Row-wise argmax of a 2-d tensor. Ties go to the lower index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|i| argmax(self.row(i))).collect()
    }

    /// Row-wise softmax of a 2-d tensor, max-shifted.
    pub fn softmax_rows(&self) -> Tensor {
        let w = self.row_len();
        let mut data = self.data.clone();
        for row in data.chunks_mut(w.max(1)) {
            kernels::softmax_in_place(row);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Order-sensitive 64-bit digest of shape and bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for &d in &self.shape {
            mix(d as u64);
        }
        for &x in &self.data {
            mix(x.to_bits());
        }
        h
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => dim_err(format!("matmul of {a:?} by {b:?}")),
    }
}

/// Index of the largest value; the lowest index wins ties. NaN never wins.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A tensor the optimizer may update, together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub learnable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self {
            value,
            grad: None,
            learnable: true,
        }
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return dim_err(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                self.value.shape()
            ));
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// `p <- p - lr * grad` for every learnable parameter, then clears gradients.
///
/// Frozen parameters are skipped and keep whatever gradient they hold.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) -> Result<()> {
    let params: Vec<&mut Parameter> = params.into_iter().filter(|p| p.learnable).collect();
    if params.iter().any(|p| p.grad.is_none()) {
        return Err(Error::State(
            "sgd step requested before gradients were computed".into(),
        ));
    }
    for p in params {
        let g = p.grad.take().expect("checked above");
        for (w, d) in p.value.data.iter_mut().zip(&g.data) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_dot() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(eye.matmul(&col).unwrap(), col);
        let row = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = Parameter::new(Tensor::scalar(1.0));
        p.accumulate(&Tensor::scalar(2.0)).unwrap();
        sgd_step([&mut p], 0.1).unwrap();
        assert!((p.value.item() - 0.8).abs() < 1e-15);
        assert!(p.grad.is_none());
    }

    #[test]
    fn sgd_zero_grad_leaves_params() {
        let mut p = Parameter::new(Tensor::full(&[3], 0.25));
        p.accumulate(&Tensor::zeros(&[3])).unwrap();
        sgd_step([&mut p], 0.5).unwrap();
        assert_eq!(p.value.data(), &[0.25; 3]);
    }

    #[test]
    fn sgd_two_steps_equal_one_double_step() {
        let mut a = Parameter::new(Tensor::scalar(0.3));
        let mut b = a.clone();
        for _ in 0..2 {
            a.accumulate(&Tensor::scalar(1.5)).unwrap();
            sgd_step([&mut a], 0.1).unwrap();
        }
        b.accumulate(&Tensor::scalar(3.0)).unwrap();
        sgd_step([&mut b], 0.1).unwrap();
        assert!((a.value.item() - b.value.item()).abs() < 1e-12);
    }

    #[test]
    fn sgd_without_grad_is_state_error() {
        let mut p = Parameter::new(Tensor::scalar(1.0));
        assert!(matches!(sgd_step([&mut p], 0.1), Err(Error::State(_))));
    }

    #[test]
    fn sgd_skips_frozen() {
        let mut p = Parameter::new(Tensor::scalar(1.0));
        p.learnable = false;
        sgd_step([&mut p], 0.1).unwrap();
        assert_eq!(p.value.item(), 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 700.0]]).unwrap();
        let s = t.softmax_rows();
        for i in 0..2 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
