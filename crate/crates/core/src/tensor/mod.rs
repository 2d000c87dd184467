//! Minimal dense tensor engine: exactly the layers the matching network uses.

pub(crate) mod conv;
mod fc;
pub mod gradcheck;
mod optim;

pub use conv::{conv2d_backward, conv2d_forward, conv_output_size, ConvGrads, ConvLayer};
pub use fc::{FcGrads, FcLayer};
pub use gradcheck::{finite_diff_check, finite_diff_check_piecewise, GradCheckReport, Sampling};
pub use optim::{sgd_step, SgdState};

use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array of order at most 4.
///
/// Feature maps use index order `[channel, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, S::zero())
    }

    pub fn filled(dims: &[usize], value: S) -> Self {
        assert!(dims.len() <= 4, "tensor order is at most 4");
        let len = dims.iter().product();
        Self { dims: dims.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Result<Self> {
        if dims.len() > 4 {
            return config_err(format!("tensor order {} exceeds 4", dims.len()));
        }
        if dims.iter().any(|&d| d == 0) {
            return config_err(format!("tensor dims {dims:?} contain a zero extent"));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return config_err(format!(
                "tensor dims {dims:?} need {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self { dims: dims.to_vec(), data })
    }

    /// Zero-mean uniform values in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(dims);
        for v in &mut t.data {
            *v = S::of(rng.random_range(-bound..=bound));
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() || dims.len() > 4 {
            return config_err(format!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn fill(&mut self, value: S) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.dims, other.dims, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: S) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with `what` in the message if any value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} is {}",
                self.data[i]
            ))),
        }
    }

    /// Lossless-where-possible conversion between scalar types.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|v| T::of(v.as_f64())).collect() }
    }

    /// Stacks `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        if first.dims.len() != 3 {
            return config_err("concat_channels expects [C, H, W] tensors");
        }
        let (h, w) = (first.dims[1], first.dims[2]);
        let mut channels = 0;
        for p in parts {
            if p.dims.len() != 3 || p.dims[1] != h || p.dims[2] != w {
                return config_err(format!(
                    "concat_channels spatial mismatch: {:?} vs {:?}",
                    first.dims, p.dims
                ));
            }
            channels += p.dims[0];
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self { dims: vec![channels, h, w], data })
    }

    /// Splits a `[C, H, W]` tensor into channel groups of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if self.dims.len() != 3 || sizes.iter().sum::<usize>() != self.dims[0] {
            return config_err(format!("cannot split {:?} into {sizes:?}", self.dims));
        }
        let plane = self.dims[1] * self.dims[2];
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &c in sizes {
            let data = self.data[start * plane..(start + c) * plane].to_vec();
            out.push(Self { dims: vec![c, self.dims[1], self.dims[2]], data });
            start += c;
        }
        Ok(out)
    }
}

/// Elementwise `max(0, x)`.
pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// In-place ReLU.
pub fn relu_inplace<S: Scalar>(t: &mut Tensor<S>) {
    for v in t.data_mut() {
        if !(*v > S::zero()) {
            *v = S::zero();
        }
    }
}

/// Passes `grad` where the activation was strictly positive; the subgradient
/// at exactly zero is zero. `activation` may be either the ReLU input or its
/// output since both are positive on the same cells.
pub fn relu_backward<S: Scalar>(activation: &Tensor<S>, grad: &Tensor<S>) -> Tensor<S> {
    assert_eq!(activation.dims(), grad.dims(), "relu_backward shape mismatch");
    let data = activation
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&a, &g)| if a > S::zero() { g } else { S::zero() })
        .collect();
    Tensor { dims: grad.dims.clone(), data }
}

/// Named parameter collection the optimiser and gradient checker iterate over.
///
/// Both methods must yield tensors in the same fixed order.
pub trait ParamSet<S: Scalar> {
    fn tensors(&self) -> Vec<&Tensor<S>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>>;
}

impl<S: Scalar> ParamSet<S> for Vec<Tensor<S>> {
    fn tensors(&self) -> Vec<&Tensor<S>> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.iter_mut().collect()
    }
}
