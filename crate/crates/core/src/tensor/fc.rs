use rand::Rng;

use super::Tensor;
use crate::error::{config_err, Result};
use crate::scalar::Scalar;

/// Fully connected layer `y = W·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer<S> {
    /// `[out_dim, in_dim]`
    pub weights: Tensor<S>,
    /// `[out_dim]`
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct FcGrads<S> {
    pub input: Vec<S>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> FcLayer<S> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self { weights: Tensor::zeros(&[out_dim, in_dim]), bias: Tensor::zeros(&[out_dim]) }
    }

    pub fn init_uniform<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        Self { weights: Tensor::uniform(&[out_dim, in_dim], bound, rng), bias: Tensor::zeros(&[out_dim]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn forward(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.in_dim() {
            return config_err(format!("fc input has {} values, layer expects {}", x.len(), self.in_dim()));
        }
        let mut y = self.bias.data().to_vec();
        let (m, k) = (self.out_dim(), self.in_dim());
        S::gemm(m, k, 1, S::one(), self.weights.data(), k as isize, 1, x, 1, 1, S::one(), &mut y, 1, 1);
        Ok(y)
    }

    pub fn backward(&self, x: &[S], grad_out: &[S]) -> Result<FcGrads<S>> {
        let (m, k) = (self.out_dim(), self.in_dim());
        if x.len() != k || grad_out.len() != m {
            return config_err("fc backward shape mismatch");
        }
        let mut gw = vec![S::zero(); m * k];
        for (row, &g) in gw.chunks_mut(k).zip(grad_out) {
            for (w, &xi) in row.iter_mut().zip(x) {
                *w = g * xi;
            }
        }
        let mut gx = vec![S::zero(); k];
        S::gemm(k, m, 1, S::one(), self.weights.data(), 1, k as isize, grad_out, 1, 1, S::zero(), &mut gx, 1, 1);
        Ok(FcGrads {
            input: gx,
            weights: Tensor::from_vec(&[m, k], gw)?,
            bias: Tensor::from_vec(&[m], grad_out.to_vec())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_emit_bias() {
        let mut fc = FcLayer::<f64>::zeros(2, 3);
        fc.bias = Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        assert_eq!(fc.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.5, -2.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut fc = FcLayer::<f64>::init_uniform(4, 6, &mut rng);
        fc.bias = Tensor::uniform(&[4], 1.0, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let go: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obj = |fc: &FcLayer<f64>, x: &[f64]| -> f64 {
            fc.forward(x).unwrap().iter().zip(&go).map(|(a, b)| a * b).sum()
        };
        let g = fc.backward(&x, &go).unwrap();
        let eps = 1e-4;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += eps;
            xm[i] -= eps;
            let num = (obj(&fc, &xp) - obj(&fc, &xm)) / (2.0 * eps);
            assert!((num - g.input[i]).abs() / num.abs().max(1e-12) < 1e-6);
        }
        for i in 0..fc.weights.len() {
            let (mut p, mut m) = (fc.clone(), fc.clone());
            p.weights.data_mut()[i] += eps;
            m.weights.data_mut()[i] -= eps;
            let num = (obj(&p, &x) - obj(&m, &x)) / (2.0 * eps);
            assert!((num - g.weights.data()[i]).abs() / num.abs().max(1e-12) < 1e-6);
        }
        assert_eq!(g.bias.data(), go.as_slice());
    }

    #[test]
    fn wrong_input_length_is_error() {
        let fc = FcLayer::<f32>::zeros(2, 3);
        assert!(fc.forward(&[1.0, 2.0]).is_err());
    }
}
