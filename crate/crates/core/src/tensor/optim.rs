use super::Tensor;
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;

/// Momentum SGD with L2 weight decay.
///
/// Update rule per parameter `p` with velocity `v`:
/// `v ← momentum·v + grad + weight_decay·p`, then `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdState<S> {
    pub momentum_buffers: Vec<Tensor<S>>,
    pub momentum: S,
    pub weight_decay: S,
    pub learning_rate: S,
}

impl<S: Scalar> SgdState<S> {
    /// Zeroed velocity buffers mirroring `params`.
    pub fn new(params: &[&Tensor<S>], momentum: S, weight_decay: S, learning_rate: S) -> Self {
        Self {
            momentum_buffers: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            momentum,
            weight_decay,
            learning_rate,
        }
    }
}

pub fn sgd_step<S: Scalar>(params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>], state: &mut SgdState<S>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.momentum_buffers.len() {
        return config_err(format!(
            "sgd_step: {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            state.momentum_buffers.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || p.dims() != state.momentum_buffers[i].dims() {
            return config_err(format!("sgd_step: shape mismatch at parameter {i}"));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at parameter tensor {i}, element {j}: {}",
                g.data()[j]
            )));
        }
    }
    let (mu, wd, lr) = (state.momentum, state.weight_decay, state.learning_rate);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.momentum_buffers) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
