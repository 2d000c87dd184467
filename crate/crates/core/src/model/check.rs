use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{batch_gradients, batch_loss_with_signature, McnnConfig, McnnParams, MatchOutput, Sample};
use crate::error::Result;
use crate::tensor::{finite_diff_check_piecewise, GradCheckReport, ParamSet, Sampling, Tensor};

/// Compares backpropagated gradients of the batch loss with central finite
/// differences at 64-bit precision.
///
/// Builds seeded random parameters (biases drawn too, so no unit starts at
/// an exact kink), a batch of `batch_size` random image/region pairs with
/// alternating positive and negative targets, and probes `count` random
/// parameters with step `eps`.
pub fn check_gradients(config: &McnnConfig, batch_size: usize, count: usize, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = McnnParams::<f64>::init(config, &mut rng)?;
    for t in p.tensors_mut() {
        if t.dims().len() == 1 {
            *t = Tensor::uniform(t.dims(), 0.1, &mut rng);
        }
    }
    let dims = [3, config.input_height, config.input_width];
    let images: Vec<Tensor<f64>> = (0..batch_size).map(|_| Tensor::uniform(&dims, 1.0, &mut rng)).collect();
    let regions: Vec<Tensor<f64>> = (0..batch_size).map(|_| Tensor::uniform(&dims, 1.0, &mut rng)).collect();
    let batch: Vec<Sample<f64>> = (0..batch_size)
        .map(|i| Sample {
            image: &images[i],
            region: &regions[i],
            target: MatchOutput::new((i % 2) as f64, [0.1 * i as f64, -0.2, 0.05, 0.3]),
            displacement_valid: i % 2 == 0,
        })
        .collect();
    let (_, grads) = batch_gradients(&p, &batch)?;
    let analytic: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();
    finite_diff_check_piecewise(&mut p, &analytic, eps, Sampling::Random { count, seed }, |q| {
        batch_loss_with_signature(q, &batch)
    })
}
