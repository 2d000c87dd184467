use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{finite_diff_check_piecewise, Sampling};
use crate::tensor::{conv2d_forward, relu, ConvLayer, ParamSet, Tensor};

fn rand_input(cfg: &McnnConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(&[3, cfg.input_height, cfg.input_width], 1.0, rng)
}

fn tiny() -> McnnConfig {
    let mut c = McnnConfig::reduced();
    c.input_height = 16;
    c.input_width = 16;
    c
}

#[test]
fn identical_inputs_with_shared_single_paths_give_zero_difference() {
    let mut cfg = tiny();
    cfg.tie_single_paths = true;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = McnnParams::<f64>::init(&cfg, &mut rng).unwrap();
    let x = rand_input(&cfg, &mut rng);
    let (_, cache) = forward(&p, &x, &x).unwrap();
    let n = cfg.num_layers();
    let diff_len = cache.image_acts[n].len();
    assert!(cache.head_inputs[0][..diff_len].iter().all(|&v| v == 0.0));
}

#[test]
fn zero_head_weights_emit_head_bias() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = McnnParams::<f64>::init(&cfg, &mut rng).unwrap();
    let last = p.head.len() - 1;
    p.head[last].weights.fill(0.0);
    p.head[last].bias = Tensor::from_vec(&[5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    for _ in 0..3 {
        let (a, b) = (rand_input(&cfg, &mut rng), rand_input(&cfg, &mut rng));
        let (out, _) = forward(&p, &a, &b).unwrap();
        assert_eq!(out.to_array(), [0.1, 0.2, 0.3, 0.4, 0.5]);
    }
}

#[test]
fn forward_is_deterministic_and_finite() {
    let cfg = tiny();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = McnnParams::<f32>::init(&cfg, &mut rng).unwrap();
        let a = Tensor::<f32>::uniform(&[3, 16, 16], 1.0, &mut rng);
        let b = Tensor::<f32>::uniform(&[3, 16, 16], 1.0, &mut rng);
        forward(&p, &a, &b).unwrap().0
    };
    let (x, y) = (run(), run());
    assert_eq!(x, y);
    assert!(x.to_array().iter().all(|v| v.is_finite()));
}

#[test]
fn wrong_input_size_is_config_error() {
    let cfg = tiny();
    let p = McnnParams::<f32>::zeros(&cfg).unwrap();
    let bad = Tensor::<f32>::zeros(&[3, 8, 8]);
    let ok = Tensor::<f32>::zeros(&[3, 16, 16]);
    assert!(forward(&p, &bad, &ok).is_err());
    assert!(forward(&p, &ok, &bad).is_err());
}

#[test]
fn cross_map_hand_example() {
    // P = Q = 1, T = 0, 1x1 kernels of weight 1: 2 + 3 = 5.
    let mut f = ConvLayer::<f64>::zeros(1, 2, 1, 1, 0);
    f.weights.fill(1.0);
    let xi = Tensor::filled(&[1, 1, 1], 2.0);
    let xr = Tensor::filled(&[1, 1, 1], 3.0);
    let out = cross_feature_map(&xi, &xr, None, &f).unwrap();
    assert_eq!(out.data(), &[5.0]);
}

#[test]
fn cross_map_relu_clamps_negative_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut f = ConvLayer::<f64>::zeros(3, 6, 3, 2, 1);
    f.bias.fill(-1.0);
    let xi = Tensor::uniform(&[2, 7, 7], 1.0, &mut rng);
    let xr = Tensor::uniform(&[2, 7, 7], 1.0, &mut rng);
    let xc = Tensor::uniform(&[2, 7, 7], 1.0, &mut rng);
    let out = cross_feature_map(&xi, &xr, Some(&xc), &f).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn cross_map_rejects_channel_mismatch() {
    let f = ConvLayer::<f64>::zeros(2, 5, 3, 2, 1);
    let x = Tensor::zeros(&[2, 7, 7]);
    assert!(cross_feature_map(&x, &x, None, &f).is_err());
}

/// Three independent convolutions, summed, biased and rectified.
fn cross_oracle(
    xi: &Tensor<f64>,
    xr: &Tensor<f64>,
    xc: Option<&Tensor<f64>>,
    f: &ConvLayer<f64>,
    split: (usize, usize, usize),
) -> Tensor<f64> {
    let [fi, fr, fc] = cross_filter_components(f, split).unwrap();
    let mut sum = conv2d_forward(xi, &fi).unwrap();
    sum.add_assign(&conv2d_forward(xr, &fr).unwrap());
    if let Some(xc) = xc {
        sum.add_assign(&conv2d_forward(xc, &fc).unwrap());
    }
    let plane = sum.len() / f.out_maps();
    for (i, v) in sum.data_mut().iter_mut().enumerate() {
        *v += f.bias.data()[i / plane];
    }
    relu(&sum)
}

#[test]
fn cross_map_matches_compositional_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let p = rng.random_range(1..4);
        let t = rng.random_range(0..3);
        let m = rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let pad = rng.random_range(0..=k / 2);
        let h = rng.random_range(k.max(2)..10);
        let xi = Tensor::uniform(&[p, h, h], 1.0, &mut rng);
        let xr = Tensor::uniform(&[p, h, h], 1.0, &mut rng);
        let xc = (t > 0).then(|| Tensor::uniform(&[t, h, h], 1.0, &mut rng));
        let mut f = ConvLayer::init_uniform(m, 2 * p + t, k, 2, pad, &mut rng);
        f.bias = Tensor::uniform(&[m], 0.5, &mut rng);
        let got = cross_feature_map(&xi, &xr, xc.as_ref(), &f).unwrap();
        let want = cross_oracle(&xi, &xr, xc.as_ref(), &f, (p, p, t));
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn no_cross_variant_never_builds_cross_maps() {
    let cfg = tiny().with_cross(&[]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = McnnParams::<f64>::init(&cfg, &mut rng).unwrap();
    let (_, cache) = forward(&p, &rand_input(&cfg, &mut rng), &rand_input(&cfg, &mut rng)).unwrap();
    assert!(cache.cross_acts.is_empty());
    assert_eq!(cache.cross_acts.capacity(), 0);
}

#[test]
fn zero_loss_point_has_zero_gradients() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = McnnParams::<f64>::init(&cfg, &mut rng).unwrap();
    let (a, b) = (rand_input(&cfg, &mut rng), rand_input(&cfg, &mut rng));
    let (pred, _) = forward(&p, &a, &b).unwrap();
    let batch = [Sample { image: &a, region: &b, target: pred, displacement_valid: true }];
    let (j, g) = batch_gradients(&p, &batch).unwrap();
    assert_eq!(j, 0.0);
    assert!(g.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn single_fc_head_matches_least_squares_gradient() {
    let mut cfg = tiny();
    cfg.fc_dims.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = McnnParams::<f64>::init(&cfg, &mut rng).unwrap();
    let (a, b) = (rand_input(&cfg, &mut rng), rand_input(&cfg, &mut rng));
    let target = MatchOutput::new(1.0, [0.1, -0.2, 0.3, 0.0]);
    let (pred, cache) = forward(&p, &a, &b).unwrap();
    let x = &cache.head_inputs[0];
    let batch = [Sample { image: &a, region: &b, target, displacement_valid: true }];
    let (_, g) = batch_gradients(&p, &batch).unwrap();
    // dJ/dW = 2 (ŷ − y) xᵀ, dJ/db = 2 (ŷ − y)
    let r: Vec<f64> = pred.to_array().iter().zip(target.to_array()).map(|(a, b)| 2.0 * (a - b)).collect();
    let gw = g.head[0].weights.data();
    for (i, ri) in r.iter().enumerate() {
        assert!((g.head[0].bias.data()[i] - ri).abs() < 1e-12);
        for (jx, xj) in x.iter().enumerate() {
            assert!((gw[i * x.len() + jx] - ri * xj).abs() < 1e-12);
        }
    }
}

fn fd_check(cfg: &McnnConfig, seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = McnnParams::<f64>::init(cfg, &mut rng).unwrap();
    for t in p.tensors_mut() {
        if t.dims().len() == 1 {
            *t = Tensor::uniform(t.dims(), 0.1, &mut rng);
        }
    }
    let images: Vec<_> = (0..3).map(|_| rand_input(cfg, &mut rng)).collect();
    let regions: Vec<_> = (0..3).map(|_| rand_input(cfg, &mut rng)).collect();
    let targets: Vec<_> = (0..3)
        .map(|i| MatchOutput::new(i as f64 % 2.0, [0.1 * i as f64, -0.2, 0.05, 0.3]))
        .collect();
    let batch: Vec<Sample<f64>> = (0..3)
        .map(|i| Sample { image: &images[i], region: &regions[i], target: targets[i], displacement_valid: i != 1 })
        .collect();
    let (_, grads) = batch_gradients(&p, &batch).unwrap();
    let analytic: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();
    let report = finite_diff_check_piecewise(&mut p, &analytic, 1e-4, Sampling::Random { count, seed }, |q| {
        batch_loss_with_signature(q, &batch)
    })
        .unwrap();
    assert_eq!(report.checked, count);
    report.max_rel_error
}

#[test]
fn tiny_network_gradients_match_finite_differences() {
    let err = fd_check(&tiny(), 9, 150);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn all_variants_pass_gradient_check() {
    let base = tiny();
    let mut tied = base.clone();
    tied.tie_single_paths = true;
    let mut tied_siamese = base.siamese();
    tied_siamese.tie_single_paths = true;
    for cfg in [base.with_cross(&[]), base.with_cross(&[3]), base.with_cross(&[1, 2, 3]), base.siamese(), tied, tied_siamese]
    {
        let err = fd_check(&cfg, 10, 60);
        assert!(err < 1e-4, "{:?}: {err}", cfg.cross_enabled);
    }
}

#[test]
fn siamese_symmetry_and_distinct_from_mcnn() {
    let mut cfg = tiny().siamese();
    cfg.tie_single_paths = true;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = McnnParams::<f64>::init(&cfg, &mut rng).unwrap();
    let x = rand_input(&cfg, &mut rng);
    let (_, cache) = siamese_forward(&p, &x, &x).unwrap();
    assert!(cache.head_inputs[0].iter().all(|&v| v == 0.0));

    let mut zero_head = p.clone();
    let last = zero_head.head.len() - 1;
    zero_head.head[last].weights.fill(0.0);
    let (a, b) = (rand_input(&cfg, &mut rng), rand_input(&cfg, &mut rng));
    assert_eq!(
        siamese_forward(&zero_head, &a, &b).unwrap().0,
        siamese_forward(&zero_head, &b, &x).unwrap().0
    );

    let m = McnnParams::<f64>::init(&tiny(), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let s = McnnParams::<f64>::init(&tiny().siamese(), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    assert_ne!(forward(&m, &a, &b).unwrap().0, forward(&s, &a, &b).unwrap().0);
}
