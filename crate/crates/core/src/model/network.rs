//! Forward and backward passes of the matching network and the Siamese baseline.

use rayon::prelude::*;

use super::config::{Architecture, OUTPUT_DIM};
use super::loss::{loss_gradient, MatchOutput};
use super::params::McnnParams;
use crate::error::{config_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::conv2d_backward_opt;
use crate::tensor::{conv2d_forward, relu_backward, relu_inplace, ConvLayer, Tensor};

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    /// `image_acts[0]` is the input; `image_acts[j + 1]` the ReLU output of layer `j`.
    pub image_acts: Vec<Tensor<S>>,
    pub region_acts: Vec<Tensor<S>>,
    /// Outputs of the cross layers, aligned with `McnnParams::cross_path`.
    pub cross_acts: Vec<Tensor<S>>,
    /// Siamese embeddings `(image, region)`.
    pub embeddings: Option<(Vec<S>, Vec<S>)>,
    /// Input of every head layer; `head_inputs[0]` is the fused vector.
    pub head_inputs: Vec<Vec<S>>,
    pub output: Vec<S>,
}

/// Cross feature map: `max(0, b + Σ f^I * x^I + Σ f^R * x^R + Σ f^C * x^C)`.
///
/// `filters` holds the three components stacked along its input-channel
/// axis in the order image, region, cross.
pub fn cross_feature_map<S: Scalar>(
    prev_image: &Tensor<S>,
    prev_region: &Tensor<S>,
    prev_cross: Option<&Tensor<S>>,
    filters: &ConvLayer<S>,
) -> Result<Tensor<S>> {
    let mut parts = vec![prev_image, prev_region];
    parts.extend(prev_cross);
    let stacked = Tensor::concat_channels(&parts)?;
    if stacked.dims()[0] != filters.in_maps() {
        return config_err(format!(
            "cross filters expect {} input maps, got {} (P={}, Q={}, T={})",
            filters.in_maps(),
            stacked.dims()[0],
            prev_image.dims()[0],
            prev_region.dims()[0],
            prev_cross.map_or(0, |t| t.dims()[0])
        ));
    }
    let mut out = conv2d_forward(&stacked, filters)?;
    relu_inplace(&mut out);
    Ok(out)
}

/// Splits stacked cross filters into their `(f^I, f^R, f^C)` components, each
/// with a zero bias.
pub fn cross_filter_components<S: Scalar>(
    filters: &ConvLayer<S>,
    split: (usize, usize, usize),
) -> Result<[ConvLayer<S>; 3]> {
    let (p, q, t) = split;
    if p + q + t != filters.in_maps() {
        return config_err("cross split does not match filter input maps");
    }
    let (m, k) = (filters.out_maps(), filters.kernel());
    let kk = k * k;
    let take = |start: usize, count: usize| -> ConvLayer<S> {
        let mut layer = ConvLayer::zeros(m, count.max(1), k, filters.stride, filters.padding);
        if count > 0 {
            let w = filters.weights.data();
            let dst = layer.weights.data_mut();
            for mo in 0..m {
                let src = &w[(mo * filters.in_maps() + start) * kk..(mo * filters.in_maps() + start + count) * kk];
                dst[mo * count * kk..(mo + 1) * count * kk].copy_from_slice(src);
            }
        }
        layer
    };
    Ok([take(0, p), take(p, q), take(p + q, t)])
}

fn conv_relu<S: Scalar>(x: &Tensor<S>, layer: &ConvLayer<S>) -> Result<Tensor<S>> {
    let mut y = conv2d_forward(x, layer)?;
    relu_inplace(&mut y);
    Ok(y)
}

fn check_input<S: Scalar>(params: &McnnParams<S>, t: &Tensor<S>, what: &str) -> Result<()> {
    let c = &params.config;
    let want = [3, c.input_height, c.input_width];
    if t.dims() != want {
        return config_err(format!("{what} has dims {:?}, network expects {want:?}", t.dims()));
    }
    Ok(())
}

fn run_head<S: Scalar>(params: &McnnParams<S>, fused: Vec<S>) -> Result<(Vec<Vec<S>>, Vec<S>)> {
    let mut inputs = vec![fused];
    let last = params.head.len() - 1;
    for (i, fc) in params.head.iter().enumerate() {
        let mut y = fc.forward(inputs.last().expect("non-empty"))?;
        if i == last {
            return Ok((inputs, y));
        }
        y.iter_mut().for_each(|v| {
            if !(*v > S::zero()) {
                *v = S::zero()
            }
        });
        inputs.push(y);
    }
    unreachable!("head has at least one layer")
}

/// Runs the configured architecture on one `(image, region)` pair.
///
/// Outputs live in normalized target space; there is no final nonlinearity.
pub fn forward<S: Scalar>(
    params: &McnnParams<S>,
    image: &Tensor<S>,
    region: &Tensor<S>,
) -> Result<(MatchOutput<S>, ForwardCache<S>)> {
    match params.config.architecture {
        Architecture::Mcnn => mcnn_forward(params, image, region),
        Architecture::Siamese => siamese_forward(params, image, region),
    }
}

fn mcnn_forward<S: Scalar>(
    params: &McnnParams<S>,
    image: &Tensor<S>,
    region: &Tensor<S>,
) -> Result<(MatchOutput<S>, ForwardCache<S>)> {
    check_input(params, image, "image")?;
    check_input(params, region, "region")?;
    let cfg = &params.config;
    let n = cfg.num_layers();
    let mut image_acts = vec![image.clone()];
    let mut region_acts = vec![region.clone()];
    let mut cross_acts: Vec<Tensor<S>> = Vec::new();
    for j in 0..n {
        if cfg.has_cross(j) {
            let prev_cross = if j > 0 && cfg.has_cross(j - 1) { cross_acts.last() } else { None };
            let out = cross_feature_map(&image_acts[j], &region_acts[j], prev_cross, &params.cross_path[cross_acts.len()])?;
            cross_acts.push(out);
        }
        let xi = conv_relu(&image_acts[j], &params.image_path[j])?;
        let xr = conv_relu(&region_acts[j], &params.region_layers()[j])?;
        image_acts.push(xi);
        region_acts.push(xr);
    }
    let mut fused: Vec<S> = image_acts[n]
        .data()
        .iter()
        .zip(region_acts[n].data())
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    if cfg.has_cross(n - 1) {
        fused.extend_from_slice(cross_acts.last().expect("last layer has cross maps").data());
    }
    let (head_inputs, output) = run_head(params, fused)?;
    let pred = MatchOutput::from_slice(&output);
    Ok((pred, ForwardCache { image_acts, region_acts, cross_acts, embeddings: None, head_inputs, output }))
}

/// Siamese baseline: single paths, fc embeddings, absolute embedding
/// difference, fc head. No cross path and no feature-map difference.
pub fn siamese_forward<S: Scalar>(
    params: &McnnParams<S>,
    image: &Tensor<S>,
    region: &Tensor<S>,
) -> Result<(MatchOutput<S>, ForwardCache<S>)> {
    check_input(params, image, "image")?;
    check_input(params, region, "region")?;
    let (embed_i, embed_r) = match (params.image_embed.as_ref(), params.region_embed_layer()) {
        (Some(a), Some(b)) => (a, b),
        _ => return config_err("siamese forward needs embedding layers"),
    };
    let n = params.config.num_layers();
    let mut image_acts = vec![image.clone()];
    let mut region_acts = vec![region.clone()];
    for j in 0..n {
        image_acts.push(conv_relu(&image_acts[j], &params.image_path[j])?);
        region_acts.push(conv_relu(&region_acts[j], &params.region_layers()[j])?);
    }
    let ei = embed_i.forward(image_acts[n].data())?;
    let er = embed_r.forward(region_acts[n].data())?;
    let fused = ei.iter().zip(&er).map(|(&a, &b)| (a - b).abs()).collect();
    let (head_inputs, output) = run_head(params, fused)?;
    let pred = MatchOutput::from_slice(&output);
    Ok((
        pred,
        ForwardCache { image_acts, region_acts, cross_acts: Vec::new(), embeddings: Some((ei, er)), head_inputs, output },
    ))
}

/// Derivative of `|a − b|` with respect to `a`; zero at `a == b`.
#[inline]
fn abs_diff_sign<S: Scalar>(a: S, b: S) -> S {
    if a > b {
        S::one()
    } else if a < b {
        -S::one()
    } else {
        S::zero()
    }
}

/// Backpropagates `grad_output` (∂J/∂prediction) through the cached pass.
pub fn backward<S: Scalar>(params: &McnnParams<S>, cache: &ForwardCache<S>, grad_output: &[S]) -> Result<McnnParams<S>> {
    if grad_output.len() != OUTPUT_DIM {
        return config_err(format!("grad_output has {} entries, expected {OUTPUT_DIM}", grad_output.len()));
    }
    let cfg = &params.config;
    let mut grads = McnnParams::<S>::zeros(cfg)?;
    let tied = cfg.tie_single_paths;

    // Head.
    let mut g = grad_output.to_vec();
    for i in (0..params.head.len()).rev() {
        let fc = &params.head[i];
        let fg = fc.backward(&cache.head_inputs[i], &g)?;
        grads.head[i].weights.add_assign(&fg.weights);
        grads.head[i].bias.add_assign(&fg.bias);
        g = fg.input;
        if i > 0 {
            // head_inputs[i] is the ReLU output of layer i−1.
            for (gv, &a) in g.iter_mut().zip(&cache.head_inputs[i]) {
                if !(a > S::zero()) {
                    *gv = S::zero();
                }
            }
        }
    }

    let n = cfg.num_layers();
    let final_len = cache.image_acts[n].len();
    let (xi_n, xr_n) = (cache.image_acts[n].data(), cache.region_acts[n].data());

    let (mut g_image, mut g_region, mut g_cross): (Vec<S>, Vec<S>, Option<Tensor<S>>) = match cfg.architecture {
        Architecture::Mcnn => {
            let gd = &g[..final_len];
            let gi: Vec<S> = gd.iter().zip(xi_n.iter().zip(xr_n)).map(|(&gv, (&a, &b))| gv * abs_diff_sign(a, b)).collect();
            let gr = gi.iter().map(|&v| -v).collect();
            let gc = if cfg.has_cross(n - 1) {
                let last = cache.cross_acts.last().expect("cross output cached");
                Some(Tensor::from_vec(last.dims(), g[final_len..].to_vec())?)
            } else {
                None
            };
            (gi, gr, gc)
        }
        Architecture::Siamese => {
            let (ei, er) = cache.embeddings.as_ref().expect("siamese cache has embeddings");
            let ge_i: Vec<S> = g.iter().zip(ei.iter().zip(er)).map(|(&gv, (&a, &b))| gv * abs_diff_sign(a, b)).collect();
            let ge_r: Vec<S> = ge_i.iter().map(|&v| -v).collect();
            let embed_i = params.image_embed.as_ref().expect("siamese");
            let embed_r = params.region_embed_layer().expect("siamese");
            let fi = embed_i.backward(xi_n, &ge_i)?;
            let fr = embed_r.backward(xr_n, &ge_r)?;
            let gi_embed = grads.image_embed.as_mut().expect("siamese");
            gi_embed.weights.add_assign(&fi.weights);
            gi_embed.bias.add_assign(&fi.bias);
            let gr_embed = if tied { grads.image_embed.as_mut() } else { grads.region_embed.as_mut() }.expect("siamese");
            gr_embed.weights.add_assign(&fr.weights);
            gr_embed.bias.add_assign(&fr.bias);
            (fi.input, fr.input, None)
        }
    };

    let mut cross_idx = cache.cross_acts.len();
    for j in (0..n).rev() {
        let need_input = j > 0;
        let gi_t = relu_backward(&cache.image_acts[j + 1], &Tensor::from_vec(cache.image_acts[j + 1].dims(), g_image)?);
        let ci = conv2d_backward_opt(&cache.image_acts[j], &params.image_path[j], &gi_t, need_input)?;
        grads.image_path[j].weights.add_assign(&ci.weights);
        grads.image_path[j].bias.add_assign(&ci.bias);

        let gr_t = relu_backward(&cache.region_acts[j + 1], &Tensor::from_vec(cache.region_acts[j + 1].dims(), g_region)?);
        let cr = conv2d_backward_opt(&cache.region_acts[j], &params.region_layers()[j], &gr_t, need_input)?;
        let target = if tied { &mut grads.image_path[j] } else { &mut grads.region_path[j] };
        target.weights.add_assign(&cr.weights);
        target.bias.add_assign(&cr.bias);

        let mut prev_image = ci.input.map(Tensor::into_data);
        let mut prev_region = cr.input.map(Tensor::into_data);
        let mut prev_cross = None;

        if cfg.has_cross(j) {
            cross_idx -= 1;
            let out = &cache.cross_acts[cross_idx];
            let gc = g_cross.take().expect("cross gradient flows from the layer above");
            let gc = relu_backward(out, &gc);
            let has_prev_cross = j > 0 && cfg.has_cross(j - 1);
            let mut parts = vec![&cache.image_acts[j], &cache.region_acts[j]];
            if has_prev_cross {
                parts.push(&cache.cross_acts[cross_idx - 1]);
            }
            let stacked = Tensor::concat_channels(&parts)?;
            let cc = conv2d_backward_opt(&stacked, &params.cross_path[cross_idx], &gc, need_input)?;
            grads.cross_path[cross_idx].weights.add_assign(&cc.weights);
            grads.cross_path[cross_idx].bias.add_assign(&cc.bias);
            if let Some(gin) = cc.input {
                let (p, q, t) = cfg.cross_in_split(j);
                let mut sizes = vec![p, q];
                if t > 0 {
                    sizes.push(t);
                }
                let split = gin.split_channels(&sizes)?;
                for (acc, part) in [&mut prev_image, &mut prev_region].into_iter().zip(&split) {
                    let acc = acc.as_mut().expect("input gradients requested");
                    for (a, &b) in acc.iter_mut().zip(part.data()) {
                        *a += b;
                    }
                }
                if t > 0 {
                    prev_cross = Some(split[2].clone());
                }
            }
        }
        if j == 0 {
            break;
        }
        g_image = prev_image.expect("input gradient");
        g_region = prev_region.expect("input gradient");
        g_cross = prev_cross;
    }
    Ok(grads)
}

/// One training example in network-input form.
#[derive(Clone, Debug)]
pub struct Sample<'a, S> {
    pub image: &'a Tensor<S>,
    pub region: &'a Tensor<S>,
    pub target: MatchOutput<S>,
    pub displacement_valid: bool,
}

/// Mean loss over the batch and its gradient.
///
/// Per-sample gradients may be computed in parallel; they are summed in
/// sample order so the result does not depend on the thread count.
pub fn batch_gradients<S: Scalar>(params: &McnnParams<S>, batch: &[Sample<'_, S>]) -> Result<(S, McnnParams<S>)> {
    if batch.is_empty() {
        return config_err("empty batch");
    }
    let n = batch.len();
    let per_sample: Vec<Result<(S, McnnParams<S>)>> = batch
        .par_iter()
        .map(|s| {
            let (pred, cache) = forward(params, s.image, s.region)?;
            let (loss, grad) = loss_gradient(&pred, &s.target, s.displacement_valid, n);
            Ok((loss, backward(params, &cache, &grad)?))
        })
        .collect();
    let mut total = S::zero();
    let mut acc: Option<McnnParams<S>> = None;
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => a.accumulate(&g),
        }
    }
    let grads = acc.expect("non-empty batch");
    for (name, t) in grads.named_tensors() {
        if !t.is_finite() {
            return Err(Error::Training(format!("non-finite gradient in {name}")));
        }
    }
    Ok((total, grads))
}

/// Mean loss of a batch without gradients.
pub fn batch_loss<S: Scalar>(params: &McnnParams<S>, batch: &[Sample<'_, S>]) -> Result<S> {
    let n = batch.len();
    let losses: Vec<Result<S>> = batch
        .par_iter()
        .map(|s| {
            let (pred, _) = forward(params, s.image, s.region)?;
            Ok(loss_gradient(&pred, &s.target, s.displacement_valid, n).0)
        })
        .collect();
    let mut total = S::zero();
    for l in losses {
        total += l?;
    }
    Ok(total)
}

/// Hash of the active piece of every kink in a cached pass: each ReLU's
/// on/off state and each absolute difference's sign.
pub fn piece_signature<S: Scalar>(cache: &ForwardCache<S>) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::hash::DefaultHasher::new();
    let acts = cache.image_acts[1..].iter().chain(&cache.region_acts[1..]).chain(&cache.cross_acts);
    for t in acts {
        for &v in t.data() {
            (v > S::zero()).hash(&mut h);
        }
    }
    for layer in &cache.head_inputs[1..] {
        for &v in layer {
            (v > S::zero()).hash(&mut h);
        }
    }
    let (a, b): (&[S], &[S]) = match &cache.embeddings {
        Some((ei, er)) => (ei, er),
        None => {
            let n = cache.image_acts.len() - 1;
            (cache.image_acts[n].data(), cache.region_acts[n].data())
        }
    };
    for (&x, &y) in a.iter().zip(b) {
        x.partial_cmp(&y).hash(&mut h);
    }
    h.finish()
}

/// [`batch_loss`] together with the combined [`piece_signature`] of the batch.
pub fn batch_loss_with_signature<S: Scalar>(params: &McnnParams<S>, batch: &[Sample<'_, S>]) -> Result<(S, u64)> {
    use std::hash::{Hash, Hasher};
    let n = batch.len();
    let mut total = S::zero();
    let mut h = std::hash::DefaultHasher::new();
    for s in batch {
        let (pred, cache) = forward(params, s.image, s.region)?;
        total += loss_gradient(&pred, &s.target, s.displacement_valid, n).0;
        piece_signature(&cache).hash(&mut h);
    }
    Ok((total, h.finish()))
}
