use rand::Rng;

use super::config::{Architecture, McnnConfig};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{ConvLayer, FcLayer, ParamSet, Tensor};

/// All learnable tensors of one network.
///
/// When `config.tie_single_paths` is set, `region_path` and `region_embed`
/// are empty and the region input flows through the image-path layers.
#[derive(Clone, Debug, PartialEq)]
pub struct McnnParams<S> {
    pub config: McnnConfig,
    pub image_path: Vec<ConvLayer<S>>,
    pub region_path: Vec<ConvLayer<S>>,
    /// One layer per cross-enabled conv layer, in layer order. Input channels
    /// are the stacked `[x^I; x^R; x^C]` maps of the previous layer.
    pub cross_path: Vec<ConvLayer<S>>,
    pub image_embed: Option<FcLayer<S>>,
    pub region_embed: Option<FcLayer<S>>,
    pub head: Vec<FcLayer<S>>,
}

impl<S: Scalar> McnnParams<S> {
    /// Zero-valued parameters with every shape implied by `config`.
    pub fn zeros(config: &McnnConfig) -> Result<Self> {
        Self::build(config, &mut |out, inp, k, s, p| ConvLayer::zeros(out, inp, k, s, p), &mut |o, i| {
            FcLayer::zeros(o, i)
        })
    }

    /// Weights uniform in `±sqrt(6/fan_in)` (variance-preserving under ReLU),
    /// zero biases.
    pub fn init<R: Rng + ?Sized>(config: &McnnConfig, rng: &mut R) -> Result<Self> {
        // Both closures need the generator, so route them through one cell.
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            config,
            &mut |out, inp, k, s, p| ConvLayer::init_uniform(out, inp, k, s, p, &mut **rng.borrow_mut()),
            &mut |o, i| FcLayer::init_uniform(o, i, &mut **rng.borrow_mut()),
        )
    }

    fn build(
        config: &McnnConfig,
        conv: &mut dyn FnMut(usize, usize, usize, usize, usize) -> ConvLayer<S>,
        fc: &mut dyn FnMut(usize, usize) -> FcLayer<S>,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.num_layers();
        let single = |conv: &mut dyn FnMut(usize, usize, usize, usize, usize) -> ConvLayer<S>| -> Vec<ConvLayer<S>> {
            (0..n)
                .map(|j| {
                    let l = &config.layers[j];
                    conv(config.single_maps(j), config.single_in_maps(j), l.kernel, l.stride, l.padding)
                })
                .collect()
        };
        let image_path = single(conv);
        let region_path = if config.tie_single_paths { Vec::new() } else { single(conv) };
        let cross_path = (0..n)
            .filter(|&j| config.has_cross(j))
            .map(|j| {
                let l = &config.layers[j];
                let (p, q, t) = config.cross_in_split(j);
                conv(config.cross_maps(j), p + q + t, l.kernel, l.stride, l.padding)
            })
            .collect();
        let (image_embed, region_embed) = match config.architecture {
            Architecture::Mcnn => (None, None),
            Architecture::Siamese => {
                let flat = config.final_single_len()?;
                let e = fc(config.embed_dim, flat);
                let r = (!config.tie_single_paths).then(|| fc(config.embed_dim, flat));
                (Some(e), r)
            }
        };
        let mut head = Vec::new();
        let mut width = config.fused_dim()?;
        for &d in config.fc_dims.iter().chain(std::iter::once(&config.output_dim)) {
            head.push(fc(d, width));
            width = d;
        }
        Ok(Self { config: config.clone(), image_path, region_path, cross_path, image_embed, region_embed, head })
    }

    /// Layers applied to the region input.
    pub fn region_layers(&self) -> &[ConvLayer<S>] {
        if self.config.tie_single_paths {
            &self.image_path
        } else {
            &self.region_path
        }
    }

    pub fn region_embed_layer(&self) -> Option<&FcLayer<S>> {
        if self.config.tie_single_paths {
            self.image_embed.as_ref()
        } else {
            self.region_embed.as_ref()
        }
    }

    /// Stable names paired with tensors, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        fn conv<'a, S>(out: &mut Vec<(String, &'a Tensor<S>)>, prefix: &str, layers: &'a [ConvLayer<S>], ids: &[usize]) {
            for (l, &j) in layers.iter().zip(ids) {
                out.push((format!("{prefix}.conv{j}.weight"), &l.weights));
                out.push((format!("{prefix}.conv{j}.bias"), &l.bias));
            }
        }
        let mut out = Vec::new();
        let all: Vec<usize> = (1..=self.image_path.len()).collect();
        conv(&mut out, "image", &self.image_path, &all);
        conv(&mut out, "region", &self.region_path, &all);
        conv(&mut out, "cross", &self.cross_path, &self.config.cross_enabled);
        for (name, fc) in [("image", &self.image_embed), ("region", &self.region_embed)] {
            if let Some(fc) = fc {
                out.push((format!("{name}.embed.weight"), &fc.weights));
                out.push((format!("{name}.embed.bias"), &fc.bias));
            }
        }
        for (i, fc) in self.head.iter().enumerate() {
            out.push((format!("head.fc{}.weight", i + 1), &fc.weights));
            out.push((format!("head.fc{}.bias", i + 1), &fc.bias));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other` over all tensors.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> McnnParams<T> {
        let conv = |l: &ConvLayer<S>| ConvLayer {
            weights: l.weights.cast(),
            bias: l.bias.cast(),
            stride: l.stride,
            padding: l.padding,
        };
        let fc = |l: &FcLayer<S>| FcLayer { weights: l.weights.cast(), bias: l.bias.cast() };
        McnnParams {
            config: self.config.clone(),
            image_path: self.image_path.iter().map(conv).collect(),
            region_path: self.region_path.iter().map(conv).collect(),
            cross_path: self.cross_path.iter().map(conv).collect(),
            image_embed: self.image_embed.as_ref().map(fc),
            region_embed: self.region_embed.as_ref().map(fc),
            head: self.head.iter().map(fc).collect(),
        }
    }
}

impl<S: Scalar> ParamSet<S> for McnnParams<S> {
    fn tensors(&self) -> Vec<&Tensor<S>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for l in self.image_path.iter_mut().chain(&mut self.region_path).chain(&mut self.cross_path) {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        for fc in self.image_embed.iter_mut().chain(self.region_embed.iter_mut()).chain(&mut self.head) {
            out.push(&mut fc.weights);
            out.push(&mut fc.bias);
        }
        out
    }
}
