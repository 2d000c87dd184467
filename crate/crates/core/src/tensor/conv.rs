use rand::Rng;

use super::Tensor;
use crate::error::{config_err, Result};
use crate::scalar::Scalar;

/// 2-D convolution layer with square kernels.
///
/// Uses the cross-correlation convention: the kernel is not flipped, so
/// `out[m, y, x] = b[m] + Σ_c Σ_{i,j} w[m, c, i, j] · in[c, y·s + i − p, x·s + j − p]`
/// with zero padding outside the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S> {
    /// `[out_maps, in_maps, k, k]`
    pub weights: Tensor<S>,
    /// `[out_maps]`
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients returned by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> ConvLayer<S> {
    pub fn zeros(out_maps: usize, in_maps: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(out_maps > 0 && in_maps > 0 && kernel > 0 && stride > 0);
        Self {
            weights: Tensor::zeros(&[out_maps, in_maps, kernel, kernel]),
            bias: Tensor::zeros(&[out_maps]),
            stride,
            padding,
        }
    }

    /// Weights uniform in `±sqrt(6/fan_in)`, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(
        out_maps: usize,
        in_maps: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(out_maps, in_maps, kernel, stride, padding);
        let bound = (6.0 / (in_maps * kernel * kernel) as f64).sqrt();
        layer.weights = Tensor::uniform(layer.weights.dims(), bound, rng);
        layer
    }

    pub fn out_maps(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_maps(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.dims()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.dims();
        if d.len() != 4 || d[2] != d[3] {
            return config_err(format!("conv weights must be [out, in, k, k], got {d:?}"));
        }
        if self.bias.dims() != [d[0]] {
            return config_err(format!(
                "conv bias {:?} does not match {} output maps",
                self.bias.dims(),
                d[0]
            ));
        }
        if self.stride == 0 {
            return config_err("conv stride must be positive");
        }
        Ok(())
    }
}

/// Output extent `floor((n + 2p − k)/s) + 1`, or an error when the padded
/// input is smaller than the kernel.
pub fn conv_output_size(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return config_err("kernel and stride must be positive");
    }
    if n + 2 * padding < kernel {
        return config_err(format!(
            "input extent {n} with padding {padding} is smaller than kernel {kernel}"
        ));
    }
    Ok((n + 2 * padding - kernel) / stride + 1)
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new<S: Scalar>(input: &Tensor<S>, layer: &ConvLayer<S>) -> Result<Self> {
        layer.validate()?;
        let d = input.dims();
        if d.len() != 3 {
            return config_err(format!("conv input must be [C, H, W], got {d:?}"));
        }
        if d[0] != layer.in_maps() {
            return config_err(format!(
                "conv input has {} channels, layer expects {}",
                d[0],
                layer.in_maps()
            ));
        }
        let k = layer.kernel();
        Ok(Self {
            channels: d[0],
            height: d[1],
            width: d[2],
            kernel: k,
            stride: layer.stride,
            padding: layer.padding,
            out_h: conv_output_size(d[1], k, layer.stride, layer.padding)?,
            out_w: conv_output_size(d[2], k, layer.stride, layer.padding)?,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source index of cell (`oy`, `ox`) for kernel offset (`ki`, `kj`), if in bounds.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ki).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kj).checked_sub(self.padding)?;
        (iy < self.height && ix < self.width).then_some((iy, ix))
    }
}

/// Unrolls input patches into a `[C·k·k, H'·W']` row-major matrix.
fn im2col<S: Scalar>(input: &[S], g: &Geometry) -> Vec<S> {
    let n = g.out_len();
    let mut cols = vec![S::zero(); g.patch_len() * n];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((iy, ix)) = g.source(oy, ox, ki, kj) {
                            dst[oy * g.out_w + ox] = input[c * plane + iy * g.width + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds an unrolled gradient back onto the input grid.
fn col2im<S: Scalar>(cols: &[S], g: &Geometry) -> Vec<S> {
    let n = g.out_len();
    let plane = g.height * g.width;
    let mut out = vec![S::zero(); g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((iy, ix)) = g.source(oy, ox, ki, kj) {
                            out[c * plane + iy * g.width + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward convolution of a `[C, H, W]` input.
pub fn conv2d_forward<S: Scalar>(input: &Tensor<S>, layer: &ConvLayer<S>) -> Result<Tensor<S>> {
    let g = Geometry::new(input, layer)?;
    let m = layer.out_maps();
    let n = g.out_len();
    let kk = g.patch_len();
    let mut out = Vec::with_capacity(m * n);
    for &b in layer.bias.data() {
        out.extend(std::iter::repeat_n(b, n));
    }
    let cols = im2col(input.data(), &g);
    S::gemm(
        m,
        kk,
        n,
        S::one(),
        layer.weights.data(),
        kk as isize,
        1,
        &cols,
        n as isize,
        1,
        S::one(),
        &mut out,
        n as isize,
        1,
    );
    Tensor::from_vec(&[m, g.out_h, g.out_w], out)
}

/// Exact adjoint of [`conv2d_forward`].
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    layer: &ConvLayer<S>,
    grad_out: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    conv2d_backward_opt(input, layer, grad_out, true)
}

/// As [`conv2d_backward`]; skips the input gradient when `need_input` is false.
pub(crate) fn conv2d_backward_opt<S: Scalar>(
    input: &Tensor<S>,
    layer: &ConvLayer<S>,
    grad_out: &Tensor<S>,
    need_input: bool,
) -> Result<ConvGrads<S>> {
    let g = Geometry::new(input, layer)?;
    let m = layer.out_maps();
    let n = g.out_len();
    let kk = g.patch_len();
    if grad_out.dims() != [m, g.out_h, g.out_w] {
        return config_err(format!(
            "conv grad_out {:?} does not match output [{m}, {}, {}]",
            grad_out.dims(),
            g.out_h,
            g.out_w
        ));
    }
    let go = grad_out.data();
    let bias: Vec<S> = go.chunks(n).map(|row| row.iter().copied().sum()).collect();

    let cols = im2col(input.data(), &g);
    let mut gw = vec![S::zero(); m * kk];
    // grad_w[m, kk] = grad_out[m, n] · cols^T[n, kk]
    S::gemm(m, n, kk, S::one(), go, n as isize, 1, &cols, 1, n as isize, S::zero(), &mut gw, kk as isize, 1);

    let grad_input = if need_input {
        let mut gcols = vec![S::zero(); kk * n];
        // grad_cols[kk, n] = W^T[kk, m] · grad_out[m, n]
        S::gemm(
            kk,
            m,
            n,
            S::one(),
            layer.weights.data(),
            1,
            kk as isize,
            go,
            n as isize,
            1,
            S::zero(),
            &mut gcols,
            n as isize,
            1,
        );
        Some(Tensor::from_vec(input.dims(), col2im(&gcols, &g))?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        weights: Tensor::from_vec(layer.weights.dims(), gw)?,
        bias: Tensor::from_vec(&[m], bias)?,
    })
}
