use rayon::prelude::*;

use super::{join, Mode, Param, ParamSlot, Parameterized};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// 2-D convolution (cross-correlation) over `(n, h, w, c)` batches.
///
/// Weights are laid out `(k_h, k_w, c_in, c_out)`, which flattens to the
/// `(k_h * k_w * c_in, c_out)` matrix multiplied against im2col patches.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weights: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        weights.expect_rank("ConvLayer::new", 4)?;
        let c_out = weights.shape()[3];
        if bias.shape() != [c_out] {
            return Err(Error::shape("ConvLayer::new", &[c_out], bias.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("ConvLayer::new", "stride must be positive"));
        }
        Ok(Self {
            weights: Param::new(weights, true),
            bias: Param::new(bias, false),
            stride,
            padding,
            cache: None,
        })
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weights.value.shape();
        (s[0], s[1])
    }

    pub fn in_channels(&self) -> usize {
        self.weights.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.value.shape()[3]
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out = conv2d_forward(input, self)?;
        self.cache = match mode {
            Mode::Train => Some(ConvCache {
                input: input.clone(),
            }),
            Mode::Infer => None,
        };
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor, accumulate_params: bool) -> Result<Tensor> {
        let grads = conv2d_backward(grad_out, self.cache.as_ref(), self)?;
        if accumulate_params {
            self.weights.grad.add_assign(&grads.weights)?;
            self.bias.grad.add_assign(&grads.bias)?;
        }
        Ok(grads.input)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Output spatial extent for an input of `(h, w)`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        Ok((
            out_extent(h, kh, self.stride, self.padding)?,
            out_extent(w, kw, self.stride, self.padding)?,
        ))
    }

    fn geometry(&self, input: &Tensor) -> Result<Geometry> {
        input.expect_rank("conv2d_forward", 4)?;
        let s = input.shape();
        let ws = self.weights.value.shape();
        if s[3] != ws[2] {
            return Err(Error::invalid(
                "conv2d_forward",
                format!(
                    "input shape {s:?} has {} channels but weights {ws:?} expect {}",
                    s[3], ws[2]
                ),
            ));
        }
        let (oh, ow) = self.output_hw(s[1], s[2])?;
        Ok(Geometry {
            h: s[1],
            w: s[2],
            c_in: s[3],
            kh: ws[0],
            kw: ws[1],
            c_out: ws[3],
            oh,
            ow,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

impl Parameterized for ConvLayer {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        out.push((join(prefix, "weights"), &mut self.weights));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

fn out_extent(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < k {
        return Err(Error::invalid(
            "conv2d_forward",
            format!("padded extent {padded} is smaller than kernel extent {k}"),
        ));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::invalid(
            "conv2d_forward",
            format!("extent {size} with padding {padding}, kernel {k}, stride {stride} gives a non-integer output extent"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Unfolds one sample `(h, w, c_in)` into `(oh * ow, kh * kw * c_in)` patches.
fn im2col(sample: &[f64], g: &Geometry, cols: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.c_in..][..g.c_in];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.c_in;
                        dst.copy_from_slice(&sample[src..src + g.c_in]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back onto a `(h, w, c_in)` sample.
fn col2im(cols: &[f64], g: &Geometry, sample: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * plen..][..plen];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.c_in..][..g.c_in];
                    let dst = &mut sample[(iy as usize * g.w + ix as usize) * g.c_in..][..g.c_in];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let g = layer.geometry(input)?;
    let n = input.batch();
    let pixels = g.oh * g.ow;
    let weights = MatRef::row_major(layer.weights.value.data(), g.patch_len(), g.c_out);
    let bias = layer.bias.value.data();
    let mut out = Tensor::zeros(&[n, g.oh, g.ow, g.c_out]);
    out.data_mut()
        .par_chunks_mut(pixels * g.c_out)
        .zip(input.data().par_chunks(g.h * g.w * g.c_in))
        .for_each(|(dst, src)| {
            let mut cols = vec![0.0; pixels * g.patch_len()];
            im2col(src, &g, &mut cols);
            for row in dst.chunks_mut(g.c_out) {
                row.copy_from_slice(bias);
            }
            gemm(1.0, MatRef::row_major(&cols, pixels, g.patch_len()), weights, 1.0, dst);
        });
    Ok(out)
}

/// Gradients of a convolution given the cached forward input.
///
/// Per-sample weight gradients are computed independently and summed in
/// sample order, so the result does not depend on the rayon pool size.
pub fn conv2d_backward(
    grad_out: &Tensor,
    cache: Option<&ConvCache>,
    layer: &ConvLayer,
) -> Result<ConvGrads> {
    let cache = cache.ok_or_else(|| Error::MissingCache {
        layer: "conv2d".into(),
    })?;
    let input = &cache.input;
    let g = layer.geometry(input)?;
    let n = input.batch();
    let expected = [n, g.oh, g.ow, g.c_out];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward", &expected, grad_out.shape()));
    }
    let pixels = g.oh * g.ow;
    let plen = g.patch_len();
    let weights = MatRef::row_major(layer.weights.value.data(), plen, g.c_out);

    let mut grad_input = Tensor::zeros(input.shape());
    let partials: Vec<Vec<f64>> = grad_input
        .data_mut()
        .par_chunks_mut(g.h * g.w * g.c_in)
        .zip(input.data().par_chunks(g.h * g.w * g.c_in))
        .zip(grad_out.data().par_chunks(pixels * g.c_out))
        .map(|((gin, src), gout)| {
            let gout = MatRef::row_major(gout, pixels, g.c_out);
            let mut cols = vec![0.0; pixels * plen];
            im2col(src, &g, &mut cols);
            let mut gw = vec![0.0; plen * g.c_out];
            gemm(1.0, MatRef::row_major(&cols, pixels, plen).t(), gout, 0.0, &mut gw);
            gemm(1.0, gout, weights.t(), 0.0, &mut cols);
            col2im(&cols, &g, gin);
            gw
        })
        .collect();

    let mut grad_weights = Tensor::zeros(layer.weights.value.shape());
    for part in &partials {
        for (d, s) in grad_weights.data_mut().iter_mut().zip(part) {
            *d += s;
        }
    }
    let mut grad_bias = Tensor::zeros(&[g.c_out]);
    for row in grad_out.data().chunks(g.c_out) {
        for (d, s) in grad_bias.data_mut().iter_mut().zip(row) {
            *d += s;
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error, random_tensor};

    fn layer(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> ConvLayer {
        ConvLayer::new(weights, bias, stride, padding).unwrap()
    }

    /// Direct six-loop cross-correlation, independent of im2col/GEMM.
    fn naive_conv(input: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [n, h, wd, ci] = input.shape().try_into().unwrap();
        let [kh, kw, _, co] = w.shape().try_into().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, oh, ow, co]);
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut acc = b.data()[o];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    let xi = ((s * h + iy as usize) * wd + ix as usize) * ci + c;
                                    let wi = ((ky * kw + kx) * ci + c) * co + o;
                                    acc += input.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((s * oh + oy) * ow + ox) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_receptive_field() {
        let l = layer(Tensor::full(&[3, 3, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 1);
        let out = conv2d_forward(&Tensor::full(&[1, 3, 3, 1], 1.0), &l).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 1]);
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[((3 + 1) * 3 + c) * 3 + c] = 1.0;
        }
        let l = layer(w, Tensor::zeros(&[3]), 1, 1);
        let x = random_tensor(&[2, 5, 4, 3], 1, 1.0);
        assert_eq!(conv2d_forward(&x, &l).unwrap(), x);
    }

    #[test]
    fn matches_naive_loops() {
        for (seed, stride, pad, h) in [(3, 1, 1, 5), (4, 2, 1, 5), (5, 1, 0, 6), (6, 3, 2, 8)] {
            let x = random_tensor(&[2, h, h, 3], seed, 1.0);
            let w = random_tensor(&[3, 3, 3, 4], seed + 100, 1.0);
            let b = random_tensor(&[4], seed + 200, 1.0);
            let l = layer(w.clone(), b.clone(), stride, pad);
            let fast = conv2d_forward(&x, &l).unwrap();
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let l = layer(Tensor::zeros(&[3, 3, 2, 4]), Tensor::zeros(&[4]), 1, 1);
        let err = conv2d_forward(&Tensor::zeros(&[1, 4, 4, 3]), &l).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 4, 4, 3]") && msg.contains("[3, 3, 2, 4]"), "{msg}");
        let l2 = layer(Tensor::zeros(&[3, 3, 1, 1]), Tensor::zeros(&[1]), 2, 0);
        assert!(conv2d_forward(&Tensor::zeros(&[1, 6, 6, 1]), &l2).is_err());
        assert!(conv2d_forward(&Tensor::zeros(&[1, 2, 2, 1]), &l2).is_err());
    }

    #[test]
    fn backward_requires_cache() {
        let mut l = layer(Tensor::zeros(&[3, 3, 1, 1]), Tensor::zeros(&[1]), 1, 1);
        let err = l.backward(&Tensor::zeros(&[1, 3, 3, 1]), true).unwrap_err();
        assert!(matches!(err, Error::MissingCache { .. }));
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut l = layer(random_tensor(&[3, 3, 2, 3], 9, 1.0), random_tensor(&[3], 10, 1.0), 1, 1);
        let x = random_tensor(&[2, 4, 4, 2], 11, 1.0);
        l.forward(&x, Mode::Train).unwrap();
        let g = conv2d_backward(&Tensor::zeros(&[2, 4, 4, 3]), l.cache.as_ref(), &l).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_sum_loss_has_unit_input_gradient() {
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        w.data_mut()[4] = 1.0;
        let mut l = layer(w, Tensor::zeros(&[1]), 1, 1);
        let x = random_tensor(&[1, 4, 4, 1], 12, 1.0);
        let y = l.forward(&x, Mode::Train).unwrap();
        let gin = l.backward(&Tensor::full(y.shape(), 1.0), true).unwrap();
        assert!(gin.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (stride, pad) in [(1, 1), (2, 1)] {
            let x = random_tensor(&[2, 5, 5, 2], 20, 1.0);
            let w = random_tensor(&[3, 3, 2, 3], 21, 0.5);
            let b = random_tensor(&[3], 22, 0.5);
            let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
                let l = layer(w.clone(), b.clone(), stride, pad);
                conv2d_forward(x, &l).unwrap().sum_squares()
            };
            let mut l = layer(w.clone(), b.clone(), stride, pad);
            let y = l.forward(&x, Mode::Train).unwrap();
            let grads = conv2d_backward(&y.scale(2.0), l.cache.as_ref(), &l).unwrap();

            let num_x = central_diff(&x, 1e-5, |t| loss(t, &w, &b));
            let num_w = central_diff(&w, 1e-5, |t| loss(&x, t, &b));
            let num_b = central_diff(&b, 1e-5, |t| loss(&x, &w, t));
            assert!(max_rel_error(&grads.input, &num_x) < 1e-4);
            assert!(max_rel_error(&grads.weights, &num_w) < 1e-4);
            assert!(max_rel_error(&grads.bias, &num_b) < 1e-4);
        }
    }
}
