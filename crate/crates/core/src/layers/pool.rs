use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argmax routing recorded by a forward max-pool.
#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    /// Flat input index of the winner for every output element.
    argmax: Vec<usize>,
}

/// Max-pooling over `(n, h, w, c)` with a square window and no padding.
///
/// Output extent follows the floor rule `(h - window) / stride + 1`; ties go
/// to the first position in row-major window order.
pub fn max_pool(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolCache)> {
    input.expect_rank("max_pool", 4)?;
    let [n, h, w, c]: [usize; 4] = input.shape().try_into().expect("rank checked");
    if window == 0 || stride == 0 {
        return Err(Error::invalid("max_pool", "window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::invalid(
            "max_pool",
            format!("window {window} larger than input extent {h}x{w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    let mut argmax = vec![0usize; out.len()];
    let x = input.data();
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = ((s * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if best == usize::MAX || x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = ((s * oh + oy) * ow + ox) * c + ch;
                    out.data_mut()[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn max_pool_backward(grad_out: &Tensor, cache: &PoolCache) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::invalid(
            "max_pool_backward",
            format!(
                "gradient shape {:?} does not match the pooled output",
                grad_out.shape()
            ),
        ));
    }
    let mut grad_in = Tensor::zeros(&cache.input_shape);
    for (&src, &g) in cache.argmax.iter().zip(grad_out.data()) {
        grad_in.data_mut()[src] += g;
    }
    Ok(grad_in)
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
    cache: Option<PoolCache>,
}

impl MaxPool {
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.window > h || self.window > w {
            return None;
        }
        Some((
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ))
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (out, cache) = max_pool(input, self.window, self.stride)?;
        self.cache = (mode == Mode::Train).then_some(cache);
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| Error::MissingCache {
            layer: "max_pool".into(),
        })?;
        max_pool_backward(grad_out, cache)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
