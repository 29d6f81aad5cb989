use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    input.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Gradient is 1 at and right of the kink, `slope` left of it.
pub fn leaky_relu_backward(grad_out: &Tensor, input: &Tensor, slope: f64) -> Result<Tensor> {
    if grad_out.shape() != input.shape() {
        return Err(Error::shape("leaky_relu_backward", input.shape(), grad_out.shape()));
    }
    Ok(Tensor::from_fn(input.shape(), |i| {
        let g = grad_out.data()[i];
        if input.data()[i] >= 0.0 {
            g
        } else {
            slope * g
        }
    }))
}

#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f64,
    /// Sign mask of the last train-mode input.
    cache: Option<(Vec<usize>, Vec<bool>)>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::invalid(
                "LeakyRelu::new",
                format!("slope must lie in [0, 1), got {slope}"),
            ));
        }
        Ok(Self { slope, cache: None })
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Tensor {
        self.cache = match mode {
            Mode::Train => Some((
                input.shape().to_vec(),
                input.data().iter().map(|&v| v >= 0.0).collect(),
            )),
            Mode::Infer => None,
        };
        leaky_relu(input, self.slope)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (shape, mask) = self.cache.as_ref().ok_or_else(|| Error::MissingCache {
            layer: "leaky_relu".into(),
        })?;
        if grad_out.shape() != shape.as_slice() {
            return Err(Error::shape("leaky_relu_backward", shape, grad_out.shape()));
        }
        let slope = self.slope;
        Ok(Tensor::from_fn(shape, |i| {
            let g = grad_out.data()[i];
            if mask[i] {
                g
            } else {
                slope * g
            }
        }))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
