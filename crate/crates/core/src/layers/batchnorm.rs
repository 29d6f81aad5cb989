use super::{join, Mode, Param, ParamSlot, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over the last axis.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased variance into the running estimate:
/// `running = (1 - momentum) * running + momentum * batch`.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    cache: Option<BatchNormCache>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNormCache {
    /// Normalized input before the gamma/beta affine map.
    pub fn normalized(&self) -> &Tensor {
        &self.xhat
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self::with_hyper(channels, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM)
    }

    pub fn with_hyper(channels: usize, epsilon: f64, momentum: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        assert!(momentum > 0.0 && momentum < 1.0, "momentum must lie in (0, 1)");
        Self {
            gamma: Param::new(Tensor::full(&[channels], 1.0), false),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            epsilon,
            momentum,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (out, cache) = batchnorm_forward(input, self, mode)?;
        self.cache = cache;
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor, accumulate_params: bool) -> Result<Tensor> {
        let grads = batchnorm_backward(grad_out, self.cache.as_ref(), self)?;
        if accumulate_params {
            self.gamma.grad.add_assign(&grads.gamma)?;
            self.beta.grad.add_assign(&grads.beta)?;
        }
        Ok(grads.input)
    }

    /// Inference-mode normalization with the running statistics.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let c = self.channels();
        if input.rank() < 2 || input.shape()[input.rank() - 1] != c {
            return Err(Error::invalid(
                "batchnorm_forward",
                format!("input {:?} does not end in {c} channels", input.shape()),
            ));
        }
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mean = self.running_mean.data();
        let scale: Vec<f64> = (0..c)
            .map(|k| gamma[k] / (self.running_var.data()[k] + self.epsilon).sqrt())
            .collect();
        let mut out = Tensor::zeros(input.shape());
        for (dst, src) in out.data_mut().chunks_mut(c).zip(input.data().chunks(c)) {
            for k in 0..c {
                dst[k] = (src[k] - mean[k]) * scale[k] + beta[k];
            }
        }
        Ok(out)
    }

    pub fn cache(&self) -> Option<&BatchNormCache> {
        self.cache.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Parameterized for BatchNormLayer {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Normalizes `input`; in train mode also updates the running statistics and
/// returns the cache needed by [`batchnorm_backward`].
pub fn batchnorm_forward(
    input: &Tensor,
    layer: &mut BatchNormLayer,
    mode: Mode,
) -> Result<(Tensor, Option<BatchNormCache>)> {
    let c = layer.channels();
    if input.rank() < 2 || input.shape()[input.rank() - 1] != c {
        let mut expected = input.shape().to_vec();
        if let Some(last) = expected.last_mut() {
            *last = c;
        }
        return Err(Error::shape("batchnorm_forward", &expected, input.shape()));
    }
    if mode == Mode::Infer {
        return Ok((layer.infer(input)?, None));
    }

    if input.batch() < 2 {
        return Err(Error::invalid(
            "batchnorm_forward",
            "train mode needs a batch of at least 2 samples",
        ));
    }
    let gamma = layer.gamma.value.data();
    let beta = layer.beta.value.data();
    let mut out = Tensor::zeros(input.shape());
    let m = (input.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in input.data().chunks(c) {
        for k in 0..c {
            mean[k] += row[k];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for row in input.data().chunks(c) {
        for k in 0..c {
            let d = row[k] - mean[k];
            var[k] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + layer.epsilon).sqrt()).collect();

    let mut xhat = Tensor::zeros(input.shape());
    for ((dst, xh), src) in out
        .data_mut()
        .chunks_mut(c)
        .zip(xhat.data_mut().chunks_mut(c))
        .zip(input.data().chunks(c))
    {
        for k in 0..c {
            xh[k] = (src[k] - mean[k]) * inv_std[k];
            dst[k] = gamma[k] * xh[k] + beta[k];
        }
    }

    let mom = layer.momentum;
    let unbias = m / (m - 1.0);
    for k in 0..c {
        let rm = &mut layer.running_mean.data_mut()[k];
        *rm = (1.0 - mom) * *rm + mom * mean[k];
        let rv = &mut layer.running_var.data_mut()[k];
        *rv = (1.0 - mom) * *rv + mom * var[k] * unbias;
    }
    Ok((out, Some(BatchNormCache { xhat, inv_std })))
}

pub fn batchnorm_backward(
    grad_out: &Tensor,
    cache: Option<&BatchNormCache>,
    layer: &BatchNormLayer,
) -> Result<BatchNormGrads> {
    let cache = cache.ok_or_else(|| Error::MissingCache {
        layer: "batchnorm".into(),
    })?;
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape(
            "batchnorm_backward",
            cache.xhat.shape(),
            grad_out.shape(),
        ));
    }
    let c = layer.channels();
    let m = (grad_out.len() / c) as f64;
    let mut grad_beta = vec![0.0; c];
    let mut grad_gamma = vec![0.0; c];
    for (g, xh) in grad_out.data().chunks(c).zip(cache.xhat.data().chunks(c)) {
        for k in 0..c {
            grad_beta[k] += g[k];
            grad_gamma[k] += g[k] * xh[k];
        }
    }
    let gamma = layer.gamma.value.data();
    let coef: Vec<f64> = (0..c).map(|k| gamma[k] * cache.inv_std[k] / m).collect();
    let mut grad_input = Tensor::zeros(grad_out.shape());
    for ((dst, g), xh) in grad_input
        .data_mut()
        .chunks_mut(c)
        .zip(grad_out.data().chunks(c))
        .zip(cache.xhat.data().chunks(c))
    {
        for k in 0..c {
            dst[k] = coef[k] * (m * g[k] - grad_beta[k] - xh[k] * grad_gamma[k]);
        }
    }
    Ok(BatchNormGrads {
        input: grad_input,
        gamma: Tensor::new(vec![c], grad_gamma)?,
        beta: Tensor::new(vec![c], grad_beta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error, random_tensor};

    fn channel_stats(t: &Tensor, c: usize) -> Vec<(f64, f64)> {
        let m = (t.len() / c) as f64;
        (0..c)
            .map(|k| {
                let vals: Vec<f64> = t.data().iter().skip(k).step_by(c).copied().collect();
                let mean = vals.iter().sum::<f64>() / m;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                (mean, var)
            })
            .collect()
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let raw = random_tensor(&[6, 3, 3, 2], 1, 1.0);
        // standardize per channel by hand
        let stats = channel_stats(&raw, 2);
        let mut x = raw.clone();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let (m, var) = stats[i % 2];
            *v = (*v - m) / var.sqrt();
        }
        let mut bn = BatchNormLayer::with_hyper(2, 1e-12, DEFAULT_BN_MOMENTUM);
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut bn = BatchNormLayer::new(3);
        bn.gamma.value.fill(0.0);
        bn.beta.value = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = bn.forward(&random_tensor(&[4, 2, 2, 3], 2, 3.0), Mode::Train).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let x = random_tensor(&[8, 4, 4, 3], 3, 20.0).map(|v| v + 7.0);
        let mut bn = BatchNormLayer::new(3);
        bn.gamma.value = Tensor::new(vec![3], vec![2.0, 0.5, -1.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        for (mean, var) in channel_stats(bn.cache().unwrap().normalized(), 3) {
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_follow_ema_and_drive_infer_mode() {
        let x = random_tensor(&[5, 2, 2, 1], 4, 2.0);
        let mut bn = BatchNormLayer::new(1);
        bn.forward(&x, Mode::Train).unwrap();
        let (mean, var) = channel_stats(&x, 1)[0];
        let m = x.len() as f64;
        assert!((bn.running_mean.data()[0] - 0.1 * mean).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * var * m / (m - 1.0))).abs() < 1e-15);
        assert!(bn.running_var.data()[0] > 0.0);
        let y = bn.forward(&x, Mode::Infer).unwrap();
        let rm = bn.running_mean.data()[0];
        let rv = bn.running_var.data()[0];
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (b - rm) / (rv + DEFAULT_BN_EPSILON).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_single_sample_batch_in_train_mode() {
        let mut bn = BatchNormLayer::new(2);
        assert!(bn.forward(&Tensor::zeros(&[1, 3, 3, 2]), Mode::Train).is_err());
        assert!(bn.forward(&Tensor::zeros(&[1, 3, 3, 2]), Mode::Infer).is_ok());
        assert!(bn.forward(&Tensor::zeros(&[2, 3, 3, 4]), Mode::Train).is_err());
    }

    #[test]
    fn zero_grad_out_and_beta_gradient() {
        let mut bn = BatchNormLayer::new(2);
        let x = random_tensor(&[3, 2, 2, 2], 5, 1.0);
        bn.forward(&x, Mode::Train).unwrap();
        let z = batchnorm_backward(&Tensor::zeros(x.shape()), bn.cache(), &bn).unwrap();
        assert!(z.input.data().iter().chain(z.gamma.data()).chain(z.beta.data()).all(|&v| v == 0.0));

        let g = random_tensor(x.shape(), 6, 1.0);
        let grads = batchnorm_backward(&g, bn.cache(), &bn).unwrap();
        for k in 0..2 {
            let s: f64 = g.data().iter().skip(k).step_by(2).sum();
            assert!((grads.beta.data()[k] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_without_cache_is_rejected() {
        let bn = BatchNormLayer::new(2);
        assert!(matches!(
            batchnorm_backward(&Tensor::zeros(&[2, 2]), None, &bn),
            Err(Error::MissingCache { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random_tensor(&[3, 3, 2, 2], 7, 1.5);
        let gamma = Tensor::new(vec![2], vec![1.3, -0.7]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.2, 0.4]).unwrap();
        let weights = random_tensor(x.shape(), 8, 1.0);
        let loss = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let mut bn = BatchNormLayer::new(2);
            bn.gamma.value = g.clone();
            bn.beta.value = b.clone();
            let y = bn.forward(x, Mode::Train).unwrap();
            // weighted sum of squares so the loss is not invariant to the normalization
            y.data().iter().zip(weights.data()).map(|(a, w)| w * a * a).sum::<f64>()
        };
        let mut bn = BatchNormLayer::new(2);
        bn.gamma.value = gamma.clone();
        bn.beta.value = beta.clone();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let gout = Tensor::from_fn(y.shape(), |i| 2.0 * weights.data()[i] * y.data()[i]);
        let grads = batchnorm_backward(&gout, bn.cache(), &bn).unwrap();
        assert!(max_rel_error(&grads.input, &central_diff(&x, 1e-5, |t| loss(t, &gamma, &beta))) < 1e-4);
        assert!(max_rel_error(&grads.gamma, &central_diff(&gamma, 1e-5, |t| loss(&x, t, &beta))) < 1e-4);
        assert!(max_rel_error(&grads.beta, &central_diff(&beta, 1e-5, |t| loss(&x, &gamma, t))) < 1e-4);
    }
}
