//! VGG-style embedding network: conv stages with pooling, then a dense head.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::{conv3x3, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d_forward, fully_connected, he_init, join, leaky_relu, max_pool, BatchNormLayer,
    ConvLayer, LeakyRelu, LinearLayer, MaxPool, Mode, ParamSlot, Parameterized,
    DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM, DEFAULT_LEAKY_SLOPE,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Output channels of each conv stage.
    pub stage_channels: Vec<usize>,
    /// Widths of hidden dense layers before the embedding layer.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub batch_norm: bool,
    pub pool: usize,
    pub slope: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            hidden: Vec::new(),
            embed_dim: 64,
            batch_norm: false,
            pool: 2,
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorStage {
    pub conv: ConvLayer,
    pub bn: Option<BatchNormLayer>,
    pub act: LeakyRelu,
    pub pool: MaxPool,
}

impl ExtractorStage {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = self.conv.forward(x, mode)?;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y, mode)?;
        }
        let y = self.act.forward(&y, mode);
        self.pool.forward(&y, mode)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d_forward(x, &self.conv)?;
        if let Some(bn) = &self.bn {
            y = bn.infer(&y)?;
        }
        let y = leaky_relu(&y, self.act.slope);
        Ok(max_pool(&y, self.pool.window, self.pool.stride)?.0)
    }

    fn backward(&mut self, grad: &Tensor, accumulate: bool) -> Result<Tensor> {
        let g = self.pool.backward(grad)?;
        let mut g = self.act.backward(&g)?;
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g, accumulate)?;
        }
        self.conv.backward(&g, accumulate)
    }

    fn clear_caches(&mut self) {
        self.conv.clear_cache();
        if let Some(bn) = &mut self.bn {
            bn.clear_cache();
        }
        self.act.clear_cache();
        self.pool.clear_cache();
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorNet {
    pub config: ExtractorConfig,
    /// Spatial size the dense head was built for.
    pub image_size: (usize, usize),
    pub stages: Vec<ExtractorStage>,
    /// Dense layers; every one but the last is followed by lReLU.
    pub head: Vec<LinearLayer>,
    head_acts: Vec<LeakyRelu>,
    flat_shape: Vec<usize>,
    /// When false, gradients flow through to the input but parameters keep
    /// no gradient.
    pub trainable: bool,
}

impl ExtractorNet {
    pub fn new(config: ExtractorConfig, image_size: (usize, usize), seed: u64) -> Result<Self> {
        if config.embed_dim == 0 {
            return Err(Error::invalid("ExtractorNet::new", "embed_dim must be positive"));
        }
        if config.stage_channels.iter().chain(&config.hidden).any(|&c| c == 0) {
            return Err(Error::invalid("ExtractorNet::new", "layer widths must be positive"));
        }
        if config.pool < 2 {
            return Err(Error::invalid("ExtractorNet::new", "pool window must be at least 2"));
        }
        let (h, w) = Self::output_extent(&config, image_size)?;
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut c_in = IMAGE_CHANNELS;
        for &c in &config.stage_channels {
            stages.push(ExtractorStage {
                conv: conv3x3(c_in, c, &mut seeder)?,
                bn: config
                    .batch_norm
                    .then(|| BatchNormLayer::with_hyper(c, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM)),
                act: LeakyRelu::new(config.slope)?,
                pool: MaxPool::new(config.pool, config.pool),
            });
            c_in = c;
        }
        let mut width = h * w * c_in;
        let mut head = Vec::new();
        for &d in config.hidden.iter().chain([&config.embed_dim]) {
            let weights = he_init(&[width, d], width, seeder.next_u64())?;
            head.push(LinearLayer::new(weights, Tensor::zeros(&[d]))?);
            width = d;
        }
        let head_acts = (0..config.hidden.len())
            .map(|_| LeakyRelu::new(config.slope))
            .collect::<Result<_>>()?;
        Ok(Self {
            flat_shape: vec![h, w, c_in],
            config,
            image_size,
            stages,
            head,
            head_acts,
            trainable: true,
        })
    }

    /// Spatial extent after the last stage, or an error naming the first
    /// stage whose pooling window no longer fits.
    pub fn output_extent(config: &ExtractorConfig, image_size: (usize, usize)) -> Result<(usize, usize)> {
        let (mut h, mut w) = image_size;
        let pool = MaxPool::new(config.pool, config.pool);
        for i in 0..config.stage_channels.len() {
            (h, w) = pool.output_hw(h, w).ok_or_else(|| {
                Error::invalid(
                    "extractor_embed",
                    format!("stage {i}: {h}x{w} input is smaller than the {0}x{0} pool", config.pool),
                )
            })?;
        }
        Ok((h, w))
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        images.expect_rank("extractor_embed", 4)?;
        let s = images.shape();
        Self::output_extent(&self.config, (s[1], s[2]))?;
        if (s[1], s[2]) != self.image_size || s[3] != IMAGE_CHANNELS {
            let expected = [s[0], self.image_size.0, self.image_size.1, IMAGE_CHANNELS];
            return Err(Error::shape("extractor_embed", &expected, s));
        }
        Ok(())
    }

    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(images)?;
        let mut x = images.clone();
        for stage in &mut self.stages {
            x = stage.forward(&x, mode)?;
        }
        let n = x.shape()[0];
        let mut x = x.reshape(&[n, self.flat_shape.iter().product()])?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter_mut().enumerate() {
            x = layer.forward(&x, mode)?;
            if i < last {
                x = self.head_acts[i].forward(&x, mode);
            }
        }
        Ok(x)
    }

    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let mut x = images.clone();
        for stage in &self.stages {
            x = stage.infer(&x)?;
        }
        let n = x.shape()[0];
        let mut x = x.reshape(&[n, self.flat_shape.iter().product()])?;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            x = fully_connected(&x, &layer.weights.value, &layer.bias.value)?;
            if i < last {
                x = leaky_relu(&x, self.head_acts[i].slope);
            }
        }
        Ok(x)
    }

    /// Backpropagates embedding gradients `(n, embed_dim)` to the input images.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let accumulate = self.trainable;
        let mut g = grad.clone();
        for i in (0..self.head.len()).rev() {
            if i < self.head.len() - 1 {
                g = self.head_acts[i].backward(&g)?;
            }
            g = self.head[i].backward(&g, accumulate)?;
        }
        let n = g.shape()[0];
        let mut shape = vec![n];
        shape.extend(&self.flat_shape);
        let mut g = g.reshape(&shape)?;
        for stage in self.stages.iter_mut().rev() {
            g = stage.backward(&g, accumulate)?;
        }
        Ok(g)
    }

    pub fn clear_caches(&mut self) {
        self.stages.iter_mut().for_each(ExtractorStage::clear_caches);
        self.head.iter_mut().for_each(LinearLayer::clear_cache);
        self.head_acts.iter_mut().for_each(LeakyRelu::clear_cache);
    }

    pub fn bn_layers(&self) -> Vec<&BatchNormLayer> {
        self.stages.iter().filter_map(|s| s.bn.as_ref()).collect()
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        self.stages.iter_mut().filter_map(|s| s.bn.as_mut()).collect()
    }
}

impl Parameterized for ExtractorNet {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stages.{i}"));
            s.conv.collect_params(&join(&p, "conv"), out);
            if let Some(bn) = &mut s.bn {
                bn.collect_params(&join(&p, "bn"), out);
            }
        }
        for (i, l) in self.head.iter_mut().enumerate() {
            l.collect_params(&join(prefix, &format!("head.{i}")), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn images(n: usize, size: usize, seed: u64) -> Tensor {
        random_tensor(&[n, size, size, 3], seed, 0.5).map(|v| v + 0.5)
    }

    #[test]
    fn embeds_to_configured_width() {
        let net = ExtractorNet::new(ExtractorConfig::default(), (32, 32), 1).unwrap();
        assert_eq!(net.infer(&images(8, 32, 2)).unwrap().shape(), &[8, 64]);
    }

    #[test]
    fn spatial_extent_shrinks_per_stage() {
        let cfg = ExtractorConfig::default();
        let mut sizes = vec![(32, 32)];
        for k in 1..=cfg.stage_channels.len() {
            let sub = ExtractorConfig {
                stage_channels: cfg.stage_channels[..k].to_vec(),
                ..cfg.clone()
            };
            sizes.push(ExtractorNet::output_extent(&sub, (32, 32)).unwrap());
        }
        assert_eq!(sizes, [(32, 32), (16, 16), (8, 8), (4, 4)]);
    }

    #[test]
    fn identical_images_identical_embeddings() {
        let net = ExtractorNet::new(ExtractorConfig::default(), (16, 16), 3).unwrap();
        let one = images(1, 16, 4);
        let two = Tensor::concat(&[one.clone(), one]).unwrap();
        let e = net.infer(&two).unwrap();
        assert_eq!(e.item(0), e.item(1));
    }

    #[test]
    fn batch_permutation_permutes_embeddings() {
        let net = ExtractorNet::new(ExtractorConfig::default(), (16, 16), 5).unwrap();
        let x = images(5, 16, 6);
        let order = [3, 0, 4, 1, 2];
        let direct = net.infer(&x).unwrap();
        let permuted = net.infer(&x.select(&order).unwrap()).unwrap();
        assert_eq!(permuted, direct.select(&order).unwrap());
    }

    #[test]
    fn too_small_input_names_stage() {
        let net = ExtractorNet::new(ExtractorConfig::default(), (32, 32), 1).unwrap();
        match net.infer(&images(1, 4, 1)) {
            Err(Error::InvalidArgument { reason, .. }) => assert!(reason.contains("stage 2"), "{reason}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ExtractorNet::new(ExtractorConfig::default(), (4, 4), 1).is_err());
    }

    #[test]
    fn train_and_infer_agree_without_batch_norm() {
        let mut net = ExtractorNet::new(
            ExtractorConfig {
                hidden: vec![12],
                ..Default::default()
            },
            (16, 16),
            7,
        )
        .unwrap();
        let x = images(3, 16, 8);
        assert_eq!(net.forward(&x, Mode::Train).unwrap(), net.infer(&x).unwrap());
    }

    #[test]
    fn frozen_net_passes_gradient_but_keeps_no_parameter_gradient() {
        let cfg = ExtractorConfig {
            batch_norm: true,
            ..Default::default()
        };
        let mut net = ExtractorNet::new(cfg, (16, 16), 9).unwrap();
        net.trainable = false;
        let x = images(3, 16, 10);
        let e = net.forward(&x, Mode::Train).unwrap();
        let g = net.backward(&e).unwrap();
        assert_eq!(g.shape(), x.shape());
        assert!(g.sum_squares() > 0.0);
        assert!(net.params_mut().iter().all(|(_, p)| p.grad.sum_squares() == 0.0));
    }
}
