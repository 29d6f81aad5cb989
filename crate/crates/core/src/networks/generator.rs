//! Residual color-space generator.
//!
//! | output      | layer                               |
//! |-------------|-------------------------------------|
//! | w x h x 3   | input                               |
//! | w x h x 64  | conv, lReLU                         |
//! | w x h x 64  | residual: conv, BN, lReLU, conv, BN, sum  (x blocks) |
//! | w x h x 64  | conv, BN, sum with the head output  |
//! | w x h x 64  | conv, lReLU                         |
//! | w x h x 3   | conv                                |
//!
//! Every convolution is 3x3, stride 1, padding 1. The tail has no output
//! activation, so the generated image is unbounded.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_forward, he_init, join, leaky_relu, BatchNormLayer, ConvLayer, LeakyRelu, Mode,
    ParamSlot, Parameterized, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM, DEFAULT_LEAKY_SLOPE,
};
use crate::tensor::Tensor;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: usize,
    pub blocks: usize,
    pub slope: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: 5,
            slope: DEFAULT_LEAKY_SLOPE,
            bn_epsilon: DEFAULT_BN_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

/// `bn2(conv2(lrelu(bn1(conv1(x))))) + x`
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub bn1: BatchNormLayer,
    pub act: LeakyRelu,
    pub conv2: ConvLayer,
    pub bn2: BatchNormLayer,
}

/// Intermediate tensors of one residual block, for diagnostics.
#[derive(Debug, Clone)]
pub struct BlockProbe {
    pub conv1_out: Tensor,
    pub pre_activation: Tensor,
    pub conv2_out: Tensor,
}

pub(crate) fn conv3x3(c_in: usize, c_out: usize, seeder: &mut ChaCha8Rng) -> Result<ConvLayer> {
    let weights = he_init(&[3, 3, c_in, c_out], 9 * c_in, seeder.next_u64())?;
    ConvLayer::new(weights, Tensor::zeros(&[c_out]), 1, 1)
}

impl ResidualBlock {
    fn new(cfg: &GeneratorConfig, seeder: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            conv1: conv3x3(c, c, seeder)?,
            bn1: BatchNormLayer::with_hyper(c, cfg.bn_epsilon, cfg.bn_momentum),
            act: LeakyRelu::new(cfg.slope)?,
            conv2: conv3x3(c, c, seeder)?,
            bn2: BatchNormLayer::with_hyper(c, cfg.bn_epsilon, cfg.bn_momentum),
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, probe: Option<&mut Vec<BlockProbe>>) -> Result<Tensor> {
        let c1 = self.conv1.forward(x, mode)?;
        let z = self.bn1.forward(&c1, mode)?;
        let a = self.act.forward(&z, mode);
        let c2 = self.conv2.forward(&a, mode)?;
        let mut out = self.bn2.forward(&c2, mode)?;
        out.add_assign(x)?;
        if let Some(sink) = probe {
            sink.push(BlockProbe {
                conv1_out: c1,
                pre_activation: z,
                conv2_out: c2,
            });
        }
        Ok(out)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.bn1.infer(&conv2d_forward(x, &self.conv1)?)?;
        let a = leaky_relu(&z, self.act.slope);
        let mut out = self.bn2.infer(&conv2d_forward(&a, &self.conv2)?)?;
        out.add_assign(x)?;
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.bn2.backward(grad, true)?;
        let g = self.conv2.backward(&g, true)?;
        let g = self.act.backward(&g)?;
        let g = self.bn1.backward(&g, true)?;
        let mut g = self.conv1.backward(&g, true)?;
        g.add_assign(grad)?;
        Ok(g)
    }

    fn clear_caches(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.act.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
    }

    fn bn_layers(&self) -> [&BatchNormLayer; 2] {
        [&self.bn1, &self.bn2]
    }

    fn bn_layers_mut(&mut self) -> [&mut BatchNormLayer; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

impl Parameterized for ResidualBlock {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.bn1.collect_params(&join(prefix, "bn1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.bn2.collect_params(&join(prefix, "bn2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    pub head: ConvLayer,
    pub head_act: LeakyRelu,
    pub blocks: Vec<ResidualBlock>,
    pub post_conv: ConvLayer,
    pub post_bn: BatchNormLayer,
    pub neck: ConvLayer,
    pub neck_act: LeakyRelu,
    pub tail: ConvLayer,
}

impl GeneratorNet {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 {
            return Err(Error::invalid("GeneratorNet::new", "channels must be positive"));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let head = conv3x3(IMAGE_CHANNELS, c, &mut seeder)?;
        let blocks = (0..config.blocks)
            .map(|_| ResidualBlock::new(&config, &mut seeder))
            .collect::<Result<Vec<_>>>()?;
        let post_conv = conv3x3(c, c, &mut seeder)?;
        let neck = conv3x3(c, c, &mut seeder)?;
        let tail = conv3x3(c, IMAGE_CHANNELS, &mut seeder)?;
        Ok(Self {
            head,
            head_act: LeakyRelu::new(config.slope)?,
            blocks,
            post_conv,
            post_bn: BatchNormLayer::with_hyper(c, config.bn_epsilon, config.bn_momentum),
            neck,
            neck_act: LeakyRelu::new(config.slope)?,
            tail,
            config,
        })
    }

    fn check_input(images: &Tensor) -> Result<()> {
        images.expect_rank("generator_forward", 4)?;
        if images.shape()[3] != IMAGE_CHANNELS {
            let mut expected = images.shape().to_vec();
            expected[3] = IMAGE_CHANNELS;
            return Err(Error::shape("generator_forward", &expected, images.shape()));
        }
        Ok(())
    }

    /// Forward pass; train mode records caches and updates BN running stats.
    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_probed(images, mode, None)
    }

    /// Forward pass that also records each residual block's intermediates.
    pub fn forward_probed(
        &mut self,
        images: &Tensor,
        mode: Mode,
        mut probe: Option<&mut Vec<BlockProbe>>,
    ) -> Result<Tensor> {
        Self::check_input(images)?;
        let head = self.head.forward(images, mode)?;
        let head = self.head_act.forward(&head, mode);
        let mut x = head.clone();
        for block in &mut self.blocks {
            x = block.forward(&x, mode, probe.as_deref_mut())?;
        }
        let mut x = self.post_bn.forward(&self.post_conv.forward(&x, mode)?, mode)?;
        x.add_assign(&head)?;
        let x = self.neck.forward(&x, mode)?;
        let x = self.neck_act.forward(&x, mode);
        self.tail.forward(&x, mode)
    }

    /// Inference-mode forward on shared parameters.
    pub fn infer(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.infer_traced(images)?.0)
    }

    /// Inference forward that records the output shape after each row of the
    /// architecture table.
    pub fn infer_traced(&self, images: &Tensor) -> Result<(Tensor, Vec<(String, Vec<usize>)>)> {
        Self::check_input(images)?;
        let mut trace = vec![("Input".to_string(), images.shape().to_vec())];
        let head = leaky_relu(&conv2d_forward(images, &self.head)?, self.head_act.slope);
        trace.push(("Conv,lReLU".into(), head.shape().to_vec()));
        let mut x = head.clone();
        for block in &self.blocks {
            x = block.infer(&x)?;
            trace.push(("Residual:Conv,BN,lReLU,Conv,BN,Sum".into(), x.shape().to_vec()));
        }
        let mut x = self.post_bn.infer(&conv2d_forward(&x, &self.post_conv)?)?;
        x.add_assign(&head)?;
        trace.push(("Conv,BN,Sum".into(), x.shape().to_vec()));
        let x = leaky_relu(&conv2d_forward(&x, &self.neck)?, self.neck_act.slope);
        trace.push(("Conv,lReLU".into(), x.shape().to_vec()));
        let out = conv2d_forward(&x, &self.tail)?;
        trace.push(("Conv".into(), out.shape().to_vec()));
        Ok((out, trace))
    }

    /// Backpropagates from the generated image; returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.tail.backward(grad_out, true)?;
        let g = self.neck_act.backward(&g)?;
        let skip = self.neck.backward(&g, true)?;
        let g = self.post_bn.backward(&skip, true)?;
        let mut g = self.post_conv.backward(&g, true)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        g.add_assign(&skip)?;
        let g = self.head_act.backward(&g)?;
        self.head.backward(&g, true)
    }

    pub fn clear_caches(&mut self) {
        self.head.clear_cache();
        self.head_act.clear_cache();
        self.blocks.iter_mut().for_each(ResidualBlock::clear_caches);
        self.post_conv.clear_cache();
        self.post_bn.clear_cache();
        self.neck.clear_cache();
        self.neck_act.clear_cache();
        self.tail.clear_cache();
    }

    /// Batch-norm layers in declaration order.
    pub fn bn_layers(&self) -> Vec<&BatchNormLayer> {
        let mut out: Vec<&BatchNormLayer> = self.blocks.iter().flat_map(|b| b.bn_layers()).collect();
        out.push(&self.post_bn);
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        let mut out: Vec<&mut BatchNormLayer> =
            self.blocks.iter_mut().flat_map(|b| b.bn_layers_mut()).collect();
        out.push(&mut self.post_bn);
        out
    }

    /// Convolutions in declaration order, named as in checkpoints.
    pub fn conv_layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out = vec![("head".to_string(), &self.head)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.conv1"), &b.conv1));
            out.push((format!("blocks.{i}.conv2"), &b.conv2));
        }
        out.push(("post_conv".into(), &self.post_conv));
        out.push(("neck".into(), &self.neck));
        out.push(("tail".into(), &self.tail));
        out
    }
}

impl Parameterized for GeneratorNet {
    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamSlot<'a>>) {
        self.head.collect_params(&join(prefix, "head"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.post_conv.collect_params(&join(prefix, "post_conv"), out);
        self.post_bn.collect_params(&join(prefix, "post_bn"), out);
        self.neck.collect_params(&join(prefix, "neck"), out);
        self.tail.collect_params(&join(prefix, "tail"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    fn small(blocks: usize) -> GeneratorConfig {
        GeneratorConfig {
            channels: 8,
            blocks,
            ..Default::default()
        }
    }

    #[test]
    fn output_matches_input_geometry() {
        let mut g = GeneratorNet::new(GeneratorConfig::default(), 1).unwrap();
        let x = random_tensor(&[2, 32, 32, 3], 2, 0.5).map(|v| v + 0.5);
        assert_eq!(g.forward(&x, Mode::Train).unwrap().shape(), &[2, 32, 32, 3]);
        assert_eq!(g.infer(&x).unwrap().shape(), &[2, 32, 32, 3]);
        assert_eq!(g.blocks.len(), 5);
    }

    #[test]
    fn trace_follows_architecture_table() {
        let g = GeneratorNet::new(GeneratorConfig::default(), 3).unwrap();
        for (h, w) in [(3, 3), (5, 9)] {
            let (_, trace) = g.infer_traced(&Tensor::zeros(&[1, h, w, 3])).unwrap();
            let shapes: Vec<usize> = trace.iter().map(|(_, s)| s[3]).collect();
            assert_eq!(shapes, [3, 64, 64, 64, 64, 64, 64, 64, 64, 3]);
            assert!(trace.iter().all(|(_, s)| s[1] == h && s[2] == w));
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut g = GeneratorNet::new(small(2), 4).unwrap();
        for (_, p) in g.params_mut() {
            if p.decay {
                p.value.fill(0.0);
            }
        }
        let x = random_tensor(&[2, 6, 6, 3], 5, 0.5).map(|v| v + 0.5);
        assert!(g.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_is_deterministic_and_matches_infer_mode_forward() {
        let mut g = GeneratorNet::new(small(2), 6).unwrap();
        let x = random_tensor(&[3, 5, 5, 3], 7, 0.5).map(|v| v + 0.5);
        g.forward(&x, Mode::Train).unwrap();
        let a = g.infer(&x).unwrap();
        let b = g.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(g.forward(&x, Mode::Infer).unwrap(), a);
    }

    #[test]
    fn residual_block_with_zeroed_branch_is_identity() {
        let cfg = small(1);
        let mut seeder = ChaCha8Rng::seed_from_u64(8);
        let mut block = ResidualBlock::new(&cfg, &mut seeder).unwrap();
        block.conv2.weights.value.fill(0.0);
        block.conv2.bias.value.fill(0.0);
        let x = random_tensor(&[2, 4, 4, 8], 9, 1.0);
        let y = block.infer(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut g = GeneratorNet::new(small(1), 1).unwrap();
        assert!(matches!(
            g.forward(&Tensor::zeros(&[2, 4, 4, 1]), Mode::Train),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
