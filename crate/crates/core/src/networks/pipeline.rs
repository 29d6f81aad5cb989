//! Generator followed by extractor, with end-to-end backpropagation.

use rayon::prelude::*;

use super::{ExtractorNet, GeneratorNet};
use crate::error::{Error, Result};
use crate::layers::{Mode, ParamSlot, Parameterized};
use crate::tensor::Tensor;

/// Default number of images per inference chunk.
pub const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub generator: GeneratorNet,
    pub extractor: ExtractorNet,
    /// Incremented on every parameter update.
    version: u64,
    /// Parameter version the current train-mode caches were recorded at.
    cache_version: Option<u64>,
}

/// Embedding-space gradients for a batch of triplets, one row per triplet.
#[derive(Debug, Clone)]
pub struct TripletGrads {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

impl TripletGrads {
    pub fn scale(&self, factor: f64) -> Self {
        Self {
            anchor: self.anchor.scale(factor),
            positive: self.positive.scale(factor),
            negative: self.negative.scale(factor),
        }
    }
}

/// Row indices of one triplet's members within the forwarded image batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletRows {
    pub positive: usize,
    pub anchor: usize,
    pub negative: usize,
}

/// Named parameter gradients after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSnapshot {
    pub generator: Vec<(String, Tensor)>,
    /// `None` when the extractor is frozen.
    pub extractor: Option<Vec<(String, Tensor)>>,
}

fn snapshot(net: &mut impl Parameterized) -> Vec<(String, Tensor)> {
    net.params_mut()
        .into_iter()
        .map(|(name, p)| (name, p.grad.clone()))
        .collect()
}

impl Pipeline {
    pub fn new(generator: GeneratorNet, extractor: ExtractorNet) -> Self {
        Self {
            generator,
            extractor,
            version: 0,
            cache_version: None,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks parameters as changed; caches recorded earlier become stale.
    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Train-mode forward of one batch; records caches for [`Self::backward`].
    pub fn forward_train(&mut self, images: &Tensor) -> Result<Tensor> {
        self.cache_version = None;
        let generated = self.generator.forward(images, Mode::Train)?;
        let embeddings = self.extractor.forward(&generated, Mode::Train)?;
        self.cache_version = Some(self.version);
        Ok(embeddings)
    }

    /// Inference embedding of a single batch on shared parameters.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.extractor.infer(&self.generator.infer(images)?)
    }

    /// Generated images in inference mode.
    pub fn generate(&self, images: &Tensor) -> Result<Tensor> {
        self.generator.infer(images)
    }

    /// Inference embedding of a large set, processed in chunks.
    pub fn embed_chunked(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = images.batch();
        let chunk = chunk.max(1);
        let parts = (0..n.div_ceil(chunk))
            .into_par_iter()
            .map(|k| {
                let idx: Vec<usize> = (k * chunk..((k + 1) * chunk).min(n)).collect();
                self.embed(&images.select(&idx)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&parts)
    }

    /// Backpropagates per-row embedding gradients through both networks,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, grad_embeddings: &Tensor) -> Result<()> {
        match self.cache_version {
            Some(v) if v == self.version => {}
            Some(v) => {
                return Err(Error::StaleCache {
                    net: "pipeline".into(),
                    cached: v,
                    current: self.version,
                })
            }
            None => {
                return Err(Error::MissingCache {
                    layer: "pipeline".into(),
                })
            }
        }
        let grad_generated = self.extractor.backward(grad_embeddings)?;
        self.generator.backward(&grad_generated)?;
        Ok(())
    }

    pub fn clear_caches(&mut self) {
        self.generator.clear_caches();
        self.extractor.clear_caches();
        self.cache_version = None;
    }

    pub fn zero_grad(&mut self) {
        self.generator.zero_grad();
        self.extractor.zero_grad();
    }

    /// Parameters the optimizer should update: the generator always, the
    /// extractor only when trainable.
    pub fn trainable_params(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        self.generator.collect_params("generator", &mut out);
        if self.extractor.trainable {
            self.extractor.collect_params("extractor", &mut out);
        }
        out
    }
}

/// Scatters per-triplet gradients onto the rows of the forwarded batch and
/// backpropagates them; returns the resulting parameter gradients.
///
/// A row that plays several roles receives the sum of its role gradients.
pub fn pipeline_backward(
    pipeline: &mut Pipeline,
    rows: &[TripletRows],
    grads: &TripletGrads,
    batch_rows: usize,
) -> Result<GradSnapshot> {
    let dim = pipeline.extractor.embed_dim();
    let expected = [rows.len(), dim];
    for g in [&grads.anchor, &grads.positive, &grads.negative] {
        if g.shape() != expected {
            return Err(Error::shape("pipeline_backward", &expected, g.shape()));
        }
    }
    let mut grad_rows = Tensor::zeros(&[batch_rows, dim]);
    for (t, r) in rows.iter().enumerate() {
        for (row, g) in [
            (r.anchor, &grads.anchor),
            (r.positive, &grads.positive),
            (r.negative, &grads.negative),
        ] {
            if row >= batch_rows {
                return Err(Error::invalid(
                    "pipeline_backward",
                    format!("triplet {t} refers to row {row} of a {batch_rows}-row batch"),
                ));
            }
            for (d, s) in grad_rows.item_mut(row).iter_mut().zip(g.item(t)) {
                *d += s;
            }
        }
    }
    pipeline.backward(&grad_rows)?;
    Ok(GradSnapshot {
        generator: snapshot(&mut pipeline.generator),
        extractor: pipeline
            .extractor
            .trainable
            .then(|| snapshot(&mut pipeline.extractor)),
    })
}
