//! The training loop: embed, mine, then SGD over shuffled triplet batches.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Miner, RunConfig};
use super::dataset::{Dataset, Split};
use super::{sub_seed, stream};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::layers::{ParamSlot, Parameterized};
use crate::networks::{pipeline_backward, ExtractorNet, GeneratorNet, Pipeline, TripletRows, INFER_CHUNK};
use crate::optim::SgdState;
use crate::tensor::Tensor;
use crate::triplet::{
    euclidean, mine_points_to_center, random_combination_baseline, triplet_loss_grad, EmbeddingSet, MiningResult,
    Triplet,
};

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_d: f64,
    pub active_fraction: f64,
    pub triplets: usize,
    pub positives: usize,
    pub negatives: usize,
    pub tau: f64,
    pub anchor_id: usize,
    pub positive_fallback: bool,
    pub negative_fallback: bool,
    /// Separation of the embeddings the epoch was mined on.
    pub separation: f64,
    /// Batches whose triplets were all inactive, so no backward pass ran.
    pub idle_batches: usize,
    /// Mean gradient norm before clipping.
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pipeline: Pipeline,
    pub epochs: Vec<EpochLog>,
    /// Hash of the parameter values before the first update.
    pub initial_fingerprint: u64,
    /// Separation of the train embeddings after the last epoch.
    pub final_separation: f64,
}

impl TrainOutcome {
    pub fn initial_separation(&self) -> f64 {
        self.epochs.first().map_or(self.final_separation, |e| e.separation)
    }
}

/// Fresh generator and extractor seeded from the run seed.
pub fn build_pipeline(config: &RunConfig) -> Result<Pipeline> {
    let generator = GeneratorNet::new(config.generator_config(), sub_seed(config.seed, stream::GENERATOR))?;
    let mut extractor = ExtractorNet::new(
        config.extractor_config(),
        (config.image_size, config.image_size),
        sub_seed(config.seed, stream::EXTRACTOR),
    )?;
    extractor.trainable = !config.extractor_frozen;
    Ok(Pipeline::new(generator, extractor))
}

/// Hash of every parameter value, in declaration order.
pub fn fingerprint(pipeline: &mut Pipeline) -> u64 {
    let mut hasher = DefaultHasher::new();
    for (name, p) in pipeline
        .generator
        .params_mut()
        .into_iter()
        .chain(pipeline.extractor.params_mut())
    {
        name.hash(&mut hasher);
        p.value.data().iter().for_each(|v| v.to_bits().hash(&mut hasher));
    }
    hasher.finish()
}

/// Mean bona-fide/attack distance minus mean distance between distinct
/// bona-fide rows.
pub fn separation(emb: &EmbeddingSet) -> f64 {
    let rows = |label| -> Vec<&[f64]> {
        (0..emb.len())
            .filter(|&r| emb.labels[r] == label)
            .map(|r| emb.vectors.item(r))
            .collect()
    };
    let (bona, attacks) = (rows(Label::BonaFide), rows(Label::Attack));
    let mut inter = 0.0;
    for b in &bona {
        inter += attacks.iter().map(|a| euclidean(a, b)).sum::<f64>();
    }
    let mut intra = 0.0;
    for (i, b) in bona.iter().enumerate() {
        intra += bona[i + 1..].iter().map(|o| euclidean(o, b)).sum::<f64>();
    }
    let pairs = bona.len() * bona.len().saturating_sub(1) / 2;
    inter / (bona.len() * attacks.len()).max(1) as f64 - intra / pairs.max(1) as f64
}

pub fn embed_split(pipeline: &Pipeline, split: &Split) -> Result<EmbeddingSet> {
    let vectors = pipeline.embed_chunked(&split.images()?, INFER_CHUNK)?;
    EmbeddingSet::new(vectors, split.labels(), split.ids())
}

fn mine(config: &RunConfig, emb: &EmbeddingSet, epoch: usize) -> Result<MiningResult> {
    let p2c = mine_points_to_center(emb, config.tau_multiplier)?;
    match config.miner {
        Miner::P2c => Ok(p2c),
        Miner::Rc => random_combination_baseline(
            emb,
            p2c.triplets.len(),
            config.tau_multiplier,
            sub_seed(config.seed, stream::RANDOM_COMBINATION + epoch as u64),
        ),
    }
}

/// Unique images of a batch of triplets and each triplet's rows among them.
fn gather(batch: &[Triplet], images: &Tensor, row_of_id: &BTreeMap<usize, usize>) -> Result<(Tensor, Vec<TripletRows>)> {
    let mut ids: Vec<usize> = batch.iter().flat_map(|t| [t.positive, t.anchor, t.negative]).collect();
    ids.sort_unstable();
    ids.dedup();
    let pos = |id: usize| ids.binary_search(&id).expect("gathered id");
    let rows = batch
        .iter()
        .map(|t| TripletRows {
            positive: pos(t.positive),
            anchor: pos(t.anchor),
            negative: pos(t.negative),
        })
        .collect();
    let source: Vec<usize> = ids.iter().map(|id| row_of_id[id]).collect();
    Ok((images.select(&source)?, rows))
}

fn select_rows(embeddings: &Tensor, rows: &[TripletRows], pick: impl Fn(&TripletRows) -> usize) -> Result<Tensor> {
    embeddings.select(&rows.iter().map(pick).collect::<Vec<_>>())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`
/// (0 disables); returns the norm before rescaling.
pub fn clip_grad_norm(params: &mut [ParamSlot<'_>], max_norm: f64) -> f64 {
    let norm = params.iter().map(|(_, p)| p.grad.sum_squares()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, p) in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Trains `pipeline` in place on the train split.
pub fn train_pipeline(config: &RunConfig, pipeline: &mut Pipeline, train: &Split) -> Result<Vec<EpochLog>> {
    let images = train.images()?;
    let row_of_id: BTreeMap<usize, usize> = train.ids().into_iter().enumerate().map(|(r, id)| (id, r)).collect();
    let mut sgd = SgdState::new(config.lr, config.momentum, config.weight_decay, config.damping);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let emb = embed_split(pipeline, train)?;
        let mined = mine(config, &emb, epoch)?;
        let mut order = mined.triplets.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, stream::BATCH_ORDER + epoch as u64)));

        let (mut loss_sum, mut d_sum, mut active, mut idle, mut grad_norm_sum) = (0.0, 0.0, 0, 0, 0.0);
        for (b, batch) in order.chunks(config.batch_triplets).enumerate() {
            let (batch_images, rows) = gather(batch, &images, &row_of_id)?;
            pipeline.zero_grad();
            let out = pipeline.forward_train(&batch_images)?;
            let (loss, grads) = triplet_loss_grad(
                &select_rows(&out, &rows, |r| r.anchor)?,
                &select_rows(&out, &rows, |r| r.positive)?,
                &select_rows(&out, &rows, |r| r.negative)?,
                config.gamma,
                config.loss_form,
            )?;
            log::debug!(
                "epoch {epoch} batch {b}: images={} loss={:.6e} active={}",
                batch_images.batch(),
                loss.loss,
                loss.active_count()
            );
            if !loss.loss.is_finite() || loss.per_triplet_d.iter().any(|d| !d.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            if loss.active_count() > 0 {
                pipeline_backward(pipeline, &rows, &grads, batch_images.batch())?;
            } else {
                idle += 1;
            }
            let mut params = pipeline.trainable_params();
            let norm = clip_grad_norm(&mut params, config.max_grad_norm);
            sgd.step(&mut params)?;
            drop(params);
            grad_norm_sum += norm;
            pipeline.bump_version();
            pipeline.clear_caches();
            loss_sum += loss.loss * batch.len() as f64;
            d_sum += loss.per_triplet_d.iter().sum::<f64>();
            active += loss.active_count();
        }
        let count = mined.triplets.len();
        let entry = EpochLog {
            epoch,
            lr: sgd.lr,
            loss: loss_sum / count as f64,
            mean_d: d_sum / count as f64,
            active_fraction: active as f64 / count as f64,
            triplets: count,
            positives: mined.positive_ids.len(),
            negatives: mined.negative_ids.len(),
            tau: mined.tau,
            anchor_id: mined.anchor_id,
            positive_fallback: mined.positive_fallback,
            negative_fallback: mined.negative_fallback,
            separation: separation(&emb),
            idle_batches: idle,
            mean_grad_norm: grad_norm_sum / order.len().div_ceil(config.batch_triplets).max(1) as f64,
        };
        log::info!(
            "epoch {epoch}: lr={} loss={:.6} mean_d={:.6} active={:.3} sep={:.6} grad={:.3e} {mined}",
            entry.lr,
            entry.loss,
            entry.mean_d,
            entry.active_fraction,
            entry.separation,
            entry.mean_grad_norm
        );
        logs.push(entry);
        sgd.end_epoch();
    }
    Ok(logs)
}

/// Builds fresh networks from `config` and trains them on the train split.
pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    for label in [Label::BonaFide, Label::Attack] {
        if !data.train.records.iter().any(|r| r.label == label) {
            return Err(Error::invalid("train", format!("train split has no {label} samples")));
        }
    }
    let mut pipeline = build_pipeline(config)?;
    let initial_fingerprint = fingerprint(&mut pipeline);
    log::info!("initial weights fingerprint {initial_fingerprint:016x}");
    let epochs = train_pipeline(config, &mut pipeline, &data.train)?;
    let final_separation = separation(&embed_split(&pipeline, &data.train)?);
    log::info!("final separation {final_separation:.6}");
    Ok(TrainOutcome {
        pipeline,
        epochs,
        initial_fingerprint,
        final_separation,
    })
}

pub fn write_epoch_log(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for e in epochs {
        writer.serialize(e)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::from)
}
