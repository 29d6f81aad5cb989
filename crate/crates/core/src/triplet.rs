//! Points-to-center triplet mining and the margin loss on embeddings.
//!
//! Mining fixes one anchor per epoch: the bona-fide sample closest to the
//! bona-fide centroid. Bona-fide samples farther than `tau` from it become
//! positives, attacks closer than `tau` become negatives, and the two lists
//! are zipped into triplets.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::networks::TripletGrads;
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 0.5;
pub const DEFAULT_TAU_MULTIPLIER: f64 = 5.0;
/// Size of the fallback set when the threshold rule selects nothing.
pub const FALLBACK_K: usize = 8;

/// Embeddings with per-row labels and stable sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Tensor,
    pub labels: Vec<Label>,
    pub ids: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, labels: Vec<Label>, ids: Vec<usize>) -> Result<Self> {
        vectors.expect_rank("EmbeddingSet::new", 2)?;
        let n = vectors.batch();
        if labels.len() != n || ids.len() != n {
            return Err(Error::invalid(
                "EmbeddingSet::new",
                format!("{n} vectors, {} labels, {} ids", labels.len(), ids.len()),
            ));
        }
        Ok(Self { vectors, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.item_len()
    }

    fn rows_of(&self, label: Label) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.labels[r] == label).collect()
    }

    pub fn row_of_id(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    pub fn vector_of_id(&self, id: usize) -> Option<&[f64]> {
        self.row_of_id(id).map(|r| self.vectors.item(r))
    }

    fn counts(&self) -> (usize, usize) {
        let bona = self.labels.iter().filter(|l| l.is_bona_fide()).count();
        (bona, self.len() - bona)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub positive: usize,
    pub anchor: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub anchor_id: usize,
    pub center: Vec<f64>,
    pub tau: f64,
    pub positive_ids: Vec<usize>,
    pub negative_ids: Vec<usize>,
    pub triplets: Vec<Triplet>,
    pub positive_fallback: bool,
    pub negative_fallback: bool,
}

impl fmt::Display for MiningResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "anchor={} tau={} positives={} negatives={} triplets={} fallback_pos={} fallback_neg={}",
            self.anchor_id,
            self.tau,
            self.positive_ids.len(),
            self.negative_ids.len(),
            self.triplets.len(),
            self.positive_fallback,
            self.negative_fallback
        )
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mining_error(emb: &EmbeddingSet, reason: impl Into<String>) -> Error {
    let (bona_fide, attacks) = emb.counts();
    Error::Mining {
        reason: reason.into(),
        bona_fide,
        attacks,
    }
}

/// Mean of the bona-fide vectors.
pub fn feature_center(emb: &EmbeddingSet) -> Result<Vec<f64>> {
    let rows = emb.rows_of(Label::BonaFide);
    if rows.is_empty() {
        return Err(mining_error(emb, "no bona-fide rows"));
    }
    let mut center = vec![0.0; emb.dim()];
    for &r in &rows {
        for (c, v) in center.iter_mut().zip(emb.vectors.item(r)) {
            *c += v;
        }
    }
    let m = rows.len() as f64;
    center.iter_mut().for_each(|c| *c /= m);
    Ok(center)
}

/// Id of the bona-fide row nearest to `center`; ties go to the smallest id.
pub fn select_anchor(emb: &EmbeddingSet, center: &[f64]) -> Result<usize> {
    emb.rows_of(Label::BonaFide)
        .into_iter()
        .map(|r| (euclidean(emb.vectors.item(r), center), emb.ids[r]))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, id)| id)
        .ok_or_else(|| mining_error(emb, "no bona-fide rows"))
}

/// Zips the two lists, cycling the shorter one.
fn zip_cycled(anchor: usize, positives: &[usize], negatives: &[usize]) -> Vec<Triplet> {
    let count = positives.len().max(negatives.len());
    (0..count)
        .map(|p| Triplet {
            positive: positives[p % positives.len()],
            anchor,
            negative: negatives[p % negatives.len()],
        })
        .collect()
}

/// Applies the threshold rule around `anchor_id`, falling back to the
/// hardest `FALLBACK_K` samples of a class whose set comes out empty.
pub fn mine_pairs(emb: &EmbeddingSet, anchor_id: usize, tau_multiplier: f64) -> Result<MiningResult> {
    let (bona, attacks) = emb.counts();
    if bona < 2 || attacks < 1 {
        return Err(mining_error(emb, "need at least 2 bona-fide and 1 attack rows"));
    }
    if !(tau_multiplier >= 0.0 && tau_multiplier.is_finite()) {
        return Err(Error::invalid("mine_pairs", format!("tau multiplier {tau_multiplier}")));
    }
    let anchor_row = emb
        .row_of_id(anchor_id)
        .filter(|&r| emb.labels[r].is_bona_fide())
        .ok_or_else(|| mining_error(emb, format!("anchor {anchor_id} is not a bona-fide id")))?;
    let anchor = emb.vectors.item(anchor_row);
    let dist = |r: usize| euclidean(emb.vectors.item(r), anchor);

    let others: Vec<(usize, f64)> = emb
        .rows_of(Label::BonaFide)
        .into_iter()
        .filter(|&r| r != anchor_row)
        .map(|r| (r, dist(r)))
        .collect();
    let attack_rows: Vec<(usize, f64)> = emb.rows_of(Label::Attack).into_iter().map(|r| (r, dist(r))).collect();
    let tau = tau_multiplier * others.iter().map(|(_, d)| d).sum::<f64>() / others.len() as f64;

    let mut positive_ids: Vec<usize> = others.iter().filter(|(_, d)| *d > tau).map(|&(r, _)| emb.ids[r]).collect();
    let positive_fallback = positive_ids.is_empty();
    if positive_fallback {
        let mut sorted = others.clone();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(emb.ids[a.0].cmp(&emb.ids[b.0])));
        positive_ids = sorted.iter().take(FALLBACK_K).map(|&(r, _)| emb.ids[r]).collect();
    }
    let mut negative_ids: Vec<usize> = attack_rows.iter().filter(|(_, d)| *d < tau).map(|&(r, _)| emb.ids[r]).collect();
    let negative_fallback = negative_ids.is_empty();
    if negative_fallback {
        let mut sorted = attack_rows.clone();
        sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(emb.ids[a.0].cmp(&emb.ids[b.0])));
        negative_ids = sorted.iter().take(FALLBACK_K).map(|&(r, _)| emb.ids[r]).collect();
    }
    if positive_ids.is_empty() || negative_ids.is_empty() {
        return Err(mining_error(emb, "empty positive or negative set after fallback"));
    }
    Ok(MiningResult {
        anchor_id,
        center: Vec::new(),
        tau,
        triplets: zip_cycled(anchor_id, &positive_ids, &negative_ids),
        positive_ids,
        negative_ids,
        positive_fallback,
        negative_fallback,
    })
}

/// Center, anchor and threshold mining in one call.
pub fn mine_points_to_center(emb: &EmbeddingSet, tau_multiplier: f64) -> Result<MiningResult> {
    let center = feature_center(emb)?;
    let anchor = select_anchor(emb, &center)?;
    let mut result = mine_pairs(emb, anchor, tau_multiplier)?;
    result.center = center;
    Ok(result)
}

/// Uniformly random triplets: bona-fide anchor and positive, attack negative.
///
/// The positive differs from the anchor whenever a second bona-fide row
/// exists. Center, anchor id and `tau` are filled in as points-to-center
/// mining would compute them but play no part in the draw.
pub fn random_combination_baseline(
    emb: &EmbeddingSet,
    count: usize,
    tau_multiplier: f64,
    seed: u64,
) -> Result<MiningResult> {
    let bona = emb.rows_of(Label::BonaFide);
    let attacks = emb.rows_of(Label::Attack);
    if bona.is_empty() || attacks.is_empty() {
        return Err(mining_error(emb, "need at least one row of each class"));
    }
    let center = feature_center(emb)?;
    let anchor_id = select_anchor(emb, &center)?;
    let tau = if bona.len() >= 2 {
        mine_pairs(emb, anchor_id, tau_multiplier)?.tau
    } else {
        0.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::with_capacity(count);
    for _ in 0..count {
        let a = *bona.choose(&mut rng).expect("non-empty");
        let p = loop {
            let p = *bona.choose(&mut rng).expect("non-empty");
            if p != a || bona.len() == 1 {
                break p;
            }
        };
        let n = *attacks.choose(&mut rng).expect("non-empty");
        triplets.push(Triplet {
            positive: emb.ids[p],
            anchor: emb.ids[a],
            negative: emb.ids[n],
        });
    }
    let mut positive_ids: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let mut negative_ids: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    for ids in [&mut positive_ids, &mut negative_ids] {
        ids.sort_unstable();
        ids.dedup();
    }
    Ok(MiningResult {
        anchor_id,
        center,
        tau,
        positive_ids,
        negative_ids,
        triplets,
        positive_fallback: false,
        negative_fallback: false,
    })
}

/// Which margin loss to apply to the triplet difference `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossForm {
    /// `max(d, gamma)`: floor at the margin, active when `d > gamma`.
    #[default]
    Paper,
    /// `max(d + gamma, 0)`: active when `d > -gamma`.
    Hinge,
}

impl LossForm {
    pub fn term(self, d: f64, gamma: f64) -> (f64, bool) {
        match self {
            LossForm::Paper => (d.max(gamma), d > gamma),
            LossForm::Hinge => ((d + gamma).max(0.0), d + gamma > 0.0),
        }
    }

    /// Smallest value a single term can take.
    pub fn floor(self, gamma: f64) -> f64 {
        match self {
            LossForm::Paper => gamma,
            LossForm::Hinge => 0.0,
        }
    }
}

impl fmt::Display for LossForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossForm::Paper => "paper",
            LossForm::Hinge => "hinge",
        })
    }
}

impl FromStr for LossForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "paper" => Ok(LossForm::Paper),
            "hinge" => Ok(LossForm::Hinge),
            other => Err(Error::Config(format!("unknown loss form {other:?} (paper | hinge)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossOut {
    pub loss: f64,
    pub per_triplet_d: Vec<f64>,
    pub active_mask: Vec<bool>,
}

impl TripletLossOut {
    pub fn mean_d(&self) -> f64 {
        self.per_triplet_d.iter().sum::<f64>() / self.per_triplet_d.len() as f64
    }

    pub fn active_count(&self) -> usize {
        self.active_mask.iter().filter(|&&a| a).count()
    }
}

fn check_triplet_inputs(op: &'static str, anchors: &Tensor, positives: &Tensor, negatives: &Tensor) -> Result<()> {
    positives.expect_rank(op, 2)?;
    if positives.batch() == 0 {
        return Err(Error::invalid(op, "no triplets"));
    }
    for t in [anchors, negatives] {
        if t.shape() != positives.shape() {
            return Err(Error::shape(op, positives.shape(), t.shape()));
        }
    }
    Ok(())
}

/// `d = |a - pos|^2 - |a - neg|^2` per triplet, then the mean margin loss.
///
/// All three tensors are `(P, dim)`; row `p` of each forms one triplet.
pub fn triplet_loss(
    anchors: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    gamma: f64,
    form: LossForm,
) -> Result<TripletLossOut> {
    check_triplet_inputs("triplet_loss", anchors, positives, negatives)?;
    let count = positives.batch();
    // Averaging excesses over the floor keeps the mean at or above it.
    let floor = form.floor(gamma);
    let mut total = 0.0;
    let mut per_triplet_d = Vec::with_capacity(count);
    let mut active_mask = Vec::with_capacity(count);
    for p in 0..count {
        let a = anchors.item(p);
        let d = squared_distance(a, positives.item(p)) - squared_distance(a, negatives.item(p));
        let (term, active) = form.term(d, gamma);
        total += term - floor;
        per_triplet_d.push(d);
        active_mask.push(active);
    }
    Ok(TripletLossOut {
        loss: floor + total / count as f64,
        per_triplet_d,
        active_mask,
    })
}

/// Gradient of [`triplet_loss`] with respect to every embedding row.
pub fn triplet_loss_grad(
    anchors: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    gamma: f64,
    form: LossForm,
) -> Result<(TripletLossOut, TripletGrads)> {
    let out = triplet_loss(anchors, positives, negatives, gamma, form)?;
    let shape = positives.shape();
    let mut grads = TripletGrads {
        anchor: Tensor::zeros(shape),
        positive: Tensor::zeros(shape),
        negative: Tensor::zeros(shape),
    };
    let scale = 2.0 / positives.batch() as f64;
    for (p, _) in out.active_mask.iter().enumerate().filter(|(_, &a)| a) {
        let (a, pos, neg) = (anchors.item(p), positives.item(p), negatives.item(p));
        let ga = grads.anchor.item_mut(p);
        for k in 0..a.len() {
            ga[k] = scale * (neg[k] - pos[k]);
        }
        let gp = grads.positive.item_mut(p);
        for k in 0..a.len() {
            gp[k] = -scale * (a[k] - pos[k]);
        }
        let gn = grads.negative.item_mut(p);
        for k in 0..a.len() {
            gn[k] = scale * (a[k] - neg[k]);
        }
    }
    Ok((out, grads))
}
