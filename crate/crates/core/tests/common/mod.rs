//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Written from the definitions, without calling the
//! library code they check.

#![allow(dead_code)]

use pad_core::layers::ConvLayer;
use pad_core::metrics::ScoreSet;
use pad_core::triplet::EmbeddingSet;
use pad_core::{Label, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct seven-loop convolution with zero padding.
pub fn naive_conv(input: &Tensor, layer: &ConvLayer) -> Tensor {
    let (n, h, w, c_in) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let ws = layer.weights.value.shape();
    let (kh, kw, c_out) = (ws[0], ws[1], ws[3]);
    let (s, p) = (layer.stride, layer.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    let weights = layer.weights.value.data();
    let x = input.data();
    let mut out = vec![0.0; n * oh * ow * c_out];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..c_out {
                    let mut acc = layer.bias.value.data()[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c_in {
                                let xi = ((b * h + iy as usize) * w + ix as usize) * c_in + ci;
                                let wi = ((ky * kw + kx) * c_in + ci) * c_out + co;
                                acc += x[xi] * weights[wi];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * c_out + co] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow, c_out], out).unwrap()
}

pub struct MiningOracle {
    pub anchor_id: usize,
    pub tau: f64,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

/// Exhaustive scan: centroid, nearest bona fide, the threshold rule, and the
/// hardest-eight fallback for an empty side. Ids come back sorted.
pub fn mine_by_scan(emb: &EmbeddingSet, multiplier: f64, fallback: usize) -> MiningOracle {
    let n = emb.labels.len();
    let dim = emb.vectors.shape()[1];
    let row = |r: usize| &emb.vectors.data()[r * dim..(r + 1) * dim];
    let bona: Vec<usize> = (0..n).filter(|&r| emb.labels[r] == Label::BonaFide).collect();
    let attacks: Vec<usize> = (0..n).filter(|&r| emb.labels[r] == Label::Attack).collect();
    let mut center = vec![0.0; dim];
    for &r in &bona {
        for k in 0..dim {
            center[k] += row(r)[k];
        }
    }
    for c in &mut center {
        *c /= bona.len() as f64;
    }
    let mut anchor = bona[0];
    for &r in &bona {
        let (dr, da) = (dist(row(r), &center), dist(row(anchor), &center));
        if dr < da || (dr == da && emb.ids[r] < emb.ids[anchor]) {
            anchor = r;
        }
    }
    let others: Vec<usize> = bona.iter().copied().filter(|&r| r != anchor).collect();
    let mut total = 0.0;
    for &r in &others {
        total += dist(row(r), row(anchor));
    }
    let tau = multiplier * total / others.len() as f64;
    let mut positives: Vec<usize> = others
        .iter()
        .filter(|&&r| dist(row(r), row(anchor)) > tau)
        .map(|&r| emb.ids[r])
        .collect();
    if positives.is_empty() {
        let mut ranked: Vec<(f64, usize)> = others.iter().map(|&r| (-dist(row(r), row(anchor)), emb.ids[r])).collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
        positives = ranked.iter().take(fallback).map(|x| x.1).collect();
    }
    let mut negatives: Vec<usize> = attacks
        .iter()
        .filter(|&&r| dist(row(r), row(anchor)) < tau)
        .map(|&r| emb.ids[r])
        .collect();
    if negatives.is_empty() {
        let mut ranked: Vec<(f64, usize)> = attacks.iter().map(|&r| (dist(row(r), row(anchor)), emb.ids[r])).collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
        negatives = ranked.iter().take(fallback).map(|x| x.1).collect();
    }
    positives.sort_unstable();
    negatives.sort_unstable();
    MiningOracle {
        anchor_id: emb.ids[anchor],
        tau,
        positives,
        negatives,
    }
}

/// Random embedding set with at least two bona-fide rows and one attack.
pub fn random_embeddings(seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..60);
    let dim = rng.random_range(1..8);
    let mut labels: Vec<Label> = (0..n)
        .map(|_| if rng.random_bool(0.5) { Label::BonaFide } else { Label::Attack })
        .collect();
    labels[0] = Label::BonaFide;
    labels[1] = Label::BonaFide;
    labels[2] = Label::Attack;
    let spread = rng.random_range(0.1..10.0);
    let vectors = Tensor::from_fn(&[n, dim], |_| rng.random_range(-spread..spread));
    let mut ids: Vec<usize> = (0..n).map(|i| i * 3 + 11).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    EmbeddingSet::new(vectors, labels, ids).unwrap()
}

/// Scans every distinct score, the midpoints between neighbours and both
/// infinities; FAR counts attacks at or above the threshold, FRR bona fide
/// below it. Returns the lowest threshold with the smallest |FAR - FRR|.
pub fn eer_by_scan(scores: &ScoreSet) -> (f64, f64) {
    let mut values: Vec<f64> = scores.entries.iter().map(|e| e.score).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
    candidates.extend(&values);
    for w in values.windows(2) {
        candidates.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best = (f64::NAN, f64::INFINITY, f64::NAN);
    for t in candidates {
        let (mut fa, mut na, mut fr, mut nb) = (0usize, 0usize, 0usize, 0usize);
        for e in &scores.entries {
            if e.label == Label::Attack {
                na += 1;
                fa += usize::from(e.score >= t);
            } else {
                nb += 1;
                fr += usize::from(e.score < t);
            }
        }
        let (far, frr) = (fa as f64 / na as f64, fr as f64 / nb as f64);
        if (far - frr).abs() < best.1 {
            best = (t, (far - frr).abs(), (far + frr) / 2.0);
        }
    }
    (best.0, best.2)
}

/// Random labelled scores with frequent ties; both classes present.
pub fn random_scores(seed: u64) -> ScoreSet {
    use pad_core::metrics::ScoreEntry;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..80);
    let resolution: f64 = [1.0, 10.0, 1000.0][rng.random_range(0..3)];
    let shift = rng.random_range(-1.0..1.0);
    let entries = (0..n)
        .map(|i| {
            let label = match i {
                0 => Label::BonaFide,
                1 => Label::Attack,
                _ if rng.random_bool(0.5) => Label::BonaFide,
                _ => Label::Attack,
            };
            let centre = if label == Label::BonaFide { shift } else { -shift };
            let score: f64 = ((centre + rng.random_range(-2.0..2.0)) * resolution).round() / resolution;
            let species = match label {
                Label::BonaFide => "bonafide",
                Label::Attack if rng.random_bool(0.5) => "print",
                Label::Attack => "replay",
            };
            ScoreEntry::new(score, label, species, None)
        })
        .collect();
    ScoreSet::new(entries)
}
