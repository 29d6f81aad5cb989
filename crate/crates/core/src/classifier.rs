//! Linear soft-margin SVM on embeddings, trained by dual coordinate descent.
//!
//! The bias is learned as the weight of an extra constant feature whose value
//! is the largest training-vector norm, so the model is exactly covariant
//! under a joint rescaling of inputs and `C`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::Label;
use crate::tensor::Tensor;

pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_C_GRID: [f64; 3] = [0.1, 1.0, 10.0];
pub const TOLERANCE: f64 = 1e-4;
pub const MAX_EPOCHS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub weights: Tensor,
    pub bias: f64,
    pub c_param: f64,
    /// Value of the constant feature that carries the bias.
    pub bias_feature: f64,
    pub epochs: usize,
    pub converged: bool,
    /// Dual objective after each epoch.
    pub objective_history: Vec<f64>,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `1/2 |w|^2 + 1/2 (b / B)^2 + C * sum(hinge)`, the problem actually solved.
    pub fn primal_objective(&self, embeddings: &Tensor, labels: &[Label]) -> Result<f64> {
        let scores = svm_score(self, embeddings)?;
        let b = self.bias / self.bias_feature;
        let reg = 0.5 * (self.weights.sum_squares() + b * b);
        let hinge: f64 = scores
            .iter()
            .zip(labels)
            .map(|(s, l)| (1.0 - l.sign() * s).max(0.0))
            .sum();
        Ok(reg + self.c_param * hinge)
    }
}

fn check_training_set(embeddings: &Tensor, labels: &[Label]) -> Result<()> {
    embeddings.expect_rank("svm_train", 2)?;
    if labels.len() != embeddings.batch() {
        return Err(Error::invalid(
            "svm_train",
            format!("{} labels for {} embeddings", labels.len(), embeddings.batch()),
        ));
    }
    let bona = labels.iter().filter(|l| l.is_bona_fide()).count();
    if bona == 0 || bona == labels.len() {
        return Err(Error::invalid("svm_train", "training set must contain both classes"));
    }
    Ok(())
}

/// Minimizes `1/2 |w|^2 + C * sum(hinge(y (w.x + b)))`.
///
/// Coordinates are visited in one seeded permutation, repeated every epoch,
/// until the largest projected-gradient violation falls under [`TOLERANCE`]
/// or [`MAX_EPOCHS`] pass.
pub fn svm_train(embeddings: &Tensor, labels: &[Label], c_param: f64, seed: u64) -> Result<SvmModel> {
    check_training_set(embeddings, labels)?;
    if !(c_param > 0.0 && c_param.is_finite()) {
        return Err(Error::invalid("svm_train", format!("C must be positive, got {c_param}")));
    }
    if !embeddings.all_finite() {
        return Err(Error::invalid("svm_train", "non-finite embedding"));
    }
    let (n, dim) = (embeddings.batch(), embeddings.item_len());
    let norm = (0..n)
        .map(|i| embeddings.item(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let bias_feature = if norm > 0.0 { norm } else { 1.0 };
    let sq_norms: Vec<f64> = (0..n)
        .map(|i| embeddings.item(i).iter().map(|v| v * v).sum::<f64>() + bias_feature * bias_feature)
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; dim];
    let mut w_bias = 0.0;
    let mut history = Vec::new();
    let mut converged = false;
    let mut epochs = 0;
    while epochs < MAX_EPOCHS {
        epochs += 1;
        let mut max_violation: f64 = 0.0;
        for &i in &order {
            let x = embeddings.item(i);
            let y = labels[i].sign();
            let margin = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w_bias * bias_feature;
            let g = y * margin - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c_param {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let updated = (alpha[i] - g / sq_norms[i]).clamp(0.0, c_param);
                let step = (updated - alpha[i]) * y;
                alpha[i] = updated;
                for (wk, xk) in w.iter_mut().zip(x) {
                    *wk += step * xk;
                }
                w_bias += step * bias_feature;
            }
        }
        let reg = w.iter().map(|v| v * v).sum::<f64>() + w_bias * w_bias;
        history.push(0.5 * reg - alpha.iter().sum::<f64>());
        if max_violation < TOLERANCE {
            converged = true;
            break;
        }
    }
    Ok(SvmModel {
        weights: Tensor::new(vec![dim], w)?,
        bias: w_bias * bias_feature,
        c_param,
        bias_feature,
        epochs,
        converged,
        objective_history: history,
    })
}

/// `w.x + b` per row; higher means more bona fide.
pub fn svm_score(model: &SvmModel, embeddings: &Tensor) -> Result<Vec<f64>> {
    embeddings.expect_rank("svm_score", 2)?;
    if embeddings.item_len() != model.dim() {
        return Err(Error::shape(
            "svm_score",
            &[embeddings.batch(), model.dim()],
            embeddings.shape(),
        ));
    }
    Ok((0..embeddings.batch())
        .map(|i| {
            let x = embeddings.item(i);
            x.iter().zip(model.weights.data()).map(|(a, b)| a * b).sum::<f64>() + model.bias
        })
        .collect())
}

/// Per-dimension zero-mean, unit-variance transform fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Dimensions with zero spread keep unit scale.
    pub fn fit(embeddings: &Tensor) -> Result<Self> {
        embeddings.expect_rank("Standardizer::fit", 2)?;
        let (n, dim) = (embeddings.batch() as f64, embeddings.item_len());
        let mut mean = vec![0.0; dim];
        for i in 0..embeddings.batch() {
            for (m, v) in mean.iter_mut().zip(embeddings.item(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for i in 0..embeddings.batch() {
            for ((s, v), m) in var.iter_mut().zip(embeddings.item(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, embeddings: &Tensor) -> Result<Tensor> {
        embeddings.expect_rank("Standardizer::apply", 2)?;
        if embeddings.item_len() != self.dim() {
            return Err(Error::shape(
                "Standardizer::apply",
                &[embeddings.batch(), self.dim()],
                embeddings.shape(),
            ));
        }
        let mut out = embeddings.clone();
        for row in out.data_mut().chunks_mut(self.dim()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Standardization followed by a linear SVM.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub standardizer: Standardizer,
    pub svm: SvmModel,
}

impl Classifier {
    pub fn train(embeddings: &Tensor, labels: &[Label], c_param: f64, seed: u64) -> Result<Self> {
        let standardizer = Standardizer::fit(embeddings)?;
        let svm = svm_train(&standardizer.apply(embeddings)?, labels, c_param, seed)?;
        Ok(Self { standardizer, svm })
    }

    pub fn score(&self, embeddings: &Tensor) -> Result<Vec<f64>> {
        svm_score(&self.svm, &self.standardizer.apply(embeddings)?)
    }
}
