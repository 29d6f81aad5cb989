//! Scoring a trained pipeline: SVM per grid value, selection on dev ACER,
//! then the dev-threshold report on test.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{Dataset, Split};
use super::train::embed_split;
use super::{stream, sub_seed};
use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::metrics::{eer_threshold, evaluate, group_aggregate, write_scores, EvalReport, ScoreEntry, ScoreSet};
use crate::networks::Pipeline;
use crate::triplet::EmbeddingSet;

pub const DEV_SCORES: &str = "dev_scores.tsv";
pub const TEST_SCORES: &str = "test_scores.tsv";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_KV: &str = "report.kv";
pub const C_GRID_CSV: &str = "svm_grid.csv";

/// Dev-set result of one SVM regularization value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub c: f64,
    pub dev_acer: f64,
    pub dev_eer: f64,
    pub svm_epochs: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Equal error rate of the test scores on their own.
    pub test_eer: f64,
    pub dev_scores: ScoreSet,
    pub test_scores: ScoreSet,
    pub classifier: Classifier,
    pub grid: Vec<GridRow>,
}

impl Evaluation {
    pub fn selected_c(&self) -> f64 {
        self.classifier.svm.c_param
    }
}

pub fn score_set(split: &Split, scores: &[f64]) -> ScoreSet {
    ScoreSet::new(
        split
            .records
            .iter()
            .zip(scores)
            .map(|(r, &s)| ScoreEntry::new(s, r.label, r.species.clone(), r.group.clone()))
            .collect(),
    )
}

fn aggregated(config: &RunConfig, scores: ScoreSet) -> Result<ScoreSet> {
    match config.aggregate {
        Some(rule) => group_aggregate(&scores, rule),
        None => Ok(scores),
    }
}

/// Fits a classifier per grid value on train embeddings and keeps the one
/// with the lowest dev ACER; ties go to the earlier grid entry.
pub fn select_classifier(
    config: &RunConfig,
    train: &EmbeddingSet,
    dev: &EmbeddingSet,
    dev_split: &Split,
) -> Result<(Classifier, Vec<GridRow>)> {
    let mut best: Option<(f64, Classifier)> = None;
    let mut grid = Vec::with_capacity(config.svm_c_grid.len());
    for &c in &config.svm_c_grid {
        let classifier = Classifier::train(&train.vectors, &train.labels, c, sub_seed(config.seed, stream::SVM))?;
        let scores = aggregated(config, score_set(dev_split, &classifier.score(&dev.vectors)?))?;
        let report = evaluate(&scores, &scores, config.apcer_variant)?;
        log::info!("svm C={c}: dev acer={:.6} eer={:.6}", report.acer, report.eer);
        grid.push(GridRow {
            c,
            dev_acer: report.acer,
            dev_eer: report.eer,
            svm_epochs: classifier.svm.epochs,
            converged: classifier.svm.converged,
        });
        if best.as_ref().is_none_or(|(acer, _)| report.acer < *acer) {
            best = Some((report.acer, classifier));
        }
    }
    let (_, classifier) = best.ok_or_else(|| Error::Config("svm_c_grid is empty".into()))?;
    Ok((classifier, grid))
}

pub fn evaluate_pipeline(config: &RunConfig, pipeline: &Pipeline, data: &Dataset) -> Result<Evaluation> {
    let train = embed_split(pipeline, &data.train)?;
    let dev = embed_split(pipeline, &data.dev)?;
    let test = embed_split(pipeline, &data.test)?;
    let (classifier, grid) = select_classifier(config, &train, &dev, &data.dev)?;
    score_with(config, classifier, grid, &dev, &test, data)
}

/// Scores dev and test with a fixed classifier.
pub fn evaluate_with_classifier(
    config: &RunConfig,
    pipeline: &Pipeline,
    classifier: Classifier,
    data: &Dataset,
) -> Result<Evaluation> {
    let dev = embed_split(pipeline, &data.dev)?;
    let test = embed_split(pipeline, &data.test)?;
    score_with(config, classifier, Vec::new(), &dev, &test, data)
}

fn score_with(
    config: &RunConfig,
    classifier: Classifier,
    grid: Vec<GridRow>,
    dev: &EmbeddingSet,
    test: &EmbeddingSet,
    data: &Dataset,
) -> Result<Evaluation> {
    let dev_scores = aggregated(config, score_set(&data.dev, &classifier.score(&dev.vectors)?))?;
    let test_scores = aggregated(config, score_set(&data.test, &classifier.score(&test.vectors)?))?;
    let report = evaluate(&dev_scores, &test_scores, config.apcer_variant)?;
    let (_, test_eer) = eer_threshold(&test_scores)?;
    log::info!(
        "C={}: acer={:.6} hter={:.6} dev eer={:.6} test eer={test_eer:.6}",
        classifier.svm.c_param,
        report.acer,
        report.hter,
        report.eer
    );
    Ok(Evaluation {
        report,
        test_eer,
        dev_scores,
        test_scores,
        classifier,
        grid,
    })
}

/// Score files, text and key-value reports, and the grid table.
pub fn write_evaluation(dir: &Path, evaluation: &Evaluation) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_scores(&dir.join(DEV_SCORES), &evaluation.dev_scores)?;
    write_scores(&dir.join(TEST_SCORES), &evaluation.test_scores)?;
    let mut text = evaluation.report.to_text();
    text.push_str(&format!("test EER    {:.6}\nSVM C       {}\n", evaluation.test_eer, evaluation.selected_c()));
    std::fs::write(dir.join(REPORT_TEXT), text)?;
    std::fs::write(dir.join(REPORT_KV), evaluation.report.to_key_values())?;
    if !evaluation.grid.is_empty() {
        let mut writer = csv::Writer::from_path(dir.join(C_GRID_CSV))?;
        for row in &evaluation.grid {
            writer.serialize(row)?;
        }
        writer.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::SplitCounts;
    use crate::harness::dataset::synth_dataset;
    use crate::harness::train::build_pipeline;
    use crate::metrics::{read_scores, AggregateRule};

    fn tiny() -> (RunConfig, Dataset) {
        let config = RunConfig {
            image_size: 8,
            generator_channels: 4,
            generator_blocks: 1,
            extractor_channels: vec![4, 4],
            embed_dim: 4,
            ..Default::default()
        };
        (config, synth_dataset([SplitCounts::balanced(24); 3], 8, 2).unwrap())
    }

    #[test]
    fn repeated_evaluation_is_identical() {
        let (config, data) = tiny();
        let pipeline = build_pipeline(&config).unwrap();
        let a = evaluate_pipeline(&config, &pipeline, &data).unwrap();
        let b = evaluate_pipeline(&config, &pipeline, &data).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.grid.len(), config.svm_c_grid.len());
        let best = a.grid.iter().map(|g| g.dev_acer).fold(f64::INFINITY, f64::min);
        let first = a.grid.iter().find(|g| g.dev_acer == best).unwrap();
        assert_eq!(a.selected_c(), first.c);
    }

    #[test]
    fn written_scores_parse_back() {
        let (config, data) = tiny();
        let pipeline = build_pipeline(&config).unwrap();
        let eval = evaluate_pipeline(&config, &pipeline, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_evaluation(dir.path(), &eval).unwrap();
        assert_eq!(read_scores(&dir.path().join(TEST_SCORES)).unwrap(), eval.test_scores);
        let kv = std::fs::read_to_string(dir.path().join(REPORT_KV)).unwrap();
        assert_eq!(EvalReport::from_key_values(&kv).unwrap(), eval.report);
    }

    #[test]
    fn fixed_classifier_reproduces_report() {
        let (config, data) = tiny();
        let pipeline = build_pipeline(&config).unwrap();
        let eval = evaluate_pipeline(&config, &pipeline, &data).unwrap();
        let again = evaluate_with_classifier(&config, &pipeline, eval.classifier.clone(), &data).unwrap();
        assert_eq!(again.report, eval.report);
    }

    #[test]
    fn aggregation_reduces_to_groups() {
        let (mut config, data) = tiny();
        config.aggregate = Some(AggregateRule::Mean);
        let pipeline = build_pipeline(&config).unwrap();
        let eval = evaluate_pipeline(&config, &pipeline, &data).unwrap();
        let mut groups: Vec<_> = data.test.records.iter().map(|r| r.group.clone()).collect();
        groups.sort();
        groups.dedup();
        assert_eq!(eval.test_scores.len(), groups.len());
    }
}
