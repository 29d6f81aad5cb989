//! Paired runs: margin sweep and miner comparison.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Miner, RunConfig};
use super::dataset::Dataset;
use super::evaluate::{evaluate_pipeline, Evaluation};
use super::train::{train, TrainOutcome};
use crate::error::Result;

/// Margin values of the reference sweep.
pub const SWEEP_GAMMAS: [f64; 4] = [0.1, 0.5, 1.0, 5.0];
/// Slack allowed when checking that center mining is no worse than random.
pub const MINER_SLACK: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub training: TrainOutcome,
    pub evaluation: Evaluation,
}

/// Train then evaluate.
pub fn run(config: &RunConfig, data: &Dataset) -> Result<RunResult> {
    let training = train(config, data)?;
    let evaluation = evaluate_pipeline(config, &training.pipeline, data)?;
    Ok(RunResult { training, evaluation })
}

/// One line of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub gamma: f64,
    pub miner: Miner,
    pub acer: f64,
    pub hter: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub dev_eer: f64,
    pub test_eer: f64,
    pub threshold: f64,
    pub svm_c: f64,
    pub first_mean_d: f64,
    pub final_mean_d: f64,
    pub initial_separation: f64,
    pub final_separation: f64,
    pub initial_fingerprint: String,
}

impl SummaryRow {
    pub fn of(config: &RunConfig, result: &RunResult) -> Self {
        let r = &result.evaluation.report;
        let t = &result.training;
        Self {
            gamma: config.gamma,
            miner: config.miner,
            acer: r.acer,
            hter: r.hter,
            apcer: r.apcer,
            bpcer: r.bpcer,
            dev_eer: r.eer,
            test_eer: result.evaluation.test_eer,
            threshold: r.threshold,
            svm_c: result.evaluation.selected_c(),
            first_mean_d: t.epochs.first().map_or(f64::NAN, |e| e.mean_d),
            final_mean_d: t.epochs.last().map_or(f64::NAN, |e| e.mean_d),
            initial_separation: t.initial_separation(),
            final_separation: t.final_separation,
            initial_fingerprint: format!("{:016x}", t.initial_fingerprint),
        }
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Runs train and evaluate once per margin, everything else shared.
pub fn gamma_sweep(config: &RunConfig, data: &Dataset, gammas: &[f64]) -> Result<Vec<(SummaryRow, RunResult)>> {
    gammas
        .iter()
        .map(|&gamma| {
            let run_config = RunConfig {
                gamma,
                ..config.clone()
            };
            log::info!("gamma sweep: gamma={gamma}");
            let result = run(&run_config, data)?;
            Ok((SummaryRow::of(&run_config, &result), result))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MinerComparison {
    pub p2c: (SummaryRow, RunResult),
    pub rc: (SummaryRow, RunResult),
}

impl MinerComparison {
    pub fn identical_init(&self) -> bool {
        self.p2c.1.training.initial_fingerprint == self.rc.1.training.initial_fingerprint
    }

    /// Center mining within [`MINER_SLACK`] of random combination, or better.
    pub fn p2c_not_worse(&self) -> bool {
        self.p2c.0.acer <= self.rc.0.acer + MINER_SLACK
    }

    pub fn rows(&self) -> [SummaryRow; 2] {
        [self.p2c.0.clone(), self.rc.0.clone()]
    }
}

/// Identical runs that differ only in the miner.
pub fn compare_miners(config: &RunConfig, data: &Dataset) -> Result<MinerComparison> {
    let one = |miner| -> Result<(SummaryRow, RunResult)> {
        let run_config = RunConfig {
            miner,
            ..config.clone()
        };
        log::info!("miner comparison: {miner}");
        let result = run(&run_config, data)?;
        Ok((SummaryRow::of(&run_config, &result), result))
    };
    let p2c = one(Miner::P2c)?;
    let rc = one(Miner::Rc)?;
    let comparison = MinerComparison { p2c, rc };
    log::info!(
        "p2c acer={:.6} rc acer={:.6} identical init={} p2c within slack={}",
        comparison.p2c.0.acer,
        comparison.rc.0.acer,
        comparison.identical_init(),
        comparison.p2c_not_worse()
    );
    Ok(comparison)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::SplitCounts;
    use crate::harness::dataset::synth_dataset;

    fn tiny() -> (RunConfig, Dataset) {
        let config = RunConfig {
            image_size: 8,
            generator_channels: 4,
            generator_blocks: 1,
            extractor_channels: vec![4, 4],
            embed_dim: 4,
            epochs: 1,
            batch_triplets: 8,
            ..Default::default()
        };
        (config, synth_dataset([SplitCounts::balanced(16); 3], 8, 9).unwrap())
    }

    #[test]
    fn singleton_sweep_equals_direct_run() {
        let (config, data) = tiny();
        let sweep = gamma_sweep(&config, &data, &[0.5]).unwrap();
        assert_eq!(sweep.len(), 1);
        let direct = run(&config, &data).unwrap();
        assert_eq!(sweep[0].1.evaluation.report, direct.evaluation.report);
        assert_eq!(sweep[0].0, SummaryRow::of(&config, &direct));
    }

    #[test]
    fn summary_csv_has_one_row_per_gamma() {
        let (config, data) = tiny();
        let rows: Vec<_> = gamma_sweep(&config, &data, &[0.1, 5.0])
            .unwrap()
            .into_iter()
            .map(|(row, _)| row)
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_summary(&path, &rows).unwrap();
        let back = read_summary(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].gamma, 5.0);
    }

    #[test]
    fn miner_runs_share_initial_weights() {
        let (config, data) = tiny();
        let cmp = compare_miners(&config, &data).unwrap();
        assert!(cmp.identical_init());
        assert_eq!(cmp.rows().map(|r| r.miner), [Miner::P2c, Miner::Rc]);
    }
}
