use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use pad_core::checkpoint::{load_checkpoint, save_checkpoint};
use pad_core::harness::dataset::{export_dataset, ingest_directory, synth_dataset, Dataset};
use pad_core::harness::evaluate::{evaluate_pipeline, evaluate_with_classifier, write_evaluation};
use pad_core::harness::experiments::{compare_miners, gamma_sweep, run, write_summary, SWEEP_GAMMAS};
use pad_core::harness::train::write_epoch_log;
use pad_core::harness::{dump_embeddings, Miner, RunConfig};
use pad_core::metrics::{AggregateRule, ApcerVariant};
use pad_core::triplet::LossForm;

#[derive(Parser)]
#[command(name = "padlab", version, about = "Face presentation-attack detection with a learned color-like space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PNG files plus a manifest.
    Synth {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Load a manifest and report per-split counts.
    IngestCheck {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train, select the SVM on dev, save the checkpoint and epoch log.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score dev and test with a saved checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Refit the SVM grid instead of using the stored classifier.
        #[arg(long)]
        refit: bool,
    },
    /// Train and evaluate once per margin value.
    SweepGamma {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated margins.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_GAMMAS.to_vec())]
        gammas: Vec<f64>,
    },
    /// Paired runs with center mining and random combination.
    CompareMiners {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write every record's embedding to CSV.
    DumpEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        /// Destination file; defaults to `<output_dir>/embeddings.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Run-configuration overrides; each flag mirrors a config key.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau_multiplier: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_triplets: Option<usize>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss_form: Option<LossForm>,
    #[arg(long)]
    extractor_frozen: Option<bool>,
    #[arg(long)]
    miner: Option<Miner>,
    #[arg(long, value_delimiter = ',')]
    svm_c_grid: Option<Vec<f64>>,
    #[arg(long)]
    apcer_variant: Option<ApcerVariant>,
    #[arg(long)]
    aggregate: Option<AggregateRule>,
    #[arg(long)]
    generator_channels: Option<usize>,
    #[arg(long)]
    generator_blocks: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    extractor_channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    extractor_hidden: Option<Vec<usize>>,
    #[arg(long)]
    extractor_batch_norm: Option<bool>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    leaky_slope: Option<f64>,
    #[arg(long)]
    synth_train: Option<usize>,
    #[arg(long)]
    synth_dev: Option<usize>,
    #[arg(long)]
    synth_test: Option<usize>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

macro_rules! override_fields {
    ($args:expr, $config:expr; $($field:ident),* ; $($path:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $config.$field = v; })*
        $(if let Some(v) = $args.$path.clone() { $config.$path = Some(v); })*
    };
}

impl RunArgs {
    /// Defaults, then the config file, then `PAD_*` path variables, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        config.apply_env_overrides();
        override_fields!(self, config;
            image_size, gamma, tau_multiplier, lr, damping, momentum, weight_decay, epochs,
            batch_triplets, max_grad_norm, seed, loss_form, extractor_frozen, miner, svm_c_grid, apcer_variant,
            generator_channels, generator_blocks, extractor_channels, extractor_hidden,
            extractor_batch_norm, embed_dim, leaky_slope, synth_train, synth_dev, synth_test, output_dir;
            aggregate, data_root, manifest, checkpoint);
        config.validate()?;
        Ok(config)
    }
}

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.output_dir.join("model.ckpt"))
}

/// Manifest data when a manifest is configured, synthetic data otherwise.
fn load_data(config: &RunConfig) -> Result<Dataset> {
    let data = match &config.manifest {
        Some(manifest) => {
            let root = config
                .data_root
                .clone()
                .or_else(|| manifest.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            info!("ingesting {} under {}", manifest.display(), root.display());
            ingest_directory(&root, manifest, config.image_size)?
        }
        None => {
            info!("synthesizing {:?}", config.synth_counts());
            synth_dataset(config.synth_counts(), config.image_size, config.seed)?
        }
    };
    for split in data.splits() {
        info!("{}: {} records", split.role, split.len());
    }
    Ok(data)
}

fn prepare_output(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    std::fs::write(config.output_dir.join("config.toml"), config.to_toml_string())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { run } => {
            let config = run.resolve()?;
            let root = config.data_root.clone().unwrap_or_else(|| config.output_dir.join("synth"));
            let data = synth_dataset(config.synth_counts(), config.image_size, config.seed)?;
            let manifest = export_dataset(&data, &root)?;
            println!("{}", manifest.display());
        }
        Command::IngestCheck { run } => {
            let config = run.resolve()?;
            if config.manifest.is_none() {
                bail!("ingest-check needs --manifest or PAD_MANIFEST");
            }
            let data = load_data(&config)?;
            println!("role\tlabel\tspecies\tcount");
            for split in data.splits() {
                let mut keys: Vec<_> = split.records.iter().map(|r| (r.label, r.species.clone())).collect();
                keys.sort_by(|a, b| (a.0.to_string(), &a.1).cmp(&(b.0.to_string(), &b.1)));
                keys.dedup();
                for (label, species) in keys {
                    println!("{}\t{label}\t{species}\t{}", split.role, split.count(label, &species));
                }
            }
        }
        Command::Train { run: args } => {
            let config = args.resolve()?;
            prepare_output(&config)?;
            let data = load_data(&config)?;
            let mut result = run(&config, &data)?;
            write_epoch_log(&config.output_dir.join("epochs.csv"), &result.training.epochs)?;
            write_evaluation(&config.output_dir, &result.evaluation)?;
            let path = checkpoint_path(&config);
            save_checkpoint(&path, &mut result.training.pipeline, Some(&result.evaluation.classifier))?;
            println!("{}", result.evaluation.report.to_text());
            println!("checkpoint: {}", path.display());
        }
        Command::Eval { run, refit } => {
            let config = run.resolve()?;
            prepare_output(&config)?;
            let checkpoint = load_checkpoint(&checkpoint_path(&config))?;
            let data = load_data(&config)?;
            let evaluation = match (checkpoint.classifier, refit) {
                (Some(classifier), false) => {
                    evaluate_with_classifier(&config, &checkpoint.pipeline, classifier, &data)?
                }
                _ => evaluate_pipeline(&config, &checkpoint.pipeline, &data)?,
            };
            write_evaluation(&config.output_dir, &evaluation)?;
            println!("{}", evaluation.report.to_text());
        }
        Command::SweepGamma { run, gammas } => {
            let config = run.resolve()?;
            prepare_output(&config)?;
            let data = load_data(&config)?;
            let rows: Vec<_> = gamma_sweep(&config, &data, &gammas)?
                .into_iter()
                .map(|(row, _)| row)
                .collect();
            let path = config.output_dir.join("gamma_sweep.csv");
            write_summary(&path, &rows)?;
            for row in &rows {
                println!("gamma={} acer={:.4} hter={:.4} test_eer={:.4}", row.gamma, row.acer, row.hter, row.test_eer);
            }
            println!("{}", path.display());
        }
        Command::CompareMiners { run } => {
            let config = run.resolve()?;
            prepare_output(&config)?;
            let data = load_data(&config)?;
            let cmp = compare_miners(&config, &data)?;
            let path = config.output_dir.join("miner_comparison.csv");
            write_summary(&path, &cmp.rows())?;
            for row in cmp.rows() {
                println!("{}: acer={:.4} hter={:.4}", row.miner, row.acer, row.hter);
            }
            println!("identical initial weights: {}", cmp.identical_init());
            println!("p2c within slack of rc: {}", cmp.p2c_not_worse());
            println!("{}", path.display());
        }
        Command::DumpEmbeddings { run, out } => {
            let config = run.resolve()?;
            let checkpoint = load_checkpoint(&checkpoint_path(&config))?;
            let data = load_data(&config)?;
            let path = out.unwrap_or_else(|| config.output_dir.join("embeddings.csv"));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let rows = dump_embeddings(&checkpoint.pipeline, &data, &path)?;
            println!("{rows} rows -> {}", path.display());
        }
    }
    Ok(())
}
