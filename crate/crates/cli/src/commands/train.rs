use std::io::Write;
use std::path::{Path, PathBuf};

use closr_core::checkpoint::Checkpoint;
use closr_core::data::{fit_scaler, load_csv, split_holdout, FlowDataset, SplitSpec};
use closr_core::inference::{centroids_from_train, CentroidProxy};
use closr_core::losses::{LossConfig, LossKind};
use closr_core::model::ModelConfig;
use closr_core::optim::{train, EpochLog, TrainConfig};
use closr_core::rng::derive_seed;
use closr_core::{Error, Result};

use crate::config::{Mode, RunConfig};
use crate::TrainArgs;

/// Build the train-side dataset: load, optionally split off the test half,
/// and compact the vocabulary so labels align with projection heads.
pub fn prepare_train_data(cfg: &RunConfig, data: &Path, no_split: bool) -> Result<FlowDataset> {
    let load = load_csv(data, &cfg.label_column, &cfg.benign_label)?;
    if load.dropped_rows > 0 {
        eprintln!("dropped {} unusable rows during ingestion", load.dropped_rows);
    }
    let train_side = if no_split {
        if !cfg.zero_day.is_empty() {
            return Err(Error::config("--no-split cannot hold out zero-day classes"));
        }
        load.dataset
    } else {
        let spec = SplitSpec::new(cfg.zero_day.clone(), cfg.train_fraction, cfg.seed);
        split_holdout(&load.dataset, &spec)?.0
    };
    let (compact, _) = train_side.compact_vocabulary()?;
    Ok(compact)
}

pub fn model_config(cfg: &RunConfig, n_features: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        f: n_features,
        d_model: cfg.d_model,
        depth: cfg.depth,
        f_o: cfg.f_o,
        n_heads,
        dropout_rate: cfg.dropout,
        seed: derive_seed(cfg.seed, 1),
    }
}

pub fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        warmup_epochs: cfg.warmup_epochs,
        base_lr: cfg.base_lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, 2),
        ..TrainConfig::default()
    }
}

pub fn loss_config(cfg: &RunConfig) -> LossConfig {
    LossConfig {
        kind: match cfg.mode {
            Mode::Clad => LossKind::Clad,
            Mode::Closr => LossKind::Closr,
        },
        margin: cfg.margin,
        squared: cfg.squared,
        alpha: cfg.alpha,
        temperature: cfg.temperature,
    }
}

/// Train on an already-prepared (compact) train split and assemble the
/// checkpoint with centroids computed over that split.
pub fn train_checkpoint(
    cfg: &RunConfig,
    compact: &FlowDataset,
) -> Result<(Checkpoint, Vec<EpochLog>, Option<usize>)> {
    let n_heads = match cfg.mode {
        Mode::Clad => 1,
        Mode::Closr => compact.n_classes(),
    };
    let scaler = fit_scaler(compact, cfg.clamp_bound)?;
    let mcfg = model_config(cfg, compact.n_features(), n_heads);
    let tcfg = train_config(cfg);
    let lcfg = loss_config(cfg);
    let run = train(compact, &scaler, &tcfg, &mcfg, &lcfg)?;
    let centroids =
        centroids_from_train(&run.params, &mcfg, &scaler, compact, CentroidProxy::Centroid)?;
    let directions = centroids.directions().expect("centroid proxies are directions");
    let checkpoint = Checkpoint {
        model_config: mcfg,
        class_names: compact.class_names().to_vec(),
        scaler,
        params: run.params,
        centroids: Some(directions),
    };
    Ok((checkpoint, run.log, run.diverged_at))
}

fn write_log(path: &PathBuf, log: &[EpochLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::config(format!("log serialization failed: {e}")))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    super::resolve_common(&mut cfg, &args.common)?;
    super::resolve_split(&mut cfg, &args.split);
    super::resolve_hyper(&mut cfg, &args.hyper);
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    cfg.no_split = cfg.no_split || args.no_split;
    super::echo_config(&cfg);

    let compact = prepare_train_data(&cfg, &args.data, cfg.no_split)?;
    eprintln!(
        "training on {} rows across {} classes (single-threaded)",
        compact.n_rows(),
        compact.n_classes()
    );
    let (checkpoint, log, diverged_at) = train_checkpoint(&cfg, &compact)?;

    checkpoint.save(&args.out)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    write_log(&log_path, &log)?;

    if let Some(epoch) = diverged_at {
        return Err(Error::numeric(format!(
            "loss became non-finite at epoch {epoch}; wrote the last good checkpoint to {}",
            args.out.display()
        )));
    }
    println!(
        "wrote checkpoint {} ({} epochs, final loss {:.6}); log at {}",
        args.out.display(),
        log.len(),
        log.last().map_or(f64::NAN, |l| l.loss_mean),
        log_path.display()
    );
    Ok(())
}
