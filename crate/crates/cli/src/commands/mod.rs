pub mod eval;
pub mod export;
pub mod sweep;
pub mod synth;
pub mod train;

use closr_core::Result;

use crate::config::RunConfig;
use crate::{CommonOpts, SplitOpts, TrainHyperOpts};

/// Defaults, then the config file, then explicit flags.
pub fn resolve_common(cfg: &mut RunConfig, common: &CommonOpts) -> Result<()> {
    if let Some(path) = &common.config {
        cfg.load_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(col) = &common.label_column {
        cfg.label_column = col.clone();
    }
    if let Some(label) = &common.benign_label {
        cfg.benign_label = label.clone();
    }
    Ok(())
}

pub fn resolve_split(cfg: &mut RunConfig, split: &SplitOpts) {
    if let Some(zero_day) = &split.zero_day {
        cfg.zero_day = zero_day.clone();
    }
    if let Some(fraction) = split.train_fraction {
        cfg.train_fraction = fraction;
    }
}

pub fn resolve_hyper(cfg: &mut RunConfig, hyper: &TrainHyperOpts) {
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = hyper.$field {
                cfg.$field = v;
            }
        };
    }
    take!(epochs);
    take!(warmup_epochs);
    take!(base_lr);
    take!(weight_decay);
    take!(batch_size);
    take!(d_model);
    take!(depth);
    take!(f_o);
    take!(dropout);
    take!(margin);
    take!(alpha);
    take!(squared);
    take!(temperature);
    take!(clamp_bound);
}

/// The resolved configuration is echoed to stderr so every run records what
/// it actually used.
pub fn echo_config(cfg: &RunConfig) {
    eprintln!(
        "resolved config: {}",
        serde_json::to_string(&cfg.to_json()).expect("config serializes")
    );
}
