//! AdamW with decoupled weight decay, the warmup-plus-cosine learning-rate
//! schedule, and the training loop driver.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{balanced_batches, BatchPlan, FeatureScaler, FlowDataset};
use crate::error::{Error, Result};
use crate::losses::{self, BatchView, LossConfig, LossKind};
use crate::model::{backward, forward, init_network, ModelConfig, NetworkParameters};
use crate::rng::{derive_seed, derive_seed3};

/// Optimization schedule and batch settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 20,
            base_lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 128,
            betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs must be smaller than epochs"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// First/second moment accumulators shaped like the parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub first: NetworkParameters,
    pub second: NetworkParameters,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &NetworkParameters) -> Self {
        Self { first: params.zeros_like(), second: params.zeros_like(), step: 0 }
    }
}

/// Learning rate for an epoch: linear warmup to `base_lr` over
/// `warmup_epochs`, then cosine annealing to zero.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::config(format!("epoch {epoch} outside schedule of {}", cfg.epochs)));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let span = (cfg.epochs - cfg.warmup_epochs) as f64;
    let progress = (epoch - cfg.warmup_epochs) as f64 / span;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One bias-corrected Adam step plus decoupled weight decay on the weight
/// matrices (biases are not decayed). Leaves parameters untouched and errors
/// if any gradient entry is non-finite.
pub fn adamw_step(
    params: &mut NetworkParameters,
    grads: &NetworkParameters,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::numeric("non-finite gradient; step aborted"));
    }
    let (b1, b2) = cfg.betas;
    let t = state.step + 1;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let eps = cfg.adam_epsilon;
    let decay = lr * cfg.weight_decay;

    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64, decayed: bool| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let mut next = *p - lr * m_hat / (v_hat.sqrt() + eps);
        if decayed {
            next -= decay * *p;
        }
        *p = next;
    };

    for (((p, g), m), v) in params
        .linears_mut()
        .zip(grads.linears())
        .zip(state.first.linears_mut())
        .zip(state.second.linears_mut())
    {
        ndarray::Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .for_each(|p, &g, m, v| update(p, g, m, v, true));
        ndarray::Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(|p, &g, m, v| update(p, g, m, v, false));
    }
    state.step = t;
    if !params.all_finite() {
        return Err(Error::numeric("parameters became non-finite after optimizer step"));
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_mean: f64,
    pub wall_ms: f64,
}

/// Outcome of a training run. When the loss went non-finite the parameters
/// are the snapshot from the last fully completed epoch and `diverged_at`
/// holds the failing epoch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: NetworkParameters,
    pub log: Vec<EpochLog>,
    pub diverged_at: Option<usize>,
}

/// Full training loop: class-balanced batches, feature scaling, forward,
/// loss, backward, optimizer step. Fully deterministic given the seeds in
/// the configs. For the open-set loss, labels must already map onto heads
/// (use [`FlowDataset::compact_vocabulary`] after the split).
pub fn train(
    data: &FlowDataset,
    scaler: &FeatureScaler,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    lcfg: &LossConfig,
) -> Result<TrainRun> {
    tcfg.validate()?;
    mcfg.validate()?;
    lcfg.validate()?;
    if data.n_rows() == 0 {
        return Err(Error::data("training data is empty"));
    }
    if data.class_counts()[crate::data::BENIGN_CLASS] == 0 {
        return Err(Error::data("training data contains no benign rows"));
    }
    if mcfg.f != data.n_features() {
        return Err(Error::config(format!(
            "model expects {} features, data has {}",
            mcfg.f,
            data.n_features()
        )));
    }
    let head_ids: Vec<usize> = match lcfg.kind {
        LossKind::Closr => {
            let max_label = data.labels().iter().copied().max().unwrap_or(0);
            if mcfg.n_heads != max_label + 1 {
                return Err(Error::config(format!(
                    "open-set training needs one head per class: {} classes, {} heads",
                    max_label + 1,
                    mcfg.n_heads
                )));
            }
            (0..mcfg.n_heads).collect()
        }
        _ => vec![0],
    };

    let mut params = init_network(mcfg)?;
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let started = Instant::now();
        let snapshot = params.clone();
        let lr = lr_at(epoch, tcfg)?;
        let plan = BatchPlan {
            seed: derive_seed(tcfg.seed, 0x10_0000 + epoch as u64),
            ..BatchPlan::new(data, tcfg.batch_size, 0)?
        };
        let batches = balanced_batches(data, &plan)?;

        let mut loss_sum = 0.0;
        let mut diverged = false;
        for (bi, rows) in batches.iter().enumerate() {
            let x = scaler.transform(&data.gather(rows));
            let labels: Vec<usize> = rows.iter().map(|&i| data.labels()[i]).collect();
            let dropout_seed = derive_seed3(tcfg.seed, epoch as u64, bi as u64);
            let emb = forward(&params, mcfg, &x, &head_ids, true, dropout_seed)?;
            let view = BatchView::new(&emb, &labels)?;
            let out = losses::evaluate(&view, lcfg)?;
            if !out.value.is_finite() {
                diverged = true;
                break;
            }
            let grads = backward(&params, &emb, &out.grads)?;
            if adamw_step(&mut params, &grads, &mut state, lr, tcfg).is_err() {
                diverged = true;
                break;
            }
            loss_sum += out.value;
        }
        if diverged {
            return Ok(TrainRun { params: snapshot, log, diverged_at: Some(epoch) });
        }
        log.push(EpochLog {
            epoch,
            lr,
            loss_mean: loss_sum / batches.len() as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainRun { params, log, diverged_at: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fit_scaler, synth_blobs};
    use approx::assert_relative_eq;

    fn schedule() -> TrainConfig {
        TrainConfig { epochs: 200, warmup_epochs: 20, base_lr: 0.4, ..TrainConfig::default() }
    }

    #[test]
    fn lr_warmup_endpoint_reaches_base_lr() {
        let cfg = schedule();
        assert_relative_eq!(lr_at(19, &cfg).unwrap(), 0.4, epsilon = 1e-15);
        assert!(lr_at(20, &cfg).unwrap() <= 0.4);
    }

    #[test]
    fn lr_cosine_midpoint_is_half_base() {
        let cfg = schedule();
        // epoch = warmup + (epochs - warmup)/2 = 110
        assert_relative_eq!(lr_at(110, &cfg).unwrap(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn lr_final_epoch_is_nearly_zero() {
        let cfg = schedule();
        let last = lr_at(199, &cfg).unwrap();
        let expected = 0.4 * 0.5 * (1.0 + (std::f64::consts::PI * 179.0 / 180.0).cos());
        assert_relative_eq!(last, expected, epsilon = 1e-15);
        assert!(last < 0.001 * cfg.base_lr);
    }

    #[test]
    fn lr_is_continuous_at_the_boundary_and_bounds_checked() {
        let cfg = schedule();
        assert!(lr_at(200, &cfg).is_err());
        for e in 0..200 {
            let lr = lr_at(e, &cfg).unwrap();
            assert!(lr > 0.0 && lr <= cfg.base_lr + 1e-15);
        }
    }

    fn tiny_params() -> (ModelConfig, NetworkParameters) {
        let mcfg = ModelConfig {
            f: 2,
            d_model: 3,
            depth: 1,
            f_o: 2,
            n_heads: 1,
            dropout_rate: 0.0,
            seed: 0,
        };
        let params = init_network(&mcfg).unwrap();
        (mcfg, params)
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_a_fixed_point() {
        let (_, mut params) = tiny_params();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adamw_step(&mut params, &grads, &mut state, 0.01, &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_decay_only_step_shrinks_weights_not_biases() {
        let (_, mut params) = tiny_params();
        for l in params.linears_mut() {
            l.weight.fill(1.0);
            l.bias.fill(1.0);
        }
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        adamw_step(&mut params, &grads, &mut state, 0.01, &cfg).unwrap();
        for l in params.linears() {
            assert!(l.weight.iter().all(|&w| (w - 0.999).abs() < 1e-15));
            assert!(l.bias.iter().all(|&b| (b - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn adamw_single_step_from_zero_state_cancels_bias_correction() {
        let (_, mut params) = tiny_params();
        let before = params.clone();
        let mut grads = params.zeros_like();
        for l in grads.linears_mut() {
            l.weight.fill(1.0);
            l.bias.fill(1.0);
        }
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adamw_step(&mut params, &grads, &mut state, 0.001, &cfg).unwrap();
        for i in 0..params.param_count() {
            let delta = params.get_flat(i) - before.get_flat(i);
            assert_relative_eq!(delta, -0.001, epsilon = 1e-9);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adamw_rejects_non_finite_gradients_without_mutating() {
        let (_, mut params) = tiny_params();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.input.weight[[0, 0]] = f64::NAN;
        let mut state = OptimizerState::new(&params);
        let cfg = TrainConfig::default();
        assert!(adamw_step(&mut params, &grads, &mut state, 0.001, &cfg).is_err());
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }

    /// Scalar reference Adam (no decay) used as an independent oracle.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: u32,
    }

    impl ScalarAdam {
        fn step(&mut self, p: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let m_hat = self.m / (1.0 - 0.9f64.powi(self.t as i32));
            let v_hat = self.v / (1.0 - 0.999f64.powi(self.t as i32));
            p - lr * m_hat / (v_hat.sqrt() + 1e-8)
        }
    }

    #[test]
    fn adamw_without_decay_matches_reference_adam_over_100_steps() {
        let (_, mut params) = tiny_params();
        let n = params.param_count();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut state = OptimizerState::new(&params);
        let mut oracles: Vec<ScalarAdam> =
            (0..n).map(|_| ScalarAdam { m: 0.0, v: 0.0, t: 0 }).collect();
        let mut reference: Vec<f64> = (0..n).map(|i| params.get_flat(i)).collect();
        let mut gen = crate::rng::rng(77);
        use rand::Rng;
        for _ in 0..100 {
            let mut grads = params.zeros_like();
            for i in 0..n {
                grads.set_flat(i, gen.random_range(-1.0..1.0));
            }
            adamw_step(&mut params, &grads, &mut state, 0.003, &cfg).unwrap();
            for i in 0..n {
                reference[i] = oracles[i].step(reference[i], grads.get_flat(i), 0.003);
            }
        }
        for i in 0..n {
            assert!((params.get_flat(i) - reference[i]).abs() < 1e-12);
        }
    }

    fn blob_training_setup() -> (crate::data::FlowDataset, FeatureScaler) {
        let synth = synth_blobs(3, 60, 6, 5.0, 0, 3).unwrap();
        let scaler = fit_scaler(&synth.dataset, 10.0).unwrap();
        (synth.dataset, scaler)
    }

    #[test]
    fn training_reduces_the_loss_on_separable_blobs() {
        let (data, scaler) = blob_training_setup();
        let tcfg = TrainConfig {
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 32,
            seed: 5,
            ..TrainConfig::default()
        };
        let mcfg = ModelConfig {
            f: 6,
            d_model: 16,
            depth: 2,
            f_o: 4,
            n_heads: 1,
            dropout_rate: 0.0,
            seed: 5,
        };
        let run = train(&data, &scaler, &tcfg, &mcfg, &LossConfig::default()).unwrap();
        assert!(run.diverged_at.is_none());
        assert_eq!(run.log.len(), 50);
        assert!(
            run.log.last().unwrap().loss_mean < run.log[0].loss_mean,
            "final {} vs first {}",
            run.log.last().unwrap().loss_mean,
            run.log[0].loss_mean
        );
        assert!(run.params.all_finite());
    }

    #[test]
    fn zero_epochs_returns_initialized_parameters() {
        let (data, scaler) = blob_training_setup();
        let tcfg =
            TrainConfig { epochs: 0, warmup_epochs: 0, seed: 1, ..TrainConfig::default() };
        let mcfg = ModelConfig {
            f: 6,
            d_model: 8,
            depth: 1,
            f_o: 4,
            n_heads: 1,
            dropout_rate: 0.0,
            seed: 9,
        };
        let run = train(&data, &scaler, &tcfg, &mcfg, &LossConfig::default()).unwrap();
        assert_eq!(run.params, init_network(&mcfg).unwrap());
        assert!(run.log.is_empty());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (data, scaler) = blob_training_setup();
        let tcfg = TrainConfig {
            epochs: 8,
            warmup_epochs: 2,
            batch_size: 32,
            seed: 42,
            ..TrainConfig::default()
        };
        let mcfg = ModelConfig {
            f: 6,
            d_model: 8,
            depth: 1,
            f_o: 4,
            n_heads: 1,
            dropout_rate: 0.2,
            seed: 42,
        };
        let a = train(&data, &scaler, &tcfg, &mcfg, &LossConfig::default()).unwrap();
        let b = train(&data, &scaler, &tcfg, &mcfg, &LossConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
    }
}
