//! MLP encoder with class-wise linear projection heads onto unit
//! hyperspheres, with exact reverse-mode gradients.
//!
//! Pipeline: input linear -> [linear -> ReLU -> dropout]*depth -> per
//! requested head: linear -> L2 normalization. All arithmetic is f64; the
//! checkpoint format quantizes to f32 on disk.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;

/// Epsilon added to the norm denominator so degenerate head outputs stay
/// finite.
pub const NORM_EPSILON: f64 = 1e-12;

/// Architecture of the encoder and its projection heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature count.
    pub f: usize,
    /// Width of the input projection and every hidden block.
    pub d_model: usize,
    /// Number of hidden blocks.
    pub depth: usize,
    /// Embedding dimension per head; the unit sphere lives in R^{f_o}.
    pub f_o: usize,
    /// 1 for binary anomaly detection, one per known class for open-set
    /// recognition.
    pub n_heads: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.d_model == 0 || self.depth == 0 || self.n_heads == 0 {
            return Err(Error::config("f, d_model, depth and n_heads must all be >= 1"));
        }
        if self.f_o < 2 {
            return Err(Error::config("f_o must be >= 2 for a nondegenerate hypersphere"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0,1)"));
        }
        Ok(())
    }
}

/// One affine map, stored as (in x out) weight plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { weight: Array2::zeros((n_in, n_out)), bias: Array1::zeros(n_out) }
    }

    fn glorot(n_in: usize, n_out: usize, gen: &mut impl Rng) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let weight = Array2::from_shape_fn((n_in, n_out), |_| gen.random_range(-limit..limit));
        Self { weight, bias: Array1::zeros(n_out) }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// The trainable state: input projection, hidden blocks, projection heads.
///
/// The flat parameter order (used by the checkpoint format and by finite
/// difference tests) is declaration order with row-major tensors:
/// input W, input b, block_0 W, block_0 b, ..., head_0 W, head_0 b, ...
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParameters {
    pub input: Linear,
    pub blocks: Vec<Linear>,
    pub heads: Vec<Linear>,
}

impl NetworkParameters {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            input: Linear::zeros(cfg.f, cfg.d_model),
            blocks: (0..cfg.depth).map(|_| Linear::zeros(cfg.d_model, cfg.d_model)).collect(),
            heads: (0..cfg.n_heads).map(|_| Linear::zeros(cfg.d_model, cfg.f_o)).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let zero = |l: &Linear| Linear {
            weight: Array2::zeros(l.weight.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        };
        Self {
            input: zero(&self.input),
            blocks: self.blocks.iter().map(zero).collect(),
            heads: self.heads.iter().map(zero).collect(),
        }
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        std::iter::once(&self.input).chain(self.blocks.iter()).chain(self.heads.iter())
    }

    pub fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        std::iter::once(&mut self.input)
            .chain(self.blocks.iter_mut())
            .chain(self.heads.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.linears().map(Linear::param_count).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.linears()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Read one parameter by flat index in declaration order.
    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut offset = 0;
        for l in self.linears() {
            if idx < offset + l.weight.len() {
                return *l.weight.as_slice().expect("row-major weight").get(idx - offset).unwrap();
            }
            offset += l.weight.len();
            if idx < offset + l.bias.len() {
                return l.bias[idx - offset];
            }
            offset += l.bias.len();
        }
        panic!("flat index {idx} out of range");
    }

    /// Write one parameter by flat index in declaration order.
    pub fn set_flat(&mut self, idx: usize, value: f64) {
        let mut offset = 0;
        for l in self.linears_mut() {
            if idx < offset + l.weight.len() {
                l.weight.as_slice_mut().expect("row-major weight")[idx - offset] = value;
                return;
            }
            offset += l.weight.len();
            if idx < offset + l.bias.len() {
                l.bias[idx - offset] = value;
                return;
            }
            offset += l.bias.len();
        }
        panic!("flat index {idx} out of range");
    }
}

/// Glorot-uniform weights, zero biases; deterministic given `cfg.seed`.
pub fn init_network(cfg: &ModelConfig) -> Result<NetworkParameters> {
    cfg.validate()?;
    let mut gen = rng(cfg.seed);
    Ok(NetworkParameters {
        input: Linear::glorot(cfg.f, cfg.d_model, &mut gen),
        blocks: (0..cfg.depth).map(|_| Linear::glorot(cfg.d_model, cfg.d_model, &mut gen)).collect(),
        heads: (0..cfg.n_heads).map(|_| Linear::glorot(cfg.d_model, cfg.f_o, &mut gen)).collect(),
    })
}

/// Activations retained by the forward pass for exact backpropagation.
#[derive(Debug, Clone)]
struct ForwardTrace {
    /// Scaled input batch.
    x: Array2<f64>,
    /// Input to each block's linear (first entry is the input projection
    /// output).
    block_inputs: Vec<Array2<f64>>,
    /// Pre-ReLU activation per block.
    pre_relu: Vec<Array2<f64>>,
    /// Dropout scale applied per block (all ones at inference).
    drop_scale: Vec<Array2<f64>>,
    /// Trunk output feeding the heads.
    trunk: Array2<f64>,
    /// Pre-normalization head outputs, aligned with `head_ids`.
    head_pre: Vec<Array2<f64>>,
}

/// Unit-norm embeddings for the requested heads, plus the retained
/// activations needed by [`backward`]. Call [`EmbeddingBatch::detach`] to
/// drop the trace for inference-only use.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    head_ids: Vec<usize>,
    embeddings: Vec<Array2<f64>>,
    /// Rows whose pre-normalization output had norm below 1e-12.
    pub degenerate_rows: usize,
    trace: Option<Box<ForwardTrace>>,
}

impl EmbeddingBatch {
    /// Requested head ids, sorted ascending.
    pub fn head_ids(&self) -> &[usize] {
        &self.head_ids
    }

    /// Embedding matrix (B x f_o, unit rows) for a head id.
    pub fn head(&self, head_id: usize) -> Result<&Array2<f64>> {
        self.head_ids
            .iter()
            .position(|&h| h == head_id)
            .map(|i| &self.embeddings[i])
            .ok_or_else(|| Error::config(format!("head {head_id} was not requested")))
    }

    pub fn embeddings(&self) -> &[Array2<f64>] {
        &self.embeddings
    }

    pub fn n_rows(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.nrows())
    }

    /// Drop retained activations; backward is no longer possible.
    pub fn detach(mut self) -> Self {
        self.trace = None;
        self
    }

    /// Assemble a batch from raw per-head matrices (no trace). Intended for
    /// loss evaluation on hand-constructed embeddings.
    pub fn from_raw(head_ids: Vec<usize>, embeddings: Vec<Array2<f64>>) -> Self {
        assert_eq!(head_ids.len(), embeddings.len());
        Self { head_ids, embeddings, degenerate_rows: 0, trace: None }
    }
}

/// Run the encoder on a batch. Dropout is active only when `training` and is
/// fully determined by `dropout_seed`. The returned embeddings have unit rows
/// within 1e-6.
pub fn forward(
    params: &NetworkParameters,
    cfg: &ModelConfig,
    x: &Array2<f64>,
    head_ids: &[usize],
    training: bool,
    dropout_seed: u64,
) -> Result<EmbeddingBatch> {
    if x.ncols() != cfg.f {
        return Err(Error::config(format!(
            "input has {} columns, model expects {}",
            x.ncols(),
            cfg.f
        )));
    }
    let mut ids: Vec<usize> = head_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::config("at least one head must be requested"));
    }
    if ids.iter().any(|&h| h >= cfg.n_heads) {
        return Err(Error::config("requested head id exceeds n_heads"));
    }

    let mut drop_rng = rng(dropout_seed);
    let keep = 1.0 - cfg.dropout_rate;

    let mut block_inputs = Vec::with_capacity(cfg.depth);
    let mut pre_relu = Vec::with_capacity(cfg.depth);
    let mut drop_scale = Vec::with_capacity(cfg.depth);

    let mut h = params.input.apply(x);
    for block in &params.blocks {
        block_inputs.push(h.clone());
        let pre = block.apply(&h);
        let mut act = pre.mapv(|v| v.max(0.0));
        let scale = if training && cfg.dropout_rate > 0.0 {
            Array2::from_shape_fn(act.raw_dim(), |_| {
                if drop_rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        } else {
            Array2::ones(act.raw_dim())
        };
        act = &act * &scale;
        pre_relu.push(pre);
        drop_scale.push(scale);
        h = act;
    }

    let mut embeddings = Vec::with_capacity(ids.len());
    let mut head_pre = Vec::with_capacity(ids.len());
    let mut degenerate_rows = 0usize;
    for &hid in &ids {
        let v = params.heads[hid].apply(&h);
        let mut z = v.clone();
        for mut row in z.rows_mut() {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < NORM_EPSILON {
                degenerate_rows += 1;
            }
            row /= norm + NORM_EPSILON;
        }
        head_pre.push(v);
        embeddings.push(z);
    }

    let trace = ForwardTrace { x: x.clone(), block_inputs, pre_relu, drop_scale, trunk: h, head_pre };
    Ok(EmbeddingBatch { head_ids: ids, embeddings, degenerate_rows, trace: Some(Box::new(trace)) })
}

/// Exact reverse-mode gradients of a scalar loss with respect to every
/// parameter, given the loss gradients with respect to the unit-norm
/// embeddings (aligned with `batch.head_ids()`). Heads that were not
/// requested contribute zero gradient.
pub fn backward(
    params: &NetworkParameters,
    batch: &EmbeddingBatch,
    grads_wrt_embeddings: &[Array2<f64>],
) -> Result<NetworkParameters> {
    let trace = batch
        .trace
        .as_ref()
        .ok_or_else(|| Error::config("backward called on a detached embedding batch"))?;
    if grads_wrt_embeddings.len() != batch.head_ids.len() {
        return Err(Error::config("one upstream gradient matrix per requested head required"));
    }

    let mut grads = params.zeros_like();
    let d_model = trace.trunk.ncols();
    let b = trace.trunk.nrows();
    let mut g_trunk = Array2::<f64>::zeros((b, d_model));

    for (slot, &hid) in batch.head_ids.iter().enumerate() {
        let upstream = &grads_wrt_embeddings[slot];
        let v = &trace.head_pre[slot];
        if upstream.raw_dim() != v.raw_dim() {
            return Err(Error::config("upstream gradient shape mismatch"));
        }
        // Through z = v / (||v|| + eps):
        // dL/dv = g/(n+eps) - (g.v) v / (n (n+eps)^2)
        let mut d_v = Array2::<f64>::zeros(v.raw_dim());
        for i in 0..b {
            let vrow = v.row(i);
            let grow = upstream.row(i);
            let n = vrow.iter().map(|a| a * a).sum::<f64>().sqrt();
            let denom = n + NORM_EPSILON;
            let gv = grow.dot(&vrow);
            let mut drow = d_v.row_mut(i);
            for j in 0..vrow.len() {
                let mut val = grow[j] / denom;
                if n > 0.0 {
                    val -= gv * vrow[j] / (n * denom * denom);
                }
                drow[j] = val;
            }
        }
        grads.heads[hid].weight = grads.heads[hid].weight.clone() + trace.trunk.t().dot(&d_v);
        grads.heads[hid].bias = grads.heads[hid].bias.clone() + d_v.sum_axis(Axis(0));
        g_trunk = g_trunk + d_v.dot(&params.heads[hid].weight.t());
    }

    let mut g = g_trunk;
    for k in (0..params.blocks.len()).rev() {
        // Through dropout scaling and the ReLU mask.
        let mut d_pre = &g * &trace.drop_scale[k];
        ndarray::Zip::from(&mut d_pre).and(&trace.pre_relu[k]).for_each(|d, &pre| {
            if pre <= 0.0 {
                *d = 0.0;
            }
        });
        grads.blocks[k].weight = trace.block_inputs[k].t().dot(&d_pre);
        grads.blocks[k].bias = d_pre.sum_axis(Axis(0));
        g = d_pre.dot(&params.blocks[k].weight.t());
    }

    grads.input.weight = trace.x.t().dot(&g);
    grads.input.bias = g.sum_axis(Axis(0));
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_seed;
    use ndarray::array;

    fn small_cfg() -> ModelConfig {
        ModelConfig { f: 5, d_model: 8, depth: 2, f_o: 4, n_heads: 3, dropout_rate: 0.0, seed: 1 }
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        let p = init_network(&small_cfg()).unwrap();
        assert_eq!(p.param_count(), 5 * 8 + 8 + 2 * (8 * 8 + 8) + 3 * (8 * 4 + 4));
        assert_eq!(p.param_count(), 300);
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let a = init_network(&small_cfg()).unwrap();
        let b = init_network(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let bad = ModelConfig { depth: 0, ..small_cfg() };
        assert!(init_network(&bad).is_err());
        let bad = ModelConfig { f_o: 1, ..small_cfg() };
        assert!(init_network(&bad).is_err());
    }

    #[test]
    fn forward_rows_are_unit_norm() {
        let cfg = small_cfg();
        let p = init_network(&cfg).unwrap();
        let x = Array2::from_shape_fn((7, 5), |(i, j)| (i as f64 - 3.0) * 0.7 + j as f64 * 0.1);
        let out = forward(&p, &cfg, &x, &[0, 1, 2], false, 0).unwrap();
        for e in out.embeddings() {
            for row in e.rows() {
                let norm = row.dot(&row).sqrt();
                assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
            }
        }
    }

    #[test]
    fn inference_is_deterministic_and_dropout_seeded() {
        let cfg = ModelConfig { dropout_rate: 0.4, ..small_cfg() };
        let p = init_network(&cfg).unwrap();
        let x = Array2::from_shape_fn((6, 5), |(i, j)| (i + j) as f64 * 0.3);
        let a = forward(&p, &cfg, &x, &[0], false, 1).unwrap();
        let b = forward(&p, &cfg, &x, &[0], false, 2).unwrap();
        assert_eq!(a.head(0).unwrap(), b.head(0).unwrap(), "no stochasticity at inference");
        let c = forward(&p, &cfg, &x, &[0], true, 9).unwrap();
        let d = forward(&p, &cfg, &x, &[0], true, 9).unwrap();
        assert_eq!(c.head(0).unwrap(), d.head(0).unwrap(), "dropout mask is seeded");
        let e = forward(&p, &cfg, &x, &[0], true, 10).unwrap();
        assert_ne!(c.head(0).unwrap(), e.head(0).unwrap());
    }

    #[test]
    fn zero_weights_with_head_bias_give_constant_embedding() {
        let cfg = small_cfg();
        let mut p = NetworkParameters::zeros(&cfg).unwrap();
        p.heads[0].bias = array![3.0, 0.0, 4.0, 0.0];
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i * j) as f64);
        let out = forward(&p, &cfg, &x, &[0], false, 0).unwrap();
        for row in out.head(0).unwrap().rows() {
            assert!((row[0] - 0.6).abs() < 1e-9);
            assert!((row[2] - 0.8).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch_and_bad_heads() {
        let cfg = small_cfg();
        let p = init_network(&cfg).unwrap();
        let x = Array2::zeros((2, 4));
        assert!(forward(&p, &cfg, &x, &[0], false, 0).is_err());
        let x = Array2::zeros((2, 5));
        assert!(forward(&p, &cfg, &x, &[7], false, 0).is_err());
        assert!(forward(&p, &cfg, &x, &[], false, 0).is_err());
    }

    #[test]
    fn backward_requires_retained_activations() {
        let cfg = small_cfg();
        let p = init_network(&cfg).unwrap();
        let x = Array2::zeros((2, 5));
        let out = forward(&p, &cfg, &x, &[0], false, 0).unwrap().detach();
        let g = vec![Array2::zeros((2, 4))];
        assert!(backward(&p, &out, &g).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let cfg = small_cfg();
        let p = init_network(&cfg).unwrap();
        let x = Array2::from_shape_fn((3, 5), |(i, j)| i as f64 - j as f64);
        let out = forward(&p, &cfg, &x, &[0, 2], false, 0).unwrap();
        let g = vec![Array2::zeros((3, 4)), Array2::zeros((3, 4))];
        let grads = backward(&p, &out, &g).unwrap();
        assert!(grads.linears().all(|l| l.weight.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn radial_upstream_gradient_is_annihilated() {
        // d||z||^2 / d(pre-normalization v) = 0 because z has constant norm;
        // feeding 2z upstream must therefore produce ~0 parameter gradients.
        let cfg = small_cfg();
        let p = init_network(&cfg).unwrap();
        let x = Array2::from_shape_fn((4, 5), |(i, j)| 0.3 * i as f64 + 0.1 * j as f64 + 0.05);
        let out = forward(&p, &cfg, &x, &[1], false, 0).unwrap();
        let g = vec![out.head(1).unwrap() * 2.0];
        let grads = backward(&p, &out, &g).unwrap();
        let max = grads
            .linears()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max < 1e-9, "max |grad| {max}");
    }

    #[test]
    fn unrequested_heads_get_zero_gradient() {
        let cfg = small_cfg();
        let p = init_network(&cfg).unwrap();
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i + 2 * j) as f64 * 0.2);
        let out = forward(&p, &cfg, &x, &[1], false, 0).unwrap();
        let g = vec![Array2::from_elem((3, 4), 0.5)];
        let grads = backward(&p, &out, &g).unwrap();
        assert!(grads.heads[0].weight.iter().all(|&v| v == 0.0));
        assert!(grads.heads[2].weight.iter().all(|&v| v == 0.0));
        assert!(grads.heads[1].weight.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_matches_finite_differences_on_spec_configuration ()  {
        let cfg =
            ModelConfig { f: 4, d_model: 6, depth: 2, f_o: 3, n_heads: 2, dropout_rate: 0.0, seed: 5 };
        let p = init_network(&cfg).unwrap();
        let mut gen = rng(derive_seed(31, 0));
        let x = Array2::from_shape_fn((5, 4), |_| gen.random_range(-1.0..1.0));
        let upstream: Vec<Array2<f64>> =
            (0..2).map(|_| Array2::from_shape_fn((5, 3), |_| gen.random_range(-1.0..1.0))).collect();

        let out = forward(&p, &cfg, &x, &[0, 1], false, 0).unwrap();
        let analytic = backward(&p, &out, &upstream).unwrap();

        let scalar_loss = |params: &NetworkParameters| -> f64 {
            let out = forward(params, &cfg, &x, &[0, 1], false, 0).unwrap();
            out.embeddings()
                .iter()
                .zip(&upstream)
                .map(|(z, g)| (z * g).sum())
                .sum()
        };

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        let mut probe = p.clone();
        for idx in 0..p.param_count() {
            let orig = probe.get_flat(idx);
            probe.set_flat(idx, orig + h);
            let up = scalar_loss(&probe);
            probe.set_flat(idx, orig - h);
            let down = scalar_loss(&probe);
            probe.set_flat(idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get_flat(idx);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-5);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }
}
