//! Training objectives with analytic gradients: binary cross-entropy,
//! supervised contrastive, the benign-anchored hyperspherical loss (binary
//! anomaly detection), its per-class open-set extension, and the symmetric
//! all-anchors variant used as an ablation baseline.
//!
//! All contrastive losses operate on unit-norm embeddings and depend only on
//! pairwise dot products, so they are invariant under a common rotation of
//! the embedding space. Gradients are taken with respect to the embeddings;
//! [`crate::model::backward`] maps them onto network parameters.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::BENIGN_CLASS;
use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;

/// Loss family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    SupCon,
    Clad,
    Closr,
    /// Symmetric variant: every row anchors against its own class. Used as
    /// the classic contrastive-loss baseline.
    Contrastive,
}

/// Hyperparameters shared by the loss family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Hinge margin on the rescaled cosine distance, in (0,1].
    pub margin: f64,
    /// Square the distance terms (sharper gradients near the extremes).
    pub squared: bool,
    /// Positive/negative term balance: weights 2*alpha and 2*(1-alpha), so
    /// alpha = 0.5 recovers unit coefficients on both terms.
    pub alpha: f64,
    /// Temperature for the supervised contrastive loss.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Clad, margin: 1.0, squared: true, alpha: 0.5, temperature: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::config("margin must lie in (0,1]"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("alpha must lie in (0,1)"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// A labeled batch of embeddings. Positive/negative index sets per anchor are
/// derived on demand from the labels.
pub struct BatchView<'a> {
    pub batch: &'a EmbeddingBatch,
    pub labels: &'a [usize],
}

impl<'a> BatchView<'a> {
    pub fn new(batch: &'a EmbeddingBatch, labels: &'a [usize]) -> Result<Self> {
        if batch.n_rows() != labels.len() {
            return Err(Error::data("label count does not match batch rows"));
        }
        Ok(Self { batch, labels })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    /// Binary labels: 0 benign, 1 malicious.
    pub fn binary_labels(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l != BENIGN_CLASS)).collect()
    }
}

/// Loss value plus gradients with respect to each requested head's
/// embeddings, aligned with `batch.head_ids()`.
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Array2<f64>>,
    /// Anchors skipped because both index sets were empty (or, for the
    /// supervised contrastive loss, the positive set was).
    pub skipped_anchors: usize,
}

/// Rescaled cosine distance between unit vectors: (1 - z.z')/2, in [0,1].
pub fn cosine_distance(z: ArrayView1<f64>, z2: ArrayView1<f64>) -> f64 {
    debug_assert!((z.dot(&z) - 1.0).abs() < 1e-6, "input must be unit norm");
    debug_assert!((z2.dot(&z2) - 1.0).abs() < 1e-6, "input must be unit norm");
    pair_distance(z, z2)
}

/// Distance used inside the losses. Embeddings arriving here are unit rows
/// except for signaled degenerate rows (zero vectors from epsilon
/// normalization), which this handles without asserting.
fn pair_distance(z: ArrayView1<f64>, z2: ArrayView1<f64>) -> f64 {
    ((1.0 - z.dot(&z2)) / 2.0).clamp(0.0, 1.0)
}

/// Mean binary cross-entropy over logits, in the numerically stable
/// log-sum-exp form, with its gradient. `targets` holds 0/1 labels.
pub fn bce_loss(logits: &[f64], targets: &[u8]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() {
        return Err(Error::data("logits and targets must have equal length"));
    }
    if logits.is_empty() {
        return Err(Error::data("empty batch"));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(targets) {
        let y = f64::from(t);
        // max(l,0) - l*y + ln(1 + exp(-|l|))
        total += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        let sigma = 1.0 / (1.0 + (-l).exp());
        grad.push((sigma - y) / n);
    }
    Ok((total / n, grad))
}

fn others_by<'v>(view: &'v BatchView, i: usize) -> impl Iterator<Item = usize> + 'v {
    (0..view.n_rows()).filter(move |&j| j != i)
}

/// Supervised contrastive loss over head-0 embeddings. Anchors whose
/// positive set is empty are skipped and counted; the mean runs over the
/// anchors actually evaluated.
pub fn supcon_loss(view: &BatchView, temperature: f64) -> Result<LossOutput> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let z = view.batch.head(0)?;
    let b = view.n_rows();
    if b == 0 {
        return Err(Error::data("empty batch"));
    }
    let mut grad = Array2::<f64>::zeros(z.raw_dim());
    let mut skipped = 0usize;
    let mut active: Vec<usize> = Vec::with_capacity(b);
    for i in 0..b {
        if others_by(view, i).any(|j| view.labels[j] == view.labels[i]) {
            active.push(i);
        } else {
            skipped += 1;
        }
    }
    if active.is_empty() {
        return Err(Error::data("every anchor lacks a positive; supcon undefined"));
    }
    let scale = 1.0 / active.len() as f64;

    let mut total = 0.0;
    for &i in &active {
        let zi = z.row(i);
        let others: Vec<usize> = others_by(view, i).collect();
        let positives: Vec<usize> =
            others.iter().copied().filter(|&j| view.labels[j] == view.labels[i]).collect();
        let sims: Vec<f64> = others.iter().map(|&j| zi.dot(&z.row(j)) / temperature).collect();
        let max_sim = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp_sum: f64 = sims.iter().map(|s| (s - max_sim).exp()).sum();
        let lse = max_sim + exp_sum.ln();
        let inv_p = 1.0 / positives.len() as f64;

        for &p in &positives {
            let sim_p = zi.dot(&z.row(p)) / temperature;
            total += scale * inv_p * (lse - sim_p);
        }

        // d/dz_i: (softmax-weighted mean of others - mean of positives)/tau
        let mut dzi = Array1::<f64>::zeros(z.ncols());
        for (slot, &a) in others.iter().enumerate() {
            let softmax = (sims[slot] - max_sim).exp() / exp_sum;
            dzi.scaled_add(softmax / temperature, &z.row(a));
            // d/dz_a from the log-sum-exp term
            let mut row = grad.row_mut(a);
            row.scaled_add(scale * softmax / temperature, &zi);
        }
        for &p in &positives {
            dzi.scaled_add(-inv_p / temperature, &z.row(p));
            let mut row = grad.row_mut(p);
            row.scaled_add(-scale * inv_p / temperature, &zi);
        }
        let mut row = grad.row_mut(i);
        row.scaled_add(scale, &dzi);
    }

    let mut grads = vec![Array2::zeros(z.raw_dim()); view.batch.head_ids().len()];
    let slot0 = view.batch.head_ids().iter().position(|&h| h == 0).expect("head 0 present");
    grads[slot0] = grad;
    Ok(LossOutput { value: total, grads, skipped_anchors: skipped })
}

/// Core anchored hinge term shared by the binary, per-class and symmetric
/// losses: for each anchor, the mean q-th power distance to its positives
/// plus the mean hinged q-th power margin violation over its negatives,
/// weighted 2*alpha / 2*(1-alpha). Returns (value, grad, skipped).
fn anchored_terms(
    z: &Array2<f64>,
    labels: &[usize],
    anchors: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>, usize)> {
    let q = if cfg.squared { 2.0 } else { 1.0 };
    let m = cfg.margin;
    let w_pos = 2.0 * cfg.alpha;
    let w_neg = 2.0 * (1.0 - cfg.alpha);

    let mut per_anchor = Vec::with_capacity(anchors.len());
    let mut skipped = 0usize;
    // First pass: values and active anchor count.
    for &i in anchors {
        let zi = z.row(i);
        let mut pos_sum = 0.0;
        let mut n_pos = 0usize;
        let mut neg_sum = 0.0;
        let mut n_neg = 0usize;
        for j in 0..z.nrows() {
            if j == i {
                continue;
            }
            let d = pair_distance(zi, z.row(j));
            if labels[j] == labels[i] {
                pos_sum += d.powf(q);
                n_pos += 1;
            } else {
                neg_sum += (m - d).max(0.0).powf(q);
                n_neg += 1;
            }
        }
        if n_pos == 0 && n_neg == 0 {
            skipped += 1;
            per_anchor.push(None);
            continue;
        }
        let mut c = 0.0;
        if n_pos > 0 {
            c += w_pos * pos_sum / n_pos as f64;
        }
        if n_neg > 0 {
            c += w_neg * neg_sum / n_neg as f64;
        }
        per_anchor.push(Some((c, n_pos, n_neg)));
    }
    let n_active = anchors.len() - skipped;
    if n_active == 0 {
        return Err(Error::data("every anchor was skipped; loss undefined"));
    }
    let scale = 1.0 / n_active as f64;
    let value = per_anchor.iter().flatten().map(|(c, _, _)| c).sum::<f64>() * scale;

    // Second pass: gradients. d d(z_i,z_j)/dz_i = -z_j/2.
    let mut grad = Array2::<f64>::zeros(z.raw_dim());
    for (slot, &i) in anchors.iter().enumerate() {
        let Some((_, n_pos, n_neg)) = per_anchor[slot] else { continue };
        let zi = z.row(i).to_owned();
        for j in 0..z.nrows() {
            if j == i {
                continue;
            }
            let zj = z.row(j);
            let d = pair_distance(zi.view(), zj);
            let coeff = if labels[j] == labels[i] {
                if n_pos == 0 {
                    continue;
                }
                // d/dd of d^q
                scale * w_pos / n_pos as f64 * q * d.powf(q - 1.0)
            } else {
                if n_neg == 0 {
                    continue;
                }
                let hinge = m - d;
                if hinge <= 0.0 {
                    continue;
                }
                // d/dd of (m-d)^q
                -scale * w_neg / n_neg as f64 * q * hinge.powf(q - 1.0)
            };
            let mut gi = grad.row_mut(i);
            gi.scaled_add(-coeff / 2.0, &zj);
            let mut gj = grad.row_mut(j);
            gj.scaled_add(-coeff / 2.0, &zi.view());
        }
    }
    Ok((value, grad, skipped))
}

/// Binary anomaly-detection loss: anchors restricted to benign rows, head-0
/// embeddings, positives = other benign rows, negatives = malicious rows.
/// With margin 1, squared distances and alpha 0.5 this is the canonical
/// form; the switches generalize it for ablations.
pub fn clad_loss(view: &BatchView, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let z = view.batch.head(0)?;
    let binary: Vec<usize> = view.labels.iter().map(|&l| usize::from(l != BENIGN_CLASS)).collect();
    let anchors: Vec<usize> = (0..view.n_rows()).filter(|&i| binary[i] == 0).collect();
    if anchors.is_empty() {
        return Err(Error::data("no benign rows in batch; loss undefined"));
    }
    let (value, grad, skipped) = anchored_terms(z, &binary, &anchors, cfg)?;
    let mut grads = vec![Array2::zeros(z.raw_dim()); view.batch.head_ids().len()];
    let slot0 = view.batch.head_ids().iter().position(|&h| h == 0).expect("head 0 present");
    grads[slot0] = grad;
    Ok(LossOutput { value, grads, skipped_anchors: skipped })
}

/// Symmetric variant: every row anchors within its own class under head 0.
pub fn contrastive_loss(view: &BatchView, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let z = view.batch.head(0)?;
    if view.n_rows() == 0 {
        return Err(Error::data("empty batch"));
    }
    let anchors: Vec<usize> = (0..view.n_rows()).collect();
    let (value, grad, skipped) = anchored_terms(z, view.labels, &anchors, cfg)?;
    let mut grads = vec![Array2::zeros(z.raw_dim()); view.batch.head_ids().len()];
    let slot0 = view.batch.head_ids().iter().position(|&h| h == 0).expect("head 0 present");
    grads[slot0] = grad;
    Ok(LossOutput { value, grads, skipped_anchors: skipped })
}

/// Open-set loss: the sum over classes present in the batch of the anchored
/// loss with class-c rows as anchors under head c. Labels must be head
/// indices (0..n_heads). Classes absent from the batch contribute zero.
pub fn closr_loss(view: &BatchView, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let n_heads = view.batch.head_ids().len();
    if view.n_rows() == 0 {
        return Err(Error::data("empty batch"));
    }
    if let Some(&bad) = view.labels.iter().find(|&&l| l >= n_heads) {
        return Err(Error::config(format!("label {bad} has no projection head")));
    }
    for (slot, &h) in view.batch.head_ids().iter().enumerate() {
        if h != slot {
            return Err(Error::config("open-set loss requires heads 0..n_heads"));
        }
    }

    let mut value = 0.0;
    let mut skipped = 0usize;
    let mut contributed = false;
    let mut grads: Vec<Array2<f64>> = view
        .batch
        .embeddings()
        .iter()
        .map(|e| Array2::zeros(e.raw_dim()))
        .collect();
    for class in 0..n_heads {
        let anchors: Vec<usize> =
            (0..view.n_rows()).filter(|&i| view.labels[i] == class).collect();
        if anchors.is_empty() {
            continue;
        }
        let z = view.batch.head(class)?;
        match anchored_terms(z, view.labels, &anchors, cfg) {
            Ok((v, g, s)) => {
                value += v;
                skipped += s;
                grads[class] = g;
                contributed = true;
            }
            // A class whose anchors all lack counterparts contributes zero.
            Err(_) => skipped += anchors.len(),
        }
    }
    if !contributed {
        return Err(Error::data("no class term could be evaluated"));
    }
    Ok(LossOutput { value, grads, skipped_anchors: skipped })
}

/// Dispatch a trainable loss. Binary cross-entropy operates on logits, not
/// embeddings, so it is not available through this path.
pub fn evaluate(view: &BatchView, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::Clad => clad_loss(view, cfg),
        LossKind::Closr => closr_loss(view, cfg),
        LossKind::SupCon => supcon_loss(view, cfg.temperature),
        LossKind::Contrastive => contrastive_loss(view, cfg),
        LossKind::Bce => {
            Err(Error::config("bce operates on logits and cannot train the embedding heads"))
        }
    }
}
