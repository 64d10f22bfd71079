//! Centroid computation, class-proxy variants, OOD scores, and decision
//! rules. Everything here is a pure function of frozen parameters and
//! centroids, so concurrent scoring is safe.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureScaler, FlowDataset};
use crate::error::{Error, Result};
use crate::losses::cosine_distance;
use crate::model::{forward, ModelConfig, NetworkParameters};

/// How a class's representative point in embedded space is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidProxy {
    /// Normalized mean of the class embeddings (the default).
    Centroid,
    /// Normalized coordinate-wise median.
    Median,
    /// Normalized mean after discarding the 10% of rows farthest from the
    /// plain centroid.
    TrimmedMean,
    /// The member row minimizing summed cosine distance to all rows.
    Medoid,
    /// Keep every row; score against the nearest stored row.
    Neighbour,
}

/// A class representative: either a single unit direction or, for the
/// nearest-neighbour proxy, the full stored row set.
#[derive(Debug, Clone)]
pub enum ClassProxy {
    Direction(Array1<f64>),
    Rows(Array2<f64>),
}

impl ClassProxy {
    /// Cosine similarity of an embedding to the proxy; for stored rows this
    /// is the similarity to the nearest row.
    pub fn similarity(&self, z: ArrayView1<f64>) -> f64 {
        match self {
            ClassProxy::Direction(mu) => z.dot(mu),
            ClassProxy::Rows(rows) => rows
                .rows()
                .into_iter()
                .map(|r| z.dot(&r))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// One proxy per head, in head order.
#[derive(Debug, Clone)]
pub struct CentroidSet {
    pub proxies: Vec<ClassProxy>,
    pub method: CentroidProxy,
}

impl CentroidSet {
    /// Unit mean directions, available only when every proxy is a direction.
    pub fn directions(&self) -> Option<Vec<Array1<f64>>> {
        self.proxies
            .iter()
            .map(|p| match p {
                ClassProxy::Direction(mu) => Some(mu.clone()),
                ClassProxy::Rows(_) => None,
            })
            .collect()
    }

    pub fn from_directions(directions: Vec<Array1<f64>>) -> Self {
        Self {
            proxies: directions.into_iter().map(ClassProxy::Direction).collect(),
            method: CentroidProxy::Centroid,
        }
    }
}

fn normalized(v: Array1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm < 1e-12 {
        return Err(Error::numeric("degenerate class proxy: zero mean direction"));
    }
    Ok(v / norm)
}

/// Compute a class representative from the class's embedding rows.
pub fn compute_proxy(embeddings: &Array2<f64>, method: CentroidProxy) -> Result<ClassProxy> {
    let m = embeddings.nrows();
    if m == 0 {
        return Err(Error::data("cannot compute a class proxy from zero embeddings"));
    }
    match method {
        CentroidProxy::Centroid => {
            let mean = embeddings.sum_axis(Axis(0));
            Ok(ClassProxy::Direction(normalized(mean)?))
        }
        CentroidProxy::Median => {
            let mut median = Array1::zeros(embeddings.ncols());
            let mut col = Vec::with_capacity(m);
            for j in 0..embeddings.ncols() {
                col.clear();
                col.extend(embeddings.column(j).iter().copied());
                col.sort_by(|a, b| a.partial_cmp(b).expect("finite embedding"));
                median[j] =
                    if m % 2 == 1 { col[m / 2] } else { 0.5 * (col[m / 2 - 1] + col[m / 2]) };
            }
            Ok(ClassProxy::Direction(normalized(median)?))
        }
        CentroidProxy::TrimmedMean => {
            let ClassProxy::Direction(center) =
                compute_proxy(embeddings, CentroidProxy::Centroid)?
            else {
                unreachable!()
            };
            let mut order: Vec<usize> = (0..m).collect();
            let dist: Vec<f64> = (0..m)
                .map(|i| cosine_distance(embeddings.row(i), center.view()))
                .collect();
            // Farthest rows first; index breaks ties deterministically.
            order.sort_by(|&a, &b| {
                dist[b].partial_cmp(&dist[a]).expect("finite distance").then(a.cmp(&b))
            });
            let drop = m / 10;
            let kept = &order[drop..];
            let mut mean = Array1::zeros(embeddings.ncols());
            for &i in kept {
                mean = mean + embeddings.row(i);
            }
            Ok(ClassProxy::Direction(normalized(mean)?))
        }
        CentroidProxy::Medoid => {
            let mut best = (f64::INFINITY, 0usize);
            for i in 0..m {
                let total: f64 = (0..m)
                    .map(|j| cosine_distance(embeddings.row(i), embeddings.row(j)))
                    .sum();
                if total < best.0 {
                    best = (total, i);
                }
            }
            Ok(ClassProxy::Direction(embeddings.row(best.1).to_owned()))
        }
        CentroidProxy::Neighbour => Ok(ClassProxy::Rows(embeddings.clone())),
    }
}

/// Scale a feature matrix and run the frozen encoder in inference mode,
/// chunked to bound memory. Returns one stacked embedding matrix per
/// requested head.
pub fn embed_features(
    params: &NetworkParameters,
    cfg: &ModelConfig,
    scaler: &FeatureScaler,
    features: &Array2<f64>,
    head_ids: &[usize],
) -> Result<Vec<Array2<f64>>> {
    const CHUNK: usize = 4096;
    let n = features.nrows();
    let mut out: Vec<Array2<f64>> = head_ids.iter().map(|_| Array2::zeros((n, cfg.f_o))).collect();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let x = scaler.transform(&features.select(Axis(0), &rows));
        let emb = forward(params, cfg, &x, head_ids, false, 0)?;
        for (slot, &hid) in emb.head_ids().iter().enumerate() {
            let dest = head_ids.iter().position(|&h| h == hid).expect("requested head");
            out[dest]
                .slice_mut(ndarray::s![start..end, ..])
                .assign(&emb.embeddings()[slot]);
        }
        start = end;
    }
    Ok(out)
}

/// Compute one class proxy per head from a train split: head 0 uses the
/// benign rows; when several heads exist, head c uses the rows of class c.
/// Labels must be head-aligned (compact vocabulary).
pub fn centroids_from_train(
    params: &NetworkParameters,
    cfg: &ModelConfig,
    scaler: &FeatureScaler,
    train: &FlowDataset,
    method: CentroidProxy,
) -> Result<CentroidSet> {
    let head_ids: Vec<usize> = (0..cfg.n_heads).collect();
    let mut proxies = Vec::with_capacity(cfg.n_heads);
    for &head in &head_ids {
        let rows = train.rows_of_class(head);
        if rows.is_empty() {
            return Err(Error::data(format!("no training rows for class/head {head}")));
        }
        let class_features = train.gather(&rows);
        let embedded = embed_features(params, cfg, scaler, &class_features, &[head])?;
        proxies.push(compute_proxy(&embedded[0], method)?);
    }
    Ok(CentroidSet { proxies, method })
}

/// Binary OOD score: the negative cosine similarity to the benign mean
/// direction. -1 is a perfect benign match, +1 antipodal.
pub fn score_binary(z: ArrayView1<f64>, mu: ArrayView1<f64>) -> f64 {
    -z.dot(&mu)
}

/// Binary OOD score against an arbitrary class proxy.
pub fn score_binary_proxy(z: ArrayView1<f64>, proxy: &ClassProxy) -> f64 {
    -proxy.similarity(z)
}

/// Binary decision: benign (0) iff the score falls below the threshold;
/// scores at or above it are malicious (1).
pub fn predict_binary(score: f64, tau: f64) -> u8 {
    u8::from(score >= tau)
}

/// Closed-set posterior over known classes from per-head centroid
/// similarities, via a max-subtracted softmax.
pub fn closed_set_probs(similarities: &[f64]) -> Vec<f64> {
    let max = similarities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = similarities.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Open-set OOD score family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScore {
    /// Negative posterior-weighted sum of squared similarities; in [-1,0].
    WeightedGaussian,
    /// Negative squared similarity of the predicted class only.
    Gaussian,
    /// Negative log-sum-exp of the similarities.
    Energy,
}

/// OOD score for one sample given its per-head similarities and closed-set
/// posterior.
pub fn score_osr(similarities: &[f64], probs: &[f64], variant: OodScore) -> f64 {
    match variant {
        OodScore::WeightedGaussian => {
            -similarities.iter().zip(probs).map(|(s, p)| p * s * s).sum::<f64>()
        }
        OodScore::Gaussian => {
            let best = argmax(probs);
            -similarities[best] * similarities[best]
        }
        OodScore::Energy => {
            let max = similarities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = similarities.iter().map(|s| (s - max).exp()).sum();
            -(max + sum.ln())
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Open-set decision: unknown (-1) iff the score exceeds the threshold,
/// otherwise the closed-set argmax (lowest index wins ties).
pub fn predict_osr(score: f64, tau: f64, probs: &[f64]) -> i64 {
    if score > tau {
        -1
    } else {
        argmax(probs) as i64
    }
}

/// Scores and predictions for one evaluated sample.
#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub sample_index: usize,
    pub true_label: i64,
    pub score: f64,
    pub probs: Vec<f64>,
    pub predicted: Option<i64>,
}

/// Write score records as CSV: sample_index, true_label, s, p_0..p_{K-1},
/// predicted_label (empty when no threshold was supplied).
pub fn write_score_dump<W: Write>(
    out: &mut W,
    records: &[ScoreRecord],
    n_probs: usize,
) -> Result<()> {
    let mut header = String::from("sample_index,true_label,s");
    for c in 0..n_probs {
        header.push_str(&format!(",p_{c}"));
    }
    header.push_str(",predicted_label\n");
    out.write_all(header.as_bytes())?;
    for r in records {
        let mut line = format!("{},{},{}", r.sample_index, r.true_label, r.score);
        for c in 0..n_probs {
            let p = r.probs.get(c).copied().unwrap_or(0.0);
            line.push_str(&format!(",{p}"));
        }
        match r.predicted {
            Some(p) => line.push_str(&format!(",{p}\n")),
            None => line.push_str(",\n"),
        }
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}
