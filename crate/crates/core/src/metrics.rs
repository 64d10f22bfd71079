//! Threshold-free and closed-set evaluation metrics. All metrics are
//! deterministic; nothing here samples.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("scores contain NaN"));
    }
    Ok(())
}

/// Area under the ROC curve as the Mann-Whitney statistic with half credit
/// for ties, computed via average ranks in O(M log M).
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::data("scores and labels must have equal length"));
    }
    check_scores(scores)?;
    let p = positives.iter().filter(|&&x| x).count();
    let n = positives.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::data("auroc needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Average rank of the tie group [i, j), 1-based.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positives[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// False positive rate at the largest threshold achieving the target recall,
/// with scores at or above the threshold flagged positive.
pub fn fpr_at_recall(scores: &[f64], positives: &[bool], recall_target: f64) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::data("scores and labels must have equal length"));
    }
    if !(0.0..=1.0).contains(&recall_target) {
        return Err(Error::config("recall target must lie in [0,1]"));
    }
    check_scores(scores)?;
    let mut pos: Vec<f64> = scores
        .iter()
        .zip(positives)
        .filter_map(|(s, &p)| p.then_some(*s))
        .collect();
    let n_pos = pos.len();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("fpr_at_recall needs at least one positive and one negative"));
    }
    // Threshold = k-th largest positive score with k = ceil(target * P).
    let k = ((recall_target * n_pos as f64).ceil() as usize).max(1);
    pos.sort_by(|a, b| b.partial_cmp(a).expect("no NaN"));
    let threshold = pos[k - 1];
    let fp = scores
        .iter()
        .zip(positives)
        .filter(|(s, &p)| !p && **s >= threshold)
        .count();
    Ok(fp as f64 / n_neg as f64)
}

/// One-vs-rest confusion metrics for one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassReport {
    pub class_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fp_rate: f64,
    pub support: usize,
}

/// Closed-set accuracy plus macro-averaged one-vs-rest metrics over the
/// classes present in the truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClosedSetReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_fp_rate: f64,
    pub per_class: Vec<PerClassReport>,
}

/// Standard confusion-count report. Classes with zero predicted positives
/// get precision 0; macro averages run over classes present in the truth.
pub fn closed_set_report(
    predicted: &[usize],
    truth: &[usize],
    class_names: &[String],
) -> Result<ClosedSetReport> {
    if predicted.len() != truth.len() {
        return Err(Error::data("prediction and truth lengths differ"));
    }
    if predicted.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    if predicted.iter().chain(truth).any(|&l| l >= class_names.len()) {
        return Err(Error::data("label outside vocabulary"));
    }
    let total = truth.len() as f64;
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64;

    let mut per_class = Vec::new();
    for (class, name) in class_names.iter().enumerate() {
        let support = truth.iter().filter(|&&t| t == class).count();
        if support == 0 {
            continue;
        }
        let tp = predicted
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p == class && t == class)
            .count() as f64;
        let fp = predicted
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p == class && t != class)
            .count() as f64;
        let fnc = support as f64 - tp;
        let tn = total - tp - fp - fnc;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let fp_rate = if fp + tn > 0.0 { fp / (fp + tn) } else { 0.0 };
        per_class.push(PerClassReport {
            class_name: name.clone(),
            precision,
            recall,
            f1,
            fp_rate,
            support,
        });
    }
    let k = per_class.len() as f64;
    Ok(ClosedSetReport {
        accuracy: correct / total,
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        macro_fp_rate: per_class.iter().map(|c| c.fp_rate).sum::<f64>() / k,
        per_class,
    })
}

/// Area under the precision-recall curve in the average-precision form:
/// precision after each distinct threshold weighted by the recall step.
pub fn pr_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::data("scores and labels must have equal length"));
    }
    check_scores(scores)?;
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::data("pr_auc needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));

    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_tp = 0.0;
        let mut group_fp = 0.0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positives[order[j]] {
                group_tp += 1.0;
            } else {
                group_fp += 1.0;
            }
            j += 1;
        }
        tp += group_tp;
        fp += group_fp;
        let precision = tp / (tp + fp);
        area += precision * group_tp / n_pos as f64;
        i = j;
    }
    Ok(area)
}

/// Open-set separation AUC and its product with closed-set accuracy.
/// `closed_predicted` / `closed_truth` cover only the known-class rows.
pub fn open_set_metrics(
    osr_scores: &[f64],
    is_unknown: &[bool],
    closed_predicted: &[usize],
    closed_truth: &[usize],
) -> Result<(f64, f64)> {
    if closed_predicted.len() != closed_truth.len() {
        return Err(Error::data("closed-set prediction and truth lengths differ"));
    }
    if closed_truth.is_empty() {
        return Err(Error::data("no known rows for closed-set accuracy"));
    }
    let open_set_auc = auroc(osr_scores, is_unknown)?;
    let accuracy = closed_predicted
        .iter()
        .zip(closed_truth)
        .filter(|(p, t)| p == t)
        .count() as f64
        / closed_truth.len() as f64;
    Ok((open_set_auc, accuracy * open_set_auc))
}

/// Per-attack-class threshold-free metrics (benign vs. that class).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassScoreMetrics {
    pub class_name: String,
    pub zero_day: bool,
    pub auroc: f64,
    pub fpr_at_95: f64,
    pub support: usize,
}

/// Aggregated evaluation results. Binary runs fill the per-class block,
/// open-set runs fill the closed/open-set block; both report embedding
/// ranks. The scoring wall time is kept out of the serialized form so that
/// repeated evaluations produce byte-identical artifacts; the CLI reports it
/// separately.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_class: Vec<ClassScoreMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub known_mean_auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub known_mean_fpr_at_95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub zero_day_mean_auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub zero_day_mean_fpr_at_95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub closed_set: Option<ClosedSetReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub macro_pr_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub open_set_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub open_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalized_rank_known: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalized_rank_zero_day: Option<f64>,
    #[serde(skip)]
    pub wall_ms: f64,
}

impl EvalReport {
    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flatten the scalar fields into one CSV row for sweep aggregation.
    pub fn csv_header() -> &'static str {
        "mode,known_mean_auroc,known_mean_fpr_at_95,zero_day_mean_auroc,zero_day_mean_fpr_at_95,\
         closed_set_accuracy,macro_f1,macro_pr_auc,open_set_auc,open_auc,\
         normalized_rank_known,normalized_rank_zero_day"
    }

    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            opt(self.known_mean_auroc),
            opt(self.known_mean_fpr_at_95),
            opt(self.zero_day_mean_auroc),
            opt(self.zero_day_mean_fpr_at_95),
            opt(self.closed_set.as_ref().map(|c| c.accuracy)),
            opt(self.closed_set.as_ref().map(|c| c.macro_f1)),
            opt(self.macro_pr_auc),
            opt(self.open_set_auc),
            opt(self.open_auc),
            opt(self.normalized_rank_known),
            opt(self.normalized_rank_zero_day),
        )
    }
}

/// Count of singular values at or above `relative_tolerance` times the
/// largest. A zero matrix has rank 0.
pub fn effective_rank(embeddings: &Array2<f64>, relative_tolerance: f64) -> usize {
    let (m, f_o) = embeddings.dim();
    if m == 0 || f_o == 0 {
        return 0;
    }
    let flat: Vec<f64> = embeddings.iter().copied().collect();
    let matrix = DMatrix::from_row_slice(m, f_o, &flat);
    let singular = matrix.singular_values();
    let max = singular.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    singular.iter().filter(|&&s| s >= relative_tolerance * max).count()
}

/// Numerical rank of an embedding matrix (singular values at or above 1e-6
/// of the largest) divided by the embedding dimension. A zero matrix yields
/// 0.
pub fn normalized_rank(embeddings: &Array2<f64>) -> f64 {
    let f_o = embeddings.ncols();
    if f_o == 0 {
        return 0.0;
    }
    effective_rank(embeddings, 1e-6) as f64 / f_o as f64
}
