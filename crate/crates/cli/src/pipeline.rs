//! Shared wiring between the commands: dataset/checkpoint vocabulary
//! alignment, proxy resolution, threshold calibration, and the scoring
//! pipelines behind `eval` and `sweep`.

use std::time::Instant;

use closr_core::checkpoint::Checkpoint;
use closr_core::data::FlowDataset;
use closr_core::inference::{
    centroids_from_train, closed_set_probs, embed_features, predict_binary, predict_osr,
    score_osr, CentroidProxy, CentroidSet, ClassProxy, ScoreRecord,
};
use closr_core::metrics::{
    auroc, closed_set_report, fpr_at_recall, normalized_rank, open_set_metrics, pr_auc,
    ClassScoreMetrics, EvalReport,
};
use closr_core::{Error, Result};
use ndarray::{Array2, Axis};

use crate::config::RunConfig;

/// Test rows aligned against a checkpoint vocabulary.
pub struct AlignedData {
    pub data: FlowDataset,
    /// Per row: the checkpoint class id, or None for classes the model never
    /// trained on.
    pub ck_ids: Vec<Option<usize>>,
    /// Per row: belongs to the unknown/zero-day set for evaluation.
    pub unknown: Vec<bool>,
}

/// Map rows onto the checkpoint vocabulary. Classes named in `zero_day` and
/// classes missing from the checkpoint vocabulary count as unknown.
pub fn align_to_checkpoint(
    data: FlowDataset,
    ck: &Checkpoint,
    benign_label: &str,
    zero_day: &[String],
) -> Result<AlignedData> {
    if ck.class_names[0] != benign_label {
        return Err(Error::data(format!(
            "vocabulary mismatch: checkpoint benign class is {:?}, data uses {:?}",
            ck.class_names[0], benign_label
        )));
    }
    for name in zero_day {
        if ck.class_names.contains(name) {
            return Err(Error::config(format!(
                "zero-day class {name:?} is part of the checkpoint vocabulary; the model \
                 trained on it"
            )));
        }
    }
    let mut ck_ids = Vec::with_capacity(data.n_rows());
    let mut unknown = Vec::with_capacity(data.n_rows());
    for &label in data.labels() {
        let name = &data.class_names()[label];
        let ck_id = ck.class_names.iter().position(|n| n == name);
        ck_ids.push(ck_id);
        unknown.push(ck_id.is_none() || zero_day.contains(name));
    }
    Ok(AlignedData { data, ck_ids, unknown })
}

/// Rebuild a dataset in the checkpoint vocabulary, dropping rows of classes
/// the checkpoint does not know. Used to compute proxies from reference
/// data.
pub fn remap_to_checkpoint_vocab(source: &FlowDataset, ck: &Checkpoint) -> Result<FlowDataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, &label) in source.labels().iter().enumerate() {
        let name = &source.class_names()[label];
        if let Some(ck_id) = ck.class_names.iter().position(|n| n == name) {
            rows.push(i);
            labels.push(ck_id);
        }
    }
    if rows.is_empty() {
        return Err(Error::data("reference data shares no classes with the checkpoint"));
    }
    let features = source.features().select(Axis(0), &rows);
    FlowDataset::new(features, labels, ck.class_names.clone())
}

/// Proxy per head: the checkpoint centroids by default, or recomputed from
/// reference data for the ablation variants.
pub fn resolve_proxies(
    ck: &Checkpoint,
    method: CentroidProxy,
    reference: Option<&FlowDataset>,
) -> Result<CentroidSet> {
    if method == CentroidProxy::Centroid {
        let centroids = ck
            .centroids
            .as_ref()
            .ok_or_else(|| Error::data("checkpoint carries no centroids"))?;
        return Ok(CentroidSet::from_directions(centroids.clone()));
    }
    let source = reference.ok_or_else(|| {
        Error::config(
            "non-centroid proxies need reference data (use --proxy-data or --use-split)",
        )
    })?;
    let remapped = remap_to_checkpoint_vocab(source, ck)?;
    centroids_from_train(&ck.params, &ck.model_config, &ck.scaler, &remapped, method)
}

/// Empirical threshold from benign calibration scores: the smallest value
/// flagging at most `target_fpr` of them.
pub fn tau_from_target_fpr(benign_scores: &mut Vec<f64>, target_fpr: f64) -> Result<f64> {
    if benign_scores.is_empty() {
        return Err(Error::data("no benign rows available to calibrate the threshold"));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::config("target FPR must lie in [0,1]"));
    }
    benign_scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let allowed = (target_fpr * benign_scores.len() as f64).floor() as usize;
    if allowed >= benign_scores.len() {
        return Ok(benign_scores[benign_scores.len() - 1]);
    }
    Ok(benign_scores[allowed].next_up())
}

pub struct BinaryEvaluation {
    pub report: EvalReport,
    pub records: Vec<ScoreRecord>,
    pub scores: Vec<f64>,
}

/// Binary scoring and report assembly: per-attack-class AUROC and FPR@95
/// against the benign rows, group means, and embedding ranks.
pub fn evaluate_binary(
    ck: &Checkpoint,
    aligned: &AlignedData,
    proxies: &CentroidSet,
    cfg: &RunConfig,
    tau: Option<f64>,
) -> Result<BinaryEvaluation> {
    let started = Instant::now();
    let embedded = embed_features(
        &ck.params,
        &ck.model_config,
        &ck.scaler,
        aligned.data.features(),
        &[0],
    )?;
    let head0 = &embedded[0];
    let benign_proxy = &proxies.proxies[0];
    let scores: Vec<f64> =
        head0.rows().into_iter().map(|z| -benign_proxy.similarity(z)).collect();

    let data = &aligned.data;
    let benign_rows: Vec<usize> =
        (0..data.n_rows()).filter(|&i| aligned.ck_ids[i] == Some(0)).collect();
    if benign_rows.is_empty() {
        return Err(Error::data("evaluation data contains no benign rows"));
    }

    let mut per_class = Vec::new();
    for class in 0..data.n_classes() {
        let name = &data.class_names()[class];
        if name == &ck.class_names[0] {
            continue;
        }
        let rows = data.rows_of_class(class);
        if rows.is_empty() {
            continue;
        }
        let mut class_scores = Vec::with_capacity(benign_rows.len() + rows.len());
        let mut positives = Vec::with_capacity(benign_rows.len() + rows.len());
        for &i in benign_rows.iter().chain(&rows) {
            class_scores.push(scores[i]);
            positives.push(data.labels()[i] == class);
        }
        per_class.push(ClassScoreMetrics {
            class_name: name.clone(),
            zero_day: aligned.unknown[rows[0]],
            auroc: auroc(&class_scores, &positives)?,
            fpr_at_95: fpr_at_recall(&class_scores, &positives, 0.95)?,
            support: rows.len(),
        });
    }

    let group_mean = |zero_day: bool, pick: &dyn Fn(&ClassScoreMetrics) -> f64| {
        let group: Vec<f64> =
            per_class.iter().filter(|c| c.zero_day == zero_day).map(|c| pick(c)).collect();
        if group.is_empty() {
            None
        } else {
            Some(group.iter().sum::<f64>() / group.len() as f64)
        }
    };

    let (known_rank, zero_rank) = embedding_ranks(head0, &aligned.unknown);

    let records: Vec<ScoreRecord> = (0..data.n_rows())
        .map(|i| ScoreRecord {
            sample_index: i,
            true_label: aligned.ck_ids[i].map_or(-1, |c| c as i64),
            score: scores[i],
            probs: Vec::new(),
            predicted: tau.map(|t| i64::from(predict_binary(scores[i], t))),
        })
        .collect();

    let report = EvalReport {
        mode: "clad".into(),
        config: Some(cfg.to_json()),
        known_mean_auroc: group_mean(false, &|c| c.auroc),
        known_mean_fpr_at_95: group_mean(false, &|c| c.fpr_at_95),
        zero_day_mean_auroc: group_mean(true, &|c| c.auroc),
        zero_day_mean_fpr_at_95: group_mean(true, &|c| c.fpr_at_95),
        per_class,
        closed_set: None,
        macro_pr_auc: None,
        open_set_auc: None,
        open_auc: None,
        normalized_rank_known: known_rank,
        normalized_rank_zero_day: zero_rank,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(BinaryEvaluation { report, records, scores })
}

pub struct OsrEvaluation {
    pub report: EvalReport,
    pub records: Vec<ScoreRecord>,
    pub scores: Vec<f64>,
}

/// Open-set scoring and report assembly: closed-set metrics over known rows,
/// the OOD score of choice over everything, open-set AUC and its product
/// with closed-set accuracy.
pub fn evaluate_osr(
    ck: &Checkpoint,
    aligned: &AlignedData,
    proxies: &CentroidSet,
    cfg: &RunConfig,
    tau: Option<f64>,
) -> Result<OsrEvaluation> {
    let n_heads = ck.model_config.n_heads;
    if n_heads < 2 {
        return Err(Error::config("open-set evaluation needs a multi-head checkpoint"));
    }
    let started = Instant::now();
    let head_ids: Vec<usize> = (0..n_heads).collect();
    let embedded = embed_features(
        &ck.params,
        &ck.model_config,
        &ck.scaler,
        aligned.data.features(),
        &head_ids,
    )?;

    let data = &aligned.data;
    let n = data.n_rows();
    let mut probs_all = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let sims: Vec<f64> = (0..n_heads)
            .map(|c| proxies.proxies[c].similarity(embedded[c].row(i)))
            .collect();
        let probs = closed_set_probs(&sims);
        scores.push(score_osr(&sims, &probs, cfg.ood_score));
        probs_all.push(probs);
    }

    let known_rows: Vec<usize> = (0..n).filter(|&i| !aligned.unknown[i]).collect();
    if known_rows.is_empty() {
        return Err(Error::data("no known-class rows to evaluate"));
    }
    let argmax = |p: &[f64]| {
        let mut best = 0;
        for (k, v) in p.iter().enumerate().skip(1) {
            if *v > p[best] {
                best = k;
            }
        }
        best
    };
    let truth: Vec<usize> = known_rows
        .iter()
        .map(|&i| aligned.ck_ids[i].expect("known row has a checkpoint id"))
        .collect();
    let preds: Vec<usize> = known_rows.iter().map(|&i| argmax(&probs_all[i])).collect();
    let closed = closed_set_report(&preds, &truth, &ck.class_names)?;

    // Macro PR-AUC over the known classes, one-vs-rest on the posterior.
    let mut pr_values = Vec::new();
    for class in 0..n_heads {
        if !truth.contains(&class) {
            continue;
        }
        let class_scores: Vec<f64> =
            known_rows.iter().map(|&i| probs_all[i][class]).collect();
        let class_truth: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        pr_values.push(pr_auc(&class_scores, &class_truth)?);
    }
    let macro_pr_auc = Some(pr_values.iter().sum::<f64>() / pr_values.len() as f64);

    let has_unknown = aligned.unknown.iter().any(|&u| u);
    let (open_set_auc, open_auc) = if has_unknown {
        let (a, o) = open_set_metrics(&scores, &aligned.unknown, &preds, &truth)?;
        (Some(a), Some(o))
    } else {
        (None, None)
    };

    let (known_rank, zero_rank) = embedding_ranks(&embedded[0], &aligned.unknown);

    let records: Vec<ScoreRecord> = (0..n)
        .map(|i| ScoreRecord {
            sample_index: i,
            true_label: aligned.ck_ids[i].map_or(-1, |c| c as i64),
            score: scores[i],
            probs: probs_all[i].clone(),
            predicted: tau.map(|t| predict_osr(scores[i], t, &probs_all[i])),
        })
        .collect();

    let report = EvalReport {
        mode: "closr".into(),
        config: Some(cfg.to_json()),
        per_class: Vec::new(),
        known_mean_auroc: None,
        known_mean_fpr_at_95: None,
        zero_day_mean_auroc: None,
        zero_day_mean_fpr_at_95: None,
        closed_set: Some(closed),
        macro_pr_auc,
        open_set_auc,
        open_auc,
        normalized_rank_known: known_rank,
        normalized_rank_zero_day: zero_rank,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(OsrEvaluation { report, records, scores })
}

fn embedding_ranks(head0: &Array2<f64>, unknown: &[bool]) -> (Option<f64>, Option<f64>) {
    let known_rows: Vec<usize> = (0..unknown.len()).filter(|&i| !unknown[i]).collect();
    let zero_rows: Vec<usize> = (0..unknown.len()).filter(|&i| unknown[i]).collect();
    let rank_of = |rows: &[usize]| {
        if rows.is_empty() {
            None
        } else {
            Some(normalized_rank(&head0.select(Axis(0), rows)))
        }
    };
    (rank_of(&known_rows), rank_of(&zero_rows))
}

/// Benign rows of a dataset scored against proxy 0 (used for threshold
/// calibration).
pub fn benign_binary_scores(
    ck: &Checkpoint,
    proxies: &CentroidSet,
    calibration: &FlowDataset,
    benign_label: &str,
) -> Result<Vec<f64>> {
    let benign_id = calibration
        .class_id(benign_label)
        .ok_or_else(|| Error::data("calibration data has no benign class"))?;
    let rows = calibration.rows_of_class(benign_id);
    if rows.is_empty() {
        return Err(Error::data("calibration data has no benign rows"));
    }
    let features = calibration.gather(&rows);
    let embedded =
        embed_features(&ck.params, &ck.model_config, &ck.scaler, &features, &[0])?;
    Ok(embedded[0]
        .rows()
        .into_iter()
        .map(|z| -proxies.proxies[0].similarity(z))
        .collect())
}

/// OSR scores of the benign rows of a calibration set.
pub fn benign_osr_scores(
    ck: &Checkpoint,
    proxies: &CentroidSet,
    calibration: &FlowDataset,
    benign_label: &str,
    variant: closr_core::inference::OodScore,
) -> Result<Vec<f64>> {
    let benign_id = calibration
        .class_id(benign_label)
        .ok_or_else(|| Error::data("calibration data has no benign class"))?;
    let rows = calibration.rows_of_class(benign_id);
    if rows.is_empty() {
        return Err(Error::data("calibration data has no benign rows"));
    }
    let features = calibration.gather(&rows);
    let n_heads = ck.model_config.n_heads;
    let head_ids: Vec<usize> = (0..n_heads).collect();
    let embedded =
        embed_features(&ck.params, &ck.model_config, &ck.scaler, &features, &head_ids)?;
    let mut out = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        let sims: Vec<f64> = (0..n_heads)
            .map(|c| proxies.proxies[c].similarity(embedded[c].row(i)))
            .collect();
        let probs = closed_set_probs(&sims);
        out.push(score_osr(&sims, &probs, variant));
    }
    Ok(out)
}

/// The binary AUROC of a validation split under a quantized checkpoint,
/// exactly as `eval` would compute it from a written file. Used by `sweep`.
pub fn validation_auroc(ck: &Checkpoint, validation: &FlowDataset) -> Result<f64> {
    let remapped = remap_to_checkpoint_vocab(validation, ck)?;
    let centroids = ck
        .centroids
        .as_ref()
        .ok_or_else(|| Error::data("checkpoint carries no centroids"))?;
    let embedded = embed_features(
        &ck.params,
        &ck.model_config,
        &ck.scaler,
        remapped.features(),
        &[0],
    )?;
    let mu = &centroids[0];
    let scores: Vec<f64> = embedded[0].rows().into_iter().map(|z| -z.dot(mu)).collect();
    let positives: Vec<bool> = remapped.labels().iter().map(|&l| l != 0).collect();
    auroc(&scores, &positives)
}
