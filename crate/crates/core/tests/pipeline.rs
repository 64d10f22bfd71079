//! Library-level end-to-end checks on synthetic blobs: train, freeze,
//! score, evaluate.

use closr_core::data::{fit_scaler, split_holdout, synth_blobs, SplitSpec};
use closr_core::inference::{centroids_from_train, embed_features, CentroidProxy, ClassProxy};
use closr_core::losses::{LossConfig, LossKind};
use closr_core::metrics::{auroc, effective_rank};
use closr_core::model::ModelConfig;
use closr_core::optim::{train, TrainConfig};

struct TrainedSetup {
    scores: Vec<f64>,
    labels: Vec<usize>,
    known_embeddings: ndarray::Array2<f64>,
    zero_day_embeddings: ndarray::Array2<f64>,
}

struct SetupSpec {
    separation: f64,
    seed: u64,
    n_per_class: usize,
    f: usize,
    d_model: usize,
    depth: usize,
    f_o: usize,
    epochs: usize,
}

impl Default for SetupSpec {
    fn default() -> Self {
        Self {
            separation: 6.0,
            seed: 3,
            n_per_class: 120,
            f: 12,
            d_model: 32,
            depth: 2,
            f_o: 8,
            epochs: 40,
        }
    }
}

fn train_and_score(separation: f64, seed: u64) -> TrainedSetup {
    train_and_score_with(SetupSpec { separation, seed, ..SetupSpec::default() })
}

fn train_and_score_with(setup: SetupSpec) -> TrainedSetup {
    let seed = setup.seed;
    let synth = synth_blobs(4, setup.n_per_class, setup.f, setup.separation, 1, seed).unwrap();
    let spec = SplitSpec::new(synth.zero_day_classes.clone(), 0.5, seed);
    let (train_split, test_split) = split_holdout(&synth.dataset, &spec).unwrap();
    let (train_compact, _) = train_split.compact_vocabulary().unwrap();
    let scaler = fit_scaler(&train_compact, 10.0).unwrap();

    let mcfg = ModelConfig {
        f: setup.f,
        d_model: setup.d_model,
        depth: setup.depth,
        f_o: setup.f_o,
        n_heads: 1,
        dropout_rate: 0.0,
        seed: seed ^ 0xA5,
    };
    let tcfg = TrainConfig {
        epochs: setup.epochs,
        warmup_epochs: 5,
        batch_size: 64,
        seed: seed ^ 0x5A,
        ..TrainConfig::default()
    };
    let lcfg = LossConfig { kind: LossKind::Clad, ..LossConfig::default() };
    let run = train(&train_compact, &scaler, &tcfg, &mcfg, &lcfg).unwrap();
    assert!(run.diverged_at.is_none());

    let centroids =
        centroids_from_train(&run.params, &mcfg, &scaler, &train_compact, CentroidProxy::Centroid)
            .unwrap();
    let ClassProxy::Direction(mu) = &centroids.proxies[0] else { panic!("centroid proxy") };

    let embedded =
        embed_features(&run.params, &mcfg, &scaler, test_split.features(), &[0]).unwrap();
    let scores: Vec<f64> = embedded[0].rows().into_iter().map(|z| -z.dot(mu)).collect();

    let zero_id = synth.dataset.class_id("attack3").unwrap();
    let known_rows: Vec<usize> = (0..test_split.n_rows())
        .filter(|&i| test_split.labels()[i] != zero_id)
        .collect();
    let zero_rows: Vec<usize> = (0..test_split.n_rows())
        .filter(|&i| test_split.labels()[i] == zero_id)
        .collect();
    let known_embeddings = embedded[0].select(ndarray::Axis(0), &known_rows);
    let zero_day_embeddings = embedded[0].select(ndarray::Axis(0), &zero_rows);

    TrainedSetup {
        scores,
        labels: test_split.labels().to_vec(),
        known_embeddings,
        zero_day_embeddings,
    }
}

#[test]
fn trained_model_separates_known_and_zero_day_attacks() {
    let setup = train_and_score(6.0, 3);
    let benign: Vec<usize> = (0..setup.labels.len()).filter(|&i| setup.labels[i] == 0).collect();
    for attack in [1usize, 2, 3] {
        let rows: Vec<usize> =
            (0..setup.labels.len()).filter(|&i| setup.labels[i] == attack).collect();
        let mut scores = Vec::new();
        let mut positives = Vec::new();
        for &i in benign.iter().chain(&rows) {
            scores.push(setup.scores[i]);
            positives.push(setup.labels[i] == attack);
        }
        let value = auroc(&scores, &positives).unwrap();
        assert!(value > 0.9, "attack {attack} auroc {value}");
    }
}

#[test]
fn known_embeddings_occupy_a_smaller_subspace_than_zero_day() {
    // Known classes collapse toward the learned directions while zero-day
    // embeddings stay diffuse. At this sample size the residual scatter sits
    // around 1e-2 of the leading singular value, so a coarse tolerance is
    // what exposes the occupancy gap; the 1e-6 rank reported by the metrics
    // saturates at full rank for both sides here.
    let setup = train_and_score_with(SetupSpec {
        seed: 101,
        n_per_class: 500,
        f: 20,
        d_model: 64,
        depth: 3,
        f_o: 16,
        epochs: 50,
        ..SetupSpec::default()
    });
    let known = effective_rank(&setup.known_embeddings, 0.15);
    let zero = effective_rank(&setup.zero_day_embeddings, 0.15);
    assert!(
        known < zero,
        "known rank {known} should be below zero-day rank {zero}"
    );
}

#[test]
fn indistinguishable_classes_give_chance_level_auroc() {
    // separation 0: every class is drawn from the same distribution, so the
    // score carries no signal and AUROC sits at 0.5.
    let setup = train_and_score_with(SetupSpec {
        separation: 0.0,
        seed: 9,
        n_per_class: 400,
        ..SetupSpec::default()
    });
    let positives: Vec<bool> = setup.labels.iter().map(|&l| l != 0).collect();
    let value = auroc(&setup.scores, &positives).unwrap();
    assert!((value - 0.5).abs() < 0.05, "auroc {value} should be chance level");
}

#[test]
fn closr_training_runs_and_classifies_known_classes() {
    let synth = synth_blobs(4, 120, 12, 6.0, 1, 11).unwrap();
    let spec = SplitSpec::new(synth.zero_day_classes.clone(), 0.5, 11);
    let (train_split, test_split) = split_holdout(&synth.dataset, &spec).unwrap();
    let (train_compact, kept) = train_split.compact_vocabulary().unwrap();
    let scaler = fit_scaler(&train_compact, 10.0).unwrap();
    let n_heads = train_compact.n_classes();
    assert_eq!(n_heads, 3);

    let mcfg = ModelConfig {
        f: 12,
        d_model: 32,
        depth: 2,
        f_o: 8,
        n_heads,
        dropout_rate: 0.0,
        seed: 2,
    };
    let tcfg = TrainConfig {
        epochs: 40,
        warmup_epochs: 5,
        batch_size: 64,
        seed: 2,
        ..TrainConfig::default()
    };
    let lcfg = LossConfig { kind: LossKind::Closr, ..LossConfig::default() };
    let run = train(&train_compact, &scaler, &tcfg, &mcfg, &lcfg).unwrap();
    assert!(run.diverged_at.is_none());

    let centroids =
        centroids_from_train(&run.params, &mcfg, &scaler, &train_compact, CentroidProxy::Centroid)
            .unwrap();
    let directions = centroids.directions().unwrap();
    let head_ids: Vec<usize> = (0..n_heads).collect();
    let embedded =
        embed_features(&run.params, &mcfg, &scaler, test_split.features(), &head_ids).unwrap();

    // Closed-set accuracy over the known test rows.
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..test_split.n_rows() {
        let old_label = test_split.labels()[i];
        let Some(compact_label) = kept.iter().position(|&k| k == old_label) else {
            continue;
        };
        let sims: Vec<f64> =
            (0..n_heads).map(|c| embedded[c].row(i).dot(&directions[c])).collect();
        let probs = closr_core::closed_set_probs(&sims);
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        correct += usize::from(pred == compact_label);
        total += 1;
    }
    let accuracy = correct as f64 / total as f64;
    assert!(accuracy > 0.9, "closed-set accuracy {accuracy}");
}
