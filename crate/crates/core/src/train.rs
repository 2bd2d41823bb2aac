//! Mixed-dataset pretraining, few-shot fine-tuning and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{
    build_classification_triplets, build_link_triplets, Counterpart, GraphDataset, GraphError, Split, TaskKind,
    Triplet,
};
use crate::metrics::{binary_metrics, classification_metrics, Metrics};
use crate::model::{EdgeView, ModelError, PreparedDataset, Reef};
use crate::numerics::{AdamState, NumericsError, Tape, Tensor, DEFAULT_LR};
use crate::seed::derive_seed;
use crate::text::{fnv1a64, TextEncoder};

const QUEUE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const TRIPLET_STREAM: u64 = 3;
const DROPOUT_STREAM: u64 = 4;
const EVAL_STREAM: u64 = 5;
const FEW_SHOT_STREAM: u64 = 6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no triplets to train on")]
    EmptyQueue,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("edge mask rate {0} is outside [0, 1)")]
    InvalidMaskRate(f64),
    #[error("{dataset}: split `{split}` is empty")]
    EmptySplit { dataset: String, split: &'static str },
    #[error("{dataset}: class {class} has {available} nodes, {shots} shots requested")]
    TooFewNodes { dataset: String, class: usize, available: usize, shots: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error("diverged at epoch {epoch}, batch {batch} on `{dataset}`: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        dataset: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub p_mask: f64,
    pub augment: bool,
    pub neg_per_pos: usize,
    pub shots: usize,
    pub finetune_lr_scale: f64,
    pub finetune_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: DEFAULT_LR,
            batch_size: 128,
            epochs: 100,
            p_mask: 0.2,
            augment: true,
            neg_per_pos: 1,
            shots: 1,
            finetune_lr_scale: 0.1,
            finetune_epochs: 200,
            patience: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Index into the dataset list the queue was built from.
    pub dataset: usize,
    pub triplets: Vec<Triplet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochQueue {
    pub batches: Vec<Batch>,
}

/// Shuffles each dataset's triplets, chunks them into batches of at most
/// `batch_size`, then shuffles the pooled batches.
pub fn build_epoch_queue(
    per_dataset: &[Vec<Triplet>],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochQueue, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::ZeroBatchSize);
    }
    if per_dataset.iter().all(Vec::is_empty) {
        return Err(TrainError::EmptyQueue);
    }
    let mut batches = Vec::new();
    for (d, triplets) in per_dataset.iter().enumerate() {
        let mut order = triplets.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[QUEUE_STREAM, epoch as u64, d as u64]));
        order.shuffle(&mut rng);
        batches.extend(order.chunks(batch_size).map(|c| Batch { dataset: d, triplets: c.to_vec() }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[QUEUE_STREAM, epoch as u64]));
    batches.shuffle(&mut rng);
    Ok(EpochQueue { batches })
}

/// Per-edge retention mask: each edge survives with probability `1 - p_mask`.
pub fn augment(ds: &GraphDataset, p_mask: f64, seed: u64, epoch: usize) -> Result<Vec<bool>, TrainError> {
    if !(0.0..1.0).contains(&p_mask) {
        return Err(TrainError::InvalidMaskRate(p_mask));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[AUGMENT_STREAM, epoch as u64, fnv1a64(ds.id.as_bytes())]));
    Ok(ds.edges.iter().map(|_| rng.random::<f64>() >= p_mask).collect())
}

/// Training triplets of one dataset: classification triplets for node
/// tasks, corrupted edges for link tasks.
pub fn training_triplets(ds: &GraphDataset, split: Split, neg_per_pos: usize, seed: u64) -> Result<Vec<Triplet>, TrainError> {
    Ok(match ds.task {
        TaskKind::Node => build_classification_triplets(ds, split, neg_per_pos, seed)?,
        TaskKind::Link => build_link_triplets(ds, split, neg_per_pos, seed)?,
    })
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub dataset: String,
    pub split: Split,
    pub metrics: Metrics,
    /// Mean training loss of the dataset's batches in this epoch.
    pub loss: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,dataset,split,acc,auc,f1,loss\n");
    for r in rows {
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        let m = r.metrics;
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.epoch, r.dataset, r.split.as_str(), m.acc, m.auc, m.f1, loss);
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| TrainError::Io(path.display().to_string(), e))
}

/// Scores every node of `split` against every label node and reports argmax
/// accuracy, macro F1 and macro one-vs-rest AUC.
pub fn evaluate_classification(model: &Reef, prep: &PreparedDataset, split: Split) -> Result<Metrics, TrainError> {
    let (probs, truth) = class_probabilities(model, prep, split)?;
    Ok(classification_metrics(&probs, &truth))
}

/// `n × C` probabilities for the nodes of `split` with their labels.
pub fn class_probabilities(
    model: &Reef,
    prep: &PreparedDataset,
    split: Split,
) -> Result<(Tensor, Vec<usize>), TrainError> {
    let ds = &prep.dataset;
    let (Some(labels), Some(relation)) = (&ds.labels, ds.cls_relation) else {
        return Err(TrainError::Unsupported(format!("{}: classification needs labels", ds.id)));
    };
    let nodes = ds.nodes_in(split);
    if nodes.is_empty() {
        return Err(TrainError::EmptySplit { dataset: ds.id.clone(), split: split.as_str() });
    }
    let c = ds.class_count();
    let triplets: Vec<Triplet> = nodes
        .iter()
        .flat_map(|&i| {
            (0..c).map(move |k| Triplet { head: i, relation, tail: Counterpart::Label(k), positive: labels[i] == k })
        })
        .collect();
    let p = model.predict(prep, &triplets, &EdgeView::base(ds))?;
    let probs = Tensor::from_vec(nodes.len(), c, p)?;
    Ok((probs, nodes.iter().map(|&i| labels[i]).collect()))
}

/// Balanced positive and corrupted triplets of `split`, scored in chunks of
/// `chunk` with each chunk's positive edges removed from message passing.
pub fn evaluate_link(
    model: &Reef,
    prep: &PreparedDataset,
    split: Split,
    neg_per_pos: usize,
    seed: u64,
    chunk: usize,
) -> Result<Metrics, TrainError> {
    let ds = &prep.dataset;
    if ds.edges_in(split).is_empty() {
        return Err(TrainError::EmptySplit { dataset: ds.id.clone(), split: split.as_str() });
    }
    let triplets = build_link_triplets(ds, split, neg_per_pos, seed)?;
    let base = EdgeView::base(ds);
    let mut scores = Vec::with_capacity(triplets.len());
    for part in triplets.chunks(chunk.max(1)) {
        scores.extend(model.predict(prep, part, &base.excluding_positives(ds, part))?);
    }
    let truth: Vec<bool> = triplets.iter().map(|t| t.positive).collect();
    Ok(binary_metrics(&scores, &truth))
}

/// Threshold metrics over arbitrary triplets under the evaluation view.
pub fn evaluate_triplets(model: &Reef, prep: &PreparedDataset, triplets: &[Triplet]) -> Result<Metrics, TrainError> {
    let view = EdgeView::base(&prep.dataset).excluding_positives(&prep.dataset, triplets);
    let scores = model.predict(prep, triplets, &view)?;
    let truth: Vec<bool> = triplets.iter().map(|t| t.positive).collect();
    Ok(binary_metrics(&scores, &truth))
}

/// Task-appropriate evaluation with seeds fixed per dataset and split.
pub fn evaluate(model: &Reef, prep: &PreparedDataset, split: Split, cfg: &TrainConfig) -> Result<Metrics, TrainError> {
    match prep.dataset.task {
        TaskKind::Node => evaluate_classification(model, prep, split),
        TaskKind::Link => {
            let seed = derive_seed(cfg.seed, &[EVAL_STREAM, fnv1a64(prep.id().as_bytes()), split as u64]);
            evaluate_link(model, prep, split, cfg.neg_per_pos.max(1), seed, cfg.batch_size)
        }
    }
}

/// Forward, mean BCE, backward and one Adam step on a single batch.
/// Returns the batch loss.
pub fn train_step(
    model: &mut Reef,
    adam: &mut AdamState,
    prep: &PreparedDataset,
    triplets: &[Triplet],
    view: &EdgeView,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let p = model.forward_batch(&mut tape, &bound, prep, triplets, view, true, dropout_seed)?;
    let targets = Tensor::from_vec(triplets.len(), 1, triplets.iter().map(Triplet::target).collect())?;
    let loss = tape.bce_loss(p, &targets)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let named: BTreeMap<String, Tensor> = bound
        .iter()
        .filter(|(name, _)| model.is_trainable(name))
        .filter_map(|(name, var)| grads.take(var).map(|g| (name.to_string(), g)))
        .collect();
    adam.step(&mut model.params, &named)?;
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub final_model: Reef,
    /// Model after the epoch with the highest mean validation accuracy; the
    /// initial model when no epoch ran.
    pub best_model: Reef,
    pub best_epoch: Option<usize>,
    pub history: Vec<MetricsRow>,
}

/// Runs `cfg.epochs` epochs over the pooled batch queue of every dataset.
pub fn pretrain(mut model: Reef, data: &[PreparedDataset], cfg: &TrainConfig) -> Result<PretrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyQueue);
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut best_model = model.clone();
    let mut best_epoch = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut history = Vec::new();

    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let mut per_dataset = Vec::with_capacity(data.len());
        let mut views = Vec::with_capacity(data.len());
        for (d, prep) in data.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[TRIPLET_STREAM, e, d as u64]);
            per_dataset.push(training_triplets(&prep.dataset, Split::Train, cfg.neg_per_pos, seed)?);
            let base = EdgeView::base(&prep.dataset);
            views.push(if cfg.augment && cfg.p_mask > 0.0 {
                base.intersect(&augment(&prep.dataset, cfg.p_mask, cfg.seed, epoch)?)
            } else {
                base
            });
        }
        let queue = build_epoch_queue(&per_dataset, cfg.batch_size, cfg.seed, epoch)?;

        let mut loss_sum = vec![0.0; data.len()];
        let mut loss_count = vec![0usize; data.len()];
        for (b, batch) in queue.batches.iter().enumerate() {
            let prep = &data[batch.dataset];
            let view = views[batch.dataset].excluding_positives(&prep.dataset, &batch.triplets);
            let dropout_seed = derive_seed(cfg.seed, &[DROPOUT_STREAM, e, b as u64]);
            let loss = train_step(&mut model, &mut adam, prep, &batch.triplets, &view, dropout_seed).map_err(|err| {
                TrainError::Diverged { epoch, batch: b, dataset: prep.id().to_string(), source: Box::new(err) }
            })?;
            loss_sum[batch.dataset] += loss;
            loss_count[batch.dataset] += 1;
        }

        let mut accs = Vec::new();
        for (d, prep) in data.iter().enumerate() {
            let loss = (loss_count[d] > 0).then(|| loss_sum[d] / loss_count[d] as f64);
            let metrics = match evaluate(&model, prep, Split::Val, cfg) {
                Ok(m) => m,
                Err(TrainError::EmptySplit { .. }) => continue,
                Err(err) => return Err(err),
            };
            accs.push(metrics.acc);
            history.push(MetricsRow { epoch, dataset: prep.id().to_string(), split: Split::Val, metrics, loss });
        }
        let score = if accs.is_empty() { f64::NEG_INFINITY } else { accs.iter().sum::<f64>() / accs.len() as f64 };
        log::info!("epoch {epoch}: mean val acc {score:.4}");
        if score > best_score || best_epoch.is_none() {
            best_score = score;
            best_epoch = Some(epoch);
            best_model = model.clone();
        }
    }
    Ok(PretrainOutcome { final_model: model, best_model, best_epoch, history })
}

/// C·shots training nodes (`shots` per class), the rest split 1:9 into
/// validation and test.
pub fn few_shot_splits(ds: &GraphDataset, shots: usize, seed: u64) -> Result<Vec<Split>, TrainError> {
    let labels = ds.labels.as_ref().ok_or_else(|| TrainError::Unsupported(format!("{}: no labels", ds.id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[FEW_SHOT_STREAM]));
    let mut splits = vec![Split::Test; ds.node_count()];
    let mut rest = Vec::new();
    for class in 0..ds.class_count() {
        let mut members: Vec<usize> = (0..ds.node_count()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return Err(GraphError::EmptyClass { class, text: ds.class_texts[class].clone() }.into());
        }
        if members.len() < shots {
            return Err(TrainError::TooFewNodes { dataset: ds.id.clone(), class, available: members.len(), shots });
        }
        members.shuffle(&mut rng);
        for &i in &members[..shots] {
            splits[i] = Split::Train;
        }
        rest.extend_from_slice(&members[shots..]);
    }
    rest.shuffle(&mut rng);
    let n_val = (rest.len() as f64 / 10.0).round() as usize;
    for &i in &rest[..n_val] {
        splits[i] = Split::Val;
    }
    Ok(splits)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Model at the best validation epoch (epoch 0 is the starting point).
    pub model: Reef,
    pub prepared: PreparedDataset,
    pub test: Metrics,
    pub best_epoch: usize,
    pub vocab_added: usize,
    pub history: Vec<MetricsRow>,
}

/// Adapts `start` to a node-classification target with `shots` labelled
/// nodes per class. The target gets a fresh context and alignment; relation
/// texts missing from the vocabulary are registered.
pub fn finetune(
    start: &Reef,
    target: &GraphDataset,
    encoder: &TextEncoder,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, TrainError> {
    if target.task != TaskKind::Node {
        return Err(TrainError::Unsupported(format!("{}: fine-tuning expects a node-classification target", target.id)));
    }
    let ds = target.with_node_splits(few_shot_splits(target, cfg.shots, cfg.seed)?);
    let mut model = start.clone();
    let vocab_before = model.vocab.len();
    let prep = model.prepare(&ds, encoder, cfg.seed, true)?;
    let vocab_added = model.vocab.len() - vocab_before;
    let mut adam = AdamState::new(cfg.lr * cfg.finetune_lr_scale);
    let view = EdgeView::base(&ds);
    let has_val = !ds.nodes_in(Split::Val).is_empty();

    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_acc = if has_val { evaluate_classification(&model, &prep, Split::Val)?.acc } else { 0.0 };
    let mut stale = 0;
    for epoch in 1..=cfg.finetune_epochs {
        let e = epoch as u64;
        let triplets = training_triplets(&ds, Split::Train, cfg.neg_per_pos, derive_seed(cfg.seed, &[TRIPLET_STREAM, e]))?;
        let queue = build_epoch_queue(&[triplets], cfg.batch_size, cfg.seed, epoch)?;
        let (mut loss_sum, mut count) = (0.0, 0);
        for (b, batch) in queue.batches.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[DROPOUT_STREAM, e, b as u64]);
            loss_sum += train_step(&mut model, &mut adam, &prep, &batch.triplets, &view, seed).map_err(|err| {
                TrainError::Diverged { epoch, batch: b, dataset: ds.id.clone(), source: Box::new(err) }
            })?;
            count += 1;
        }
        if !has_val {
            best = model.clone();
            best_epoch = epoch;
            continue;
        }
        let metrics = evaluate_classification(&model, &prep, Split::Val)?;
        history.push(MetricsRow {
            epoch,
            dataset: ds.id.clone(),
            split: Split::Val,
            metrics,
            loss: Some(loss_sum / count as f64),
        });
        if metrics.acc > best_acc {
            best_acc = metrics.acc;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("{}: early stop at epoch {epoch}", ds.id);
                break;
            }
        }
    }
    let test = evaluate_classification(&best, &prep, Split::Test)?;
    history.push(MetricsRow { epoch: best_epoch, dataset: ds.id.clone(), split: Split::Test, metrics: test, loss: None });
    Ok(FinetuneOutcome { model: best, prepared: prep, test, best_epoch, vocab_added, history })
}
