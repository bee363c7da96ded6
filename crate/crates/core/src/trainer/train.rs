use std::time::Instant;

use rayon::prelude::*;

use crate::datasplit::SplitPlan;
use crate::error::{CctError, Result};
use crate::manifest::RunManifest;
use crate::metrics::{aggregate_folds, confusion, roc_curve, scalar_metrics, MetricsReport};
use crate::model::{CctModel, ModelParams};
use crate::numerics::{Element, Tape, Tensor};
use crate::rng::{RngStream, RNG_ALGORITHM};

use super::data::ImageStore;
use super::history::{EpochRecord, TrainHistory};
use super::optim::{Hyper, Optimizer};
use super::{Precision, TrainConfig};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_FOLD: u64 = 4;

/// Images per inference chunk. Chunks are independent, so the split only
/// affects parallelism, not results.
const EVAL_CHUNK: usize = 16;

const POSITIVE: usize = 1;

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Element = f64> {
    pub params: ModelParams<T>,
    pub history: TrainHistory,
}

/// Inference over a list of ids: per-sample outputs and the metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    /// Softmax probability of the positive category.
    pub scores: Vec<f64>,
    /// Mean cross-entropy.
    pub loss: f64,
    pub report: MetricsReport,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CctError::Usage(format!("cannot start {jobs} worker threads: {e}")))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Log-softmax pieces of one logit row: (loss for `label`, P(positive)).
fn row_stats(row: &[f64], label: usize) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - row[label], (row[POSITIVE] - lse).exp())
}

/// Confusion matrix, scalars, and (when both categories are present) ROC.
pub fn evaluate_scores(scores: &[f64], labels: &[usize], predictions: &[usize]) -> Result<MetricsReport> {
    let cm = confusion(predictions, labels, POSITIVE)?;
    let truth: Vec<bool> = labels.iter().map(|&l| l == POSITIVE).collect();
    let roc = match roc_curve(scores, &truth) {
        Ok(c) => Some(c),
        Err(CctError::DegenerateInput(msg)) => {
            log::warn!("ROC omitted: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    MetricsReport::new(cm, roc)
}

/// Inference-mode evaluation of `ids`. Never mutates `params`.
pub fn evaluate<T: Element>(model: &CctModel, params: &ModelParams<T>, store: &ImageStore<T>, ids: &[String]) -> Result<Evaluation> {
    if ids.is_empty() {
        return Err(CctError::Usage("evaluation needs at least one sample".into()));
    }
    model.check_params(params)?;
    let chunks: Vec<Vec<&str>> = ids.chunks(EVAL_CHUNK).map(|c| c.iter().map(String::as_str).collect()).collect();
    let outputs: Vec<(Tensor<T>, Vec<usize>)> = chunks
        .par_iter()
        .map(|chunk| {
            let (images, labels) = store.batch(chunk)?;
            Ok((model.logits(params, &images)?, labels))
        })
        .collect::<Result<_>>()?;
    let mut labels = Vec::with_capacity(ids.len());
    let mut predictions = Vec::with_capacity(ids.len());
    let mut scores = Vec::with_capacity(ids.len());
    let mut loss = 0.0;
    for (logits, ls) in outputs {
        let c = logits.shape()[1];
        let data = logits.to_f64_vec();
        for (row, &l) in data.chunks(c).zip(&ls) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(CctError::Numeric("non-finite logits during evaluation".into()));
            }
            let (li, p) = row_stats(row, l);
            loss += li;
            scores.push(p);
            predictions.push(argmax(row));
            labels.push(l);
        }
    }
    let report = evaluate_scores(&scores, &labels, &predictions)?;
    Ok(Evaluation { ids: ids.to_vec(), labels, predictions, scores, loss: loss / ids.len() as f64, report })
}

struct SampleResult<T> {
    grads: Vec<Vec<T>>,
    loss: f64,
    prediction: usize,
}

fn sample_step<T: Element>(
    model: &CctModel,
    params: &ModelParams<T>,
    image: &Tensor<T>,
    label: usize,
    mut rng: RngStream,
) -> Result<SampleResult<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = tape.constant(image.clone().reshape(&shape)?);
    let logits = model.forward(&mut tape, x, &bound, &mut rng, true)?;
    let loss = tape.cross_entropy(logits, &[label])?;
    let lv = tape.data(loss)[0].as_f64();
    if !lv.is_finite() {
        return Err(CctError::Numeric(format!("training loss became {lv}")));
    }
    let row: Vec<f64> = tape.data(logits).iter().map(|v| v.as_f64()).collect();
    tape.backward(loss)?;
    Ok(SampleResult { grads: params.collect_grads(&tape, &bound), loss: lv, prediction: argmax(&row) })
}

/// Mean gradient over `batch`, summed in batch order. Samples run in waves
/// the width of the current thread pool.
#[allow(clippy::too_many_arguments)]
fn batch_step<T: Element>(
    model: &CctModel,
    params: &ModelParams<T>,
    store: &ImageStore<T>,
    batch: &[(&str, u64)],
    dropout: &RngStream,
    sums: &mut [Vec<f64>],
    losses: &mut Vec<f64>,
    preds: &mut Vec<usize>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    for s in sums.iter_mut() {
        s.iter_mut().for_each(|v| *v = 0.0);
    }
    let wave = rayon::current_num_threads().max(1);
    for group in batch.chunks(wave) {
        let results: Vec<(SampleResult<T>, usize)> = group
            .par_iter()
            .map(|&(id, key)| {
                let (img, label) = store.get(id)?;
                Ok((sample_step(model, params, img, label, dropout.fork(key))?, label))
            })
            .collect::<Result<_>>()?;
        for (r, label) in results {
            for (acc, g) in sums.iter_mut().zip(&r.grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v.as_f64();
                }
            }
            losses.push(r.loss);
            preds.push(r.prediction);
            labels.push(label);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for s in sums.iter_mut() {
        s.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(())
}

fn check_plan<T: Element>(plan: &SplitPlan, store: &ImageStore<T>) -> Result<()> {
    if plan.train_ids.is_empty() {
        return Err(CctError::Data("the plan has an empty training set".into()));
    }
    for id in plan.train_ids.iter().chain(&plan.val_ids) {
        store.get(id)?;
    }
    Ok(())
}

fn train_manifest(model: &CctModel, tc: &TrainConfig) -> RunManifest {
    RunManifest::new("train")
        .with("seed", tc.seed)
        .with("rng", RNG_ALGORITHM)
        .with("precision", format!("{:?}", tc.precision).to_lowercase())
        .with("model", serde_json::to_string(model.config()).unwrap_or_default())
        .with("train", train_settings(tc))
}

/// Training settings minus the thread count, which never changes results.
fn train_settings(tc: &TrainConfig) -> String {
    let mut v = serde_json::to_value(tc).unwrap_or_default();
    if let Some(map) = v.as_object_mut() {
        map.remove("jobs");
    }
    v.to_string()
}

/// Mini-batch training on `plan.train_ids`, validating on `plan.val_ids`
/// after every epoch. Fresh parameters come from the run seed.
pub fn train<T: Element>(model: &CctModel, tc: &TrainConfig, plan: &SplitPlan, store: &ImageStore<T>) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    let init = model.init_params::<T>(&RngStream::new(tc.seed).fork(TAG_INIT))?;
    train_from(model, tc, plan, store, init)
}

/// [`train`] starting from given parameters.
pub fn train_from<T: Element>(
    model: &CctModel,
    tc: &TrainConfig,
    plan: &SplitPlan,
    store: &ImageStore<T>,
    mut params: ModelParams<T>,
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    model.check_params(&params)?;
    check_plan(plan, store)?;
    pool(tc.jobs)?.install(|| {
        let root = RngStream::new(tc.seed);
        let mut opt = Optimizer::new(Hyper::from_config(tc), &params);
        let mut sums: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut history =
            TrainHistory { run: train_manifest(model, tc), records: Vec::with_capacity(tc.epochs), best_epoch: None, stopped_early: false };
        let use_val = !plan.val_ids.is_empty();
        if tc.patience.is_some() && !use_val {
            log::warn!("early stopping needs a validation set; patience ignored");
        }
        let mut best: Option<(f64, ModelParams<T>)> = None;
        let mut since_best = 0;
        for epoch in 1..=tc.epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..plan.train_ids.len()).collect();
            root.fork_path(&[TAG_SHUFFLE, epoch as u64]).shuffle(&mut order);
            let dropout = root.fork_path(&[TAG_DROPOUT, epoch as u64]);
            let (mut losses, mut preds, mut labels) = (Vec::new(), Vec::new(), Vec::new());
            let mut lr = tc.learning_rate;
            for batch in order.chunks(tc.batch_size) {
                let items: Vec<(&str, u64)> = batch.iter().map(|&i| (plan.train_ids[i].as_str(), i as u64)).collect();
                batch_step(model, &params, store, &items, &dropout, &mut sums, &mut losses, &mut preds, &mut labels)?;
                lr = tc.lr_at(opt.steps());
                opt.step(&mut params, &sums, lr);
            }
            let train_cm = confusion(&preds, &labels, POSITIVE)?;
            let mut record = EpochRecord {
                epoch,
                learning_rate: lr,
                train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                train_accuracy: scalar_metrics(&train_cm)?.accuracy.as_f64(),
                train_confusion: train_cm,
                val_loss: None,
                val_accuracy: None,
                val_confusion: None,
                val_auc: None,
                seconds: None,
            };
            if use_val {
                let ev = evaluate(model, &params, store, &plan.val_ids)?;
                record.val_loss = Some(ev.loss);
                record.val_accuracy = Some(ev.report.accuracy());
                record.val_confusion = Some(ev.report.confusion);
                record.val_auc = ev.report.auc_roc.as_ref().map(|a| a.as_f64());
            }
            if tc.record_wall_time {
                record.seconds = Some(started.elapsed().as_secs_f64());
            }
            log::info!(
                "epoch {epoch}: train loss {:.6} acc {:.4}{}",
                record.train_loss,
                record.train_accuracy,
                record.val_loss.map(|l| format!(", val loss {l:.6} acc {:.4}", record.val_accuracy.unwrap_or(0.0))).unwrap_or_default()
            );
            let val_loss = record.val_loss;
            history.records.push(record);
            if let (Some(patience), Some(vl)) = (tc.patience, val_loss) {
                if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                    best = Some((vl, params.clone()));
                    history.best_epoch = Some(epoch);
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        history.stopped_early = epoch < tc.epochs;
                        break;
                    }
                }
            }
        }
        if let Some((_, p)) = best {
            params = p;
        }
        Ok(TrainOutcome { params, history })
    })
}

/// Train at the precision `tc` names; parameters come back as f64.
pub fn train_any(model: &CctModel, tc: &TrainConfig, plan: &SplitPlan, store: &ImageStore<f64>) -> Result<TrainOutcome<f64>> {
    match tc.precision {
        Precision::F64 => train(model, tc, plan, store),
        Precision::F32 => {
            let out = train::<f32>(model, tc, plan, &store.cast())?;
            Ok(TrainOutcome { params: out.params.cast(), history: out.history })
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub seed: u64,
    pub history: TrainHistory,
    pub evaluation: Evaluation,
    pub params: ModelParams<f64>,
}

#[derive(Debug, Clone)]
pub struct FoldsOutcome {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: MetricsReport,
}

/// Train a fresh model per plan and evaluate it on that plan's test ids.
/// Folds run on up to `jobs` threads (0 = all); each fold itself is
/// single-threaded and seeded from `tc.seed` and its index, so results do
/// not depend on `jobs`.
pub fn run_folds(model: &CctModel, tc: &TrainConfig, plans: &[SplitPlan], store: &ImageStore<f64>, jobs: usize) -> Result<FoldsOutcome> {
    if plans.is_empty() {
        return Err(CctError::Usage("no fold plans given".into()));
    }
    let folds: Vec<FoldOutcome> = pool(jobs)?.install(|| {
        plans
            .par_iter()
            .enumerate()
            .map(|(fold, plan)| {
                let mut ftc = tc.clone();
                ftc.jobs = 1;
                ftc.seed = RngStream::new(tc.seed).fork_path(&[TAG_FOLD, fold as u64]).seed();
                let out = train_any(model, &ftc, plan, store)?;
                let evaluation = evaluate(model, &out.params, store, &plan.test_ids)?;
                let mut history = out.history;
                history.run.set("fold", fold + 1);
                history.run.set("folds", plans.len());
                Ok(FoldOutcome { fold, seed: ftc.seed, history, evaluation, params: out.params })
            })
            .collect::<Result<_>>()
    })?;
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.evaluation.report.clone()).collect();
    let aggregate = aggregate_folds(&reports)?;
    Ok(FoldsOutcome { folds, aggregate })
}
