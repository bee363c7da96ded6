use super::*;
use crate::datasplit::{policy2, SplitOptions};
use crate::metrics::{confusion, scalar_metrics};
use crate::model::{CctConfig, CctModel, ModelParams};
use crate::numerics::Tape;
use crate::rng::RngStream;

fn tiny_model() -> CctModel {
    CctModel::new(CctConfig::tiny_test()).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, learning_rate: 1e-3, seed: 5, ..TrainConfig::default() }
}

fn sample_loss(model: &CctModel, params: &ModelParams<f64>, store: &ImageStore<f64>, id: &str) -> f64 {
    let (images, labels) = store.batch(&[id]).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images);
    let logits = model.forward(&mut tape, x, &bound, &mut RngStream::new(0), false).unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    tape.data(loss)[0]
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { beta2: 1.0, ..TrainConfig::default() },
        TrainConfig { patience: Some(0), ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(crate::CctError::Parameter(_))));
    }
    let parsed: TrainConfig = serde_json::from_str(r#"{"optimizer":"sgd_momentum","epochs":3}"#).unwrap();
    assert_eq!(parsed.optimizer, OptimizerKind::SgdMomentum);
    assert_eq!(parsed.learning_rate, 5e-4);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch":3}"#).is_err());
}

#[test]
fn warmup_ramps_linearly() {
    let tc = TrainConfig { warmup_steps: 4, learning_rate: 1.0, ..TrainConfig::default() };
    let lrs: Vec<f64> = (0..6).map(|s| tc.lr_at(s)).collect();
    assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
}

#[test]
fn adamw_matches_scalar_reference() {
    // Minimize (p − 3)² from p = 0 with a hand-rolled AdamW.
    let h = Hyper::from_config(&TrainConfig::default());
    let (lr, wd) = (0.1, 0.01);
    let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
    let (mut rp, mut rm, mut rv) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=10u64 {
        let g = [2.0 * (p[0] - 3.0)];
        adamw_update(&mut p, &g, &mut m, &mut v, t, lr, wd, &h);
        let rg = 2.0 * (rp - 3.0);
        rp *= 1.0 - lr * wd;
        rm = 0.9 * rm + 0.1 * rg;
        rv = 0.999 * rv + 0.001 * rg * rg;
        let mh = rm / (1.0 - 0.9f64.powi(t as i32));
        let vh = rv / (1.0 - 0.999f64.powi(t as i32));
        rp -= lr * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] - rp).abs() < 1e-12, "step {t}: {} vs {rp}", p[0]);
    }
    assert!(p[0] > 0.9);
}

#[test]
fn sgd_momentum_reference() {
    let (mut p, mut buf) = ([1.0], [0.0]);
    sgd_momentum_update(&mut p, &[2.0], &mut buf, 0.1, 0.9);
    sgd_momentum_update(&mut p, &[2.0], &mut buf, 0.1, 0.9);
    assert!((p[0] - (1.0 - 0.2 - 0.38)).abs() < 1e-15);
}

#[test]
fn weight_decay_scope() {
    assert!(decays("head.weight"));
    assert!(decays("tokenizer.stage0.kernel"));
    assert!(decays("encoder.block0.attn.qkv.weight"));
    assert!(!decays("head.bias"));
    assert!(!decays("encoder.norm.gamma"));
    assert!(!decays("positional.embedding"));
    assert!(!decays("class_token"));
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let task = synthetic_task(1, 16, 4, 32, 0.25).unwrap();
    let model = tiny_model();
    let tc = TrainConfig { epochs: 1, learning_rate: 0.0, ..quick_config(1) };
    let init = model.init_params::<f64>(&RngStream::new(3)).unwrap();
    let out = train_from(&model, &tc, &task.plan, &task.store, init.clone()).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.history.records.len(), 1);
}

#[test]
fn one_small_step_lowers_the_sample_loss() {
    let task = synthetic_task(2, 8, 2, 32, 0.0).unwrap();
    let model = tiny_model();
    let id = task.plan.train_ids[0].clone();
    let mut plan = task.plan.clone();
    plan.train_ids = vec![id.clone()];
    for seed in 0..100u64 {
        let init = model.init_params::<f64>(&RngStream::new(seed)).unwrap();
        let before = sample_loss(&model, &init, &task.store, &id);
        let tc = TrainConfig { epochs: 1, batch_size: 1, learning_rate: 1e-5, seed, ..TrainConfig::default() };
        let out = train_from(&model, &tc, &plan, &task.store, init).unwrap();
        let after = sample_loss(&model, &out.params, &task.store, &id);
        assert!(after < before || (after - before).abs() < 1e-12, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn history_accuracy_comes_from_confusion() {
    let task = synthetic_task(3, 24, 8, 32, 0.25).unwrap();
    let out = train(&tiny_model(), &quick_config(3), &task.plan, &task.store).unwrap();
    for r in &out.history.records {
        assert_eq!(r.train_accuracy, scalar_metrics(&r.train_confusion).unwrap().accuracy.as_f64());
        let vc = r.val_confusion.unwrap();
        assert_eq!(r.val_accuracy.unwrap(), scalar_metrics(&vc).unwrap().accuracy.as_f64());
        assert_eq!(r.train_confusion.total() as usize, task.plan.train_ids.len());
        assert!((0.0..=1.0).contains(&r.train_accuracy));
    }
    let epochs: Vec<usize> = out.history.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let task = synthetic_task(4, 24, 8, 32, 0.25).unwrap();
    let model = tiny_model();
    let a = train(&model, &quick_config(2), &task.plan, &task.store).unwrap();
    let b = train(&model, &quick_config(2), &task.plan, &task.store).unwrap();
    let c = train(&model, &TrainConfig { jobs: 4, ..quick_config(2) }, &task.plan, &task.store).unwrap();
    assert_eq!(a.history.to_csv(), b.history.to_csv());
    assert_eq!(a.params, b.params);
    assert_eq!(a.params, c.params);
    assert_eq!(a.history.records, c.history.records);
}

#[test]
fn evaluation_is_pure_and_consistent() {
    let task = synthetic_task(5, 8, 12, 32, 0.0).unwrap();
    let model = tiny_model();
    let params = model.init_params::<f64>(&RngStream::new(1)).unwrap();
    let snapshot = params.clone();
    let a = evaluate(&model, &params, &task.store, &task.plan.test_ids).unwrap();
    let b = evaluate(&model, &params, &task.store, &task.plan.test_ids).unwrap();
    assert_eq!(a, b);
    assert_eq!(params, snapshot);
    assert_eq!(a.report.confusion, confusion(&a.predictions, &a.labels, 1).unwrap());
    assert!(a.report.roc.is_some());
    assert_eq!(a.scores.len(), a.ids.len());
    assert!(a.scores.iter().all(|s| (0.0..=1.0).contains(s)));
}

#[test]
fn single_category_evaluation_omits_roc() {
    let task = synthetic_task(6, 8, 6, 32, 0.0).unwrap();
    let model = tiny_model();
    let params = model.init_params::<f64>(&RngStream::new(1)).unwrap();
    let positives: Vec<String> = task.plan.test_ids.iter().filter(|id| id.contains("positive")).cloned().collect();
    let ev = evaluate(&model, &params, &task.store, &positives).unwrap();
    assert!(ev.report.roc.is_none() && ev.report.auc_roc.is_none());
    assert_eq!(ev.report.confusion.positives() as usize, positives.len());
}

#[test]
fn oracle_scores_give_perfect_metrics() {
    let labels = [1, 0, 1, 1, 0];
    let scores: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let r = evaluate_scores(&scores, &labels, &labels).unwrap();
    assert_eq!(r.accuracy(), 1.0);
    assert_eq!(r.auc_roc.unwrap().as_f64(), 1.0);
}

#[test]
fn coin_flip_scores_have_chance_auc() {
    let mut rng = RngStream::new(99);
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let preds: Vec<usize> = scores.iter().map(|&s| (s > 0.5) as usize).collect();
    let auc = evaluate_scores(&scores, &labels, &preds).unwrap().auc_roc.unwrap().as_f64();
    assert!((auc - 0.5).abs() < 0.05, "{auc}");
}

#[test]
fn history_csv_round_trip() {
    let task = synthetic_task(7, 16, 4, 32, 0.25).unwrap();
    let out = train(&tiny_model(), &quick_config(2), &task.plan, &task.store).unwrap();
    let csv = out.history.to_csv();
    assert!(csv.starts_with("# generator: "));
    let rows = parse_history_csv(&csv).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].train_loss, out.history.records[1].train_loss);
    assert_eq!(rows[1].val_acc, out.history.records[1].val_accuracy);
    assert_eq!(rows[1].seconds, None);
    let bad = csv.replace(&format!("\n2,{}", rows[1].train_loss), "\n1,0.5");
    let err = parse_history_csv(&bad).unwrap_err();
    assert!(err.to_string().contains("line"), "{err}");
}

#[test]
fn early_stopping_keeps_best_epoch() {
    let task = synthetic_task(8, 16, 4, 32, 0.25).unwrap();
    let tc = TrainConfig { patience: Some(1), learning_rate: 0.5, ..quick_config(30) };
    let out = train(&tiny_model(), &tc, &task.plan, &task.store).unwrap();
    let best = out.history.best_epoch.unwrap();
    let best_loss = out.history.records[best - 1].val_loss.unwrap();
    assert!(out.history.records.iter().all(|r| r.val_loss.unwrap() >= best_loss));
    if out.history.stopped_early {
        assert_eq!(out.history.records.len(), best + 1);
    }
}

#[test]
fn f32_training_runs() {
    let task = synthetic_task(9, 16, 4, 32, 0.25).unwrap();
    let tc = TrainConfig { precision: Precision::F32, ..quick_config(2) };
    let out = train_any(&tiny_model(), &tc, &task.plan, &task.store).unwrap();
    assert_eq!(out.history.records.len(), 2);
    assert!(out.history.records.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn folds_report_count_and_average() {
    let task = synthetic_task(10, 20, 0, 32, 0.0).unwrap();
    let plans = policy2(&task.train, &task.test, 4, &SplitOptions::new(1)).unwrap();
    let model = tiny_model();
    let seq = run_folds(&model, &quick_config(2), &plans, &task.store, 1).unwrap();
    assert_eq!(seq.folds.len() + 1, 5);
    let mean: f64 = seq.folds.iter().map(|f| f.evaluation.report.accuracy()).sum::<f64>() / 4.0;
    assert!((seq.aggregate.accuracy() - mean).abs() < 1e-12);
    let par = run_folds(&model, &quick_config(2), &plans, &task.store, 4).unwrap();
    for (a, b) in seq.folds.iter().zip(&par.folds) {
        assert_eq!(a.history.records, b.history.records);
        assert_eq!(a.evaluation, b.evaluation);
    }
}

#[test]
fn synthetic_task_written_to_disk_reloads_identically() {
    let task = synthetic_task(11, 6, 2, 32, 0.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (train_csv, test_csv) = write_synthetic_task(&task, dir.path()).unwrap();
    let train = crate::datasplit::ingest(&train_csv, crate::datasplit::Origin::OfficialTrain).unwrap();
    let test = crate::datasplit::ingest(&test_csv, crate::datasplit::Origin::OfficialTest).unwrap();
    assert_eq!(train.ids(), task.train.ids());
    let merged = crate::datasplit::LabeledDataset::merge(&train, &test).unwrap();
    let store = ImageStore::<f64>::load(&merged, &merged.ids(), [32, 32], 1, Normalization::default()).unwrap();
    for id in merged.ids() {
        assert_eq!(store.get(&id).unwrap().0, task.store.get(&id).unwrap().0);
    }
}
