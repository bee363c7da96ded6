//! Acceptance suite: eight criteria, one pass/fail line each.
//!
//! The summary lines go to stderr even when output is captured.

use std::collections::{BTreeSet, HashMap};
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use cct_core::datasplit::{policy1, policy2, policy3, policy3_move_count, Label, LabeledDataset, Origin, SplitOptions, SplitPlan};
use cct_core::error::CctError;
use cct_core::manifest::RunManifest;
use cct_core::metrics::{
    auc, confusion, render_report_json, roc_curve, scalar_metrics, ConfusionMatrix, Fraction, MetricsReport, METRICS_SCHEMA,
};
use cct_core::model::{
    classify_tokens, has_zero_gradient, init_params, plan_tokenizer, read_checkpoint, write_checkpoint, BoundParams, CctConfig, CctModel,
    ModelParams, PositionalEmbedding, Variant,
};
use cct_core::numerics::{finite_difference_check_filtered, GeluForm, GradCheckReport, Tape, Tensor, Var};
use cct_core::plot::{accuracy_svg, confusion_svg, loss_svg, roc_svg};
use cct_core::rng::RngStream;
use cct_core::trainer::{parse_history_csv, synthetic_task, train, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// `model` and `train` sections of a shipped run config.
fn shipped(name: &str) -> Result<(CctConfig, TrainConfig), String> {
    let text = ok(std::fs::read_to_string(configs_dir().join(name)))?;
    let v: serde_json::Value = ok(serde_json::from_str(&text))?;
    let model = ok(serde_json::from_value(v["model"].clone()))?;
    let train = match v.get("train") {
        Some(t) => ok(serde_json::from_value(t.clone()))?,
        None => TrainConfig::default(),
    };
    Ok((model, train))
}

// Criterion 1: finite-difference gradient suite.

/// `Σ y ⊙ w` with a fixed random `w`, so every output element matters.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> cct_core::Result<Var> {
    let mut rng = RngStream::new(seed ^ 0x5eed);
    let w = t.constant(random(t.shape(y), &mut rng));
    let m = t.mul(y, w)?;
    Ok(t.sum(m))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var], u64) -> cct_core::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        (
            "add",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v, s| {
                let y = t.add(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        (
            "add_broadcast",
            vec![vec![2, 3, 4], vec![3, 4]],
            Box::new(|t, v, s| {
                let y = t.add_broadcast(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        (
            "mul",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v, s| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        (
            "scale",
            vec![vec![5]],
            Box::new(|t, v, s| {
                let y = t.scale(v[0], -1.7);
                project(t, y, s)
            }),
        ),
        ("sum", vec![vec![2, 3]], Box::new(|t, v, _| Ok(t.sum(v[0])))),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|t, v, s| {
                let y = t.reshape(v[0], &[3, 4])?;
                project(t, y, s)
            }),
        ),
        (
            "permute",
            vec![vec![2, 3, 4]],
            Box::new(|t, v, s| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                project(t, y, s)
            }),
        ),
        (
            "narrow",
            vec![vec![2, 5, 3]],
            Box::new(|t, v, s| {
                let y = t.narrow(v[0], 1, 1, 3)?;
                project(t, y, s)
            }),
        ),
        (
            "prepend_token",
            vec![vec![2, 3, 4], vec![4]],
            Box::new(|t, v, s| {
                let y = t.prepend_token(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        (
            "matmul_shared",
            vec![vec![2, 3, 4], vec![4, 5]],
            Box::new(|t, v, s| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        (
            "matmul_batched",
            vec![vec![2, 3, 4], vec![2, 4, 5]],
            Box::new(|t, v, s| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, s)
            }),
        ),
        (
            "linear",
            vec![vec![2, 3, 4], vec![4, 5], vec![5]],
            Box::new(|t, v, s| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, s)
            }),
        ),
        (
            "conv2d_s1_p1",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            Box::new(|t, v, s| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(t, y, s)
            }),
        ),
        (
            "conv2d_s2_p0",
            vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3]],
            Box::new(|t, v, s| {
                let y = t.conv2d(v[0], v[1], None, 2, 0)?;
                project(t, y, s)
            }),
        ),
        (
            "maxpool2d",
            vec![vec![1, 2, 5, 5]],
            Box::new(|t, v, s| {
                let y = t.maxpool2d(v[0], 3, 2, 1)?;
                project(t, y, s)
            }),
        ),
        (
            "relu",
            vec![vec![10]],
            Box::new(|t, v, s| {
                let y = t.relu(v[0]);
                project(t, y, s)
            }),
        ),
        (
            "gelu_exact",
            vec![vec![10]],
            Box::new(|t, v, s| {
                let y = t.gelu(v[0], GeluForm::Exact);
                project(t, y, s)
            }),
        ),
        (
            "gelu_tanh",
            vec![vec![10]],
            Box::new(|t, v, s| {
                let y = t.gelu(v[0], GeluForm::Tanh);
                project(t, y, s)
            }),
        ),
        (
            "softmax",
            vec![vec![2, 5, 3]],
            Box::new(|t, v, s| {
                let y = t.softmax(v[0], 1)?;
                project(t, y, s)
            }),
        ),
        (
            "layer_norm",
            vec![vec![2, 3, 6], vec![6], vec![6]],
            Box::new(|t, v, s| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, s)
            }),
        ),
        (
            "dropout",
            vec![vec![12]],
            Box::new(|t, v, s| {
                let y = t.dropout(v[0], 0.3, &mut RngStream::new(s), true)?;
                project(t, y, s)
            }),
        ),
        ("cross_entropy", vec![vec![3, 4]], Box::new(|t, v, _| t.cross_entropy(v[0], &[0, 3, 1]))),
    ]
}

const GRAD_SEEDS: u64 = 100;
const GRAD_STEP: f64 = 1e-6;
/// Central differences at this step resolve about 1e-10; gradients where both
/// sides fall below this get the absolute bound instead of the relative one.
const GRAD_RESOLUTION: f64 = 1e-5;

fn merge(worst: &mut GradCheckReport, r: GradCheckReport) {
    worst.checked += r.checked;
    worst.unresolved += r.unresolved;
    worst.max_abs_error_unresolved = worst.max_abs_error_unresolved.max(r.max_abs_error_unresolved);
    if r.max_rel_error > worst.max_rel_error {
        worst.max_rel_error = r.max_rel_error;
        worst.analytic = r.analytic;
        worst.numeric = r.numeric;
    }
}

fn empty_report() -> GradCheckReport {
    GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        element: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        unresolved: 0,
        max_abs_error_unresolved: 0.0,
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut op_worst = ("", empty_report());
    let mut ops_total = empty_report();
    for (name, shapes, f) in op_cases() {
        for seed in 0..GRAD_SEEDS {
            let mut rng = RngStream::new(seed).fork(name.len() as u64);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let r = ok(finite_difference_check_filtered(|t, v| f(t, v, seed), &inputs, GRAD_STEP, GRAD_RESOLUTION, |_, _| true))?;
            ensure!(r.max_rel_error < 1e-5, "{name} seed {seed}: relative error {:.3e} ({r:?})", r.max_rel_error);
            ensure!(r.max_abs_error_unresolved < 1e-9, "{name} seed {seed}: unresolved abs error {r:?}");
            if r.max_rel_error > op_worst.1.max_rel_error {
                op_worst = (name, r.clone());
            }
            merge(&mut ops_total, r);
        }
    }

    let cfg = CctConfig { gelu: GeluForm::Exact, ..CctConfig::gradcheck_tiny() };
    ensure!(
        cfg.image_size == [12, 12] && cfg.tokenizer_stages == 1 && cfg.embed_dim == 8 && cfg.num_heads == 2 && cfg.encoder_depth == 1,
        "gradcheck config drifted: {cfg:?}"
    );
    let d = cfg.embed_dim;
    let model = ok(CctModel::new(cfg))?;
    let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
    let mut e2e = empty_report();
    for seed in 0..GRAD_SEEDS {
        let mut rng = RngStream::new(1000 + seed);
        let inputs: Vec<Tensor<f64>> = model.specs().iter().map(|s| random(&s.shape, &mut rng)).collect();
        let images = random(&[2, 1, 12, 12], &mut rng);
        let labels = [(seed % 2) as usize, 1 - (seed % 2) as usize];
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let x = tape.constant(images.clone());
            let logits = model.forward(tape, x, &bound, &mut RngStream::new(0), false)?;
            tape.cross_entropy(logits, &labels)
        };
        let r = ok(finite_difference_check_filtered(f, &inputs, GRAD_STEP, GRAD_RESOLUTION, |i, e| !has_zero_gradient(&names[i], e, d)))?;
        ensure!(r.max_rel_error < 1e-4, "end-to-end seed {seed}: relative error {:.3e} ({r:?})", r.max_rel_error);
        ensure!(r.max_abs_error_unresolved < 1e-9, "end-to-end seed {seed}: unresolved abs error {r:?}");
        merge(&mut e2e, r);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "suite took {secs:.1} s (limit 120 s)");
    Ok(format!(
        "{} ops x {GRAD_SEEDS} seeds worst rel {:.2e} ({}), {} of {} elements below resolution; end-to-end worst rel {:.2e} over {} elements, {} below resolution; {secs:.1} s",
        op_cases().len(),
        op_worst.1.max_rel_error,
        op_worst.0,
        ops_total.unresolved,
        ops_total.checked,
        e2e.max_rel_error,
        e2e.checked,
        e2e.unresolved
    ))
}

// Criterion 2: metrics against brute-force oracles.

fn ratio(num: u64, den: u64) -> Fraction {
    if den == 0 {
        Fraction::zero()
    } else {
        Fraction::new(num, den)
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = RngStream::new(2);
    let mut worst_auc = 0.0f64;
    let mut curves = 0;
    for case in 0..1000 {
        let n = 1 + rng.below(50) as usize;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(2) as usize).collect();
        // Coarse scores in half the cases force ties.
        let scores: Vec<f64> =
            if case % 2 == 0 { (0..n).map(|_| rng.below(6) as f64 / 5.0).collect() } else { (0..n).map(|_| rng.uniform()).collect() };
        let preds: Vec<usize> = scores.iter().map(|&s| (s >= 0.5) as usize).collect();

        let cm = ok(confusion(&preds, &labels, 1))?;
        let count = |p: usize, l: usize| preds.iter().zip(&labels).filter(|&(&a, &b)| a == p && b == l).count() as u64;
        let want = ConfusionMatrix { tp: count(1, 1), fp: count(1, 0), fn_: count(0, 1), tn: count(0, 0) };
        ensure!(cm == want, "case {case}: confusion {cm:?} vs {want:?}");

        let s = ok(scalar_metrics(&cm))?;
        let (tp, fp, fnn, tn) = (want.tp, want.fp, want.fn_, want.tn);
        let expect = [
            ("accuracy", &s.accuracy, ratio(tp + tn, n as u64)),
            ("precision", &s.precision, ratio(tp, tp + fp)),
            ("recall", &s.recall, ratio(tp, tp + fnn)),
            ("f1", &s.f1, ratio(2 * tp, 2 * tp + fp + fnn)),
            ("tpr", &s.tpr, ratio(tp, tp + fnn)),
            ("fpr", &s.fpr, ratio(fp, fp + tn)),
            ("fnr", &s.fnr, ratio(fnn, tp + fnn)),
            ("tnr", &s.tnr, ratio(tn, fp + tn)),
        ];
        for (name, got, want) in expect {
            ensure!(*got == want, "case {case}: {name} {} vs {}", got.exact(), want.exact());
        }

        let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let pos = truth.iter().filter(|&&t| t).count() as u64;
        let neg = n as u64 - pos;
        let curve = roc_curve(&scores, &truth);
        if pos == 0 || neg == 0 {
            ensure!(matches!(curve, Err(CctError::DegenerateInput(_))), "case {case}: single category must be rejected");
            continue;
        }
        let curve = ok(curve)?;
        curves += 1;
        let mut thresholds: Vec<f64> = scores.clone();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        ensure!(curve.points.len() == thresholds.len() + 1, "case {case}: {} points", curve.points.len());
        ensure!(curve.points[0].tp == 0 && curve.points[0].fp == 0, "case {case}: curve must start at the origin");
        for (pt, &t) in curve.points[1..].iter().zip(&thresholds) {
            let tp = scores.iter().zip(&truth).filter(|&(&s, &y)| y && s >= t).count() as u64;
            let fp = scores.iter().zip(&truth).filter(|&(&s, &y)| !y && s >= t).count() as u64;
            ensure!(pt.threshold == t && pt.tp == tp && pt.fp == fp, "case {case}: point {pt:?} vs t={t} tp={tp} fp={fp}");
        }
        let mut wins = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if truth[i] && !truth[j] {
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let pairwise = wins / (pos * neg) as f64;
        let err = (auc(&curve) - pairwise).abs();
        worst_auc = worst_auc.max(err);
        ensure!(err < 1e-12, "case {case}: AUC {} vs pairwise {pairwise}", auc(&curve));
    }
    Ok(format!("1000 instances, {curves} ROC curves, worst |AUC - pairwise| {worst_auc:.1e}"))
}

// Criterion 3: reference figures.

/// Parse a two-decimal percentage such as `99.16` into a fraction of one.
fn pct(s: &str) -> Fraction {
    let digits: u64 = s.replace('.', "").parse().unwrap();
    Fraction::new(digits, 10_000)
}

const FOLD_ACCURACY: [&str; 10] = ["99.16", "98.90", "99.71", "99.38", "98.96", "99.61", "99.03", "98.80", "99.64", "99.03"];
const FOLD_PRECISION: [&str; 10] = ["98.90", "98.21", "99.68", "99.10", "98.40", "99.42", "98.84", "97.90", "99.68", "98.65"];
const FOLD_RECALL: [&str; 10] = ["99.42", "99.61", "99.74", "99.68", "99.55", "99.81", "99.22", "99.74", "99.61", "99.42"];
const FOLD_F1: [&str; 10] = ["99.16", "98.91", "99.71", "99.39", "98.97", "99.61", "99.03", "98.81", "99.64", "99.03"];

fn reference_arithmetic() -> Outcome {
    // Official test split: 200 positive, 200 negative; TPR = TNR = 99.00.
    let (p, n) = (200u64, 200u64);
    let tp = p * 99 / 100;
    let tn = n * 99 / 100;
    let cm = ConfusionMatrix { tp, fp: n - tn, fn_: p - tp, tn };
    ensure!((cm.tp, cm.fp, cm.fn_, cm.tn) == (198, 2, 2, 198), "confusion {cm:?}");
    let s = ok(scalar_metrics(&cm))?;
    for (name, v, want) in [
        ("accuracy", &s.accuracy, "99.00"),
        ("precision", &s.precision, "99.00"),
        ("recall", &s.recall, "99.00"),
        ("f1", &s.f1, "99.00"),
        ("fpr", &s.fpr, "1.00"),
        ("fnr", &s.fnr, "1.00"),
        ("tnr", &s.tnr, "99.00"),
    ] {
        ensure!(v.pct() == want, "single-split {name} {} vs {want}", v.pct());
    }

    let mean = |xs: &[&str]| {
        let fs: Vec<Fraction> = xs.iter().map(|s| pct(s)).collect();
        Fraction::mean(&fs.iter().collect::<Vec<_>>()).pct()
    };
    for (name, col, want) in [
        ("accuracy", &FOLD_ACCURACY, "99.22"),
        ("precision", &FOLD_PRECISION, "98.88"),
        ("recall", &FOLD_RECALL, "99.58"),
        ("f1", &FOLD_F1, "99.23"),
    ] {
        let got = mean(col);
        ensure!(got == want, "10-fold mean {name} {got} vs {want}");
    }

    let moved = policy3_move_count(30482, 400, 0.1);
    ensure!(moved == 2407, "policy3 moves {moved}");
    let train = LabeledDataset::synthetic_ids(Origin::OfficialTrain, "train", 16490, 13992);
    let test = LabeledDataset::synthetic_ids(Origin::OfficialTest, "test", 200, 200);
    let plan = ok(policy3(&train, &test, 0.1, &SplitOptions::new(0)))?;
    let sizes = (plan.train_ids.len() + plan.val_ids.len(), plan.test_ids.len());
    ensure!(sizes == (28075, 2807), "policy3 sizes {sizes:?}");
    Ok("CM 198/2/2/198 at 99.00; fold means 99.22/98.88/99.58/99.23; policy3 n=2407 -> 28075/2807".into())
}

// Criterion 4: tokenizer geometry.

fn geometry() -> Outcome {
    match plan_tokenizer(&CctConfig::table5_literal()) {
        Err(CctError::TokenizerGeometry { stage: Some(4), .. }) => {}
        other => return Err(format!("literal config: expected a stage-4 geometry error, got {other:?}")),
    }
    let (file_literal, _) = shipped("table5-literal.json")?;
    ensure!(file_literal == CctConfig::table5_literal(), "table5-literal.json differs from the preset");
    let mut lens = Vec::new();
    for (file, preset, want) in
        [("table5-literal-3stage.json", CctConfig::table5_literal_3stage(), 9), ("table5-compat.json", CctConfig::table5_compat(), 169)]
    {
        let (cfg, _) = shipped(file)?;
        ensure!(cfg == preset, "{file} differs from the preset");
        let plan = ok(plan_tokenizer(&cfg))?;
        ensure!(plan.sequence_length == want, "{file}: sequence length {}", plan.sequence_length);
        lens.push(plan.sequence_length);
    }
    Ok(format!("literal rejected at stage 4; presets give {} and {} tokens", lens[0], lens[1]))
}

// Criterion 5: learning smoke test.

fn learning_smoke() -> Outcome {
    let (cfg, tc) = shipped("tiny-test.json")?;
    ensure!(tc.jobs == 1, "smoke test must run single-threaded");
    let task = ok(synthetic_task(0, 64, 32, 32, 0.25))?;
    ensure!(task.train.len() == 64 && cfg.image_size == [32, 32], "task shape");
    let model = ok(CctModel::new(cfg))?;
    let start = Instant::now();
    let a = ok(train(&model, &tc, &task.plan, &task.store))?;
    let secs = start.elapsed().as_secs_f64();
    let first = a.history.records.iter().find(|r| r.train_accuracy == 1.0).map(|r| r.epoch);
    ensure!(first.is_some_and(|e| e <= 200), "train accuracy never reached 1.0 in {} epochs", tc.epochs);
    let last = a.history.last().unwrap();
    let val_auc = last.val_auc.unwrap_or(0.0);
    ensure!(val_auc >= 0.95, "final validation AUC {val_auc}");
    ensure!(secs < 300.0, "training took {secs:.1} s");
    let b = ok(train(&model, &tc, &task.plan, &task.store))?;
    ensure!(a.history.to_csv() == b.history.to_csv(), "rerun history CSV differs");
    Ok(format!("train acc 1.0 first at epoch {}, final val AUC {val_auc:.4}, {secs:.1} s per run, rerun byte-identical", first.unwrap()))
}

// Criterion 6: split properties.

fn random_split_input(rng: &mut RngStream, case: usize) -> (LabeledDataset, LabeledDataset) {
    let tp = rng.below(80) as usize;
    let tn = rng.below(80) as usize + usize::from(tp == 0);
    let sp = rng.below(20) as usize;
    let sn = rng.below(20) as usize + 1;
    (
        LabeledDataset::synthetic_ids(Origin::OfficialTrain, &format!("tr{case}"), tp, tn),
        LabeledDataset::synthetic_ids(Origin::OfficialTest, &format!("te{case}"), sp, sn),
    )
}

fn label_counts(ids: &[String], labels: &HashMap<String, Label>) -> (usize, usize) {
    ids.iter().fold((0, 0), |(p, n), id| match labels[id] {
        Label::Positive => (p + 1, n),
        Label::Negative => (p, n + 1),
    })
}

fn check_plan(plan: &SplitPlan, train: &LabeledDataset, test: &LabeledDataset, universe: &[String]) -> Result<(), String> {
    ok(plan.verify(universe))?;
    let all: BTreeSet<&String> = plan.train_ids.iter().chain(&plan.val_ids).chain(&plan.test_ids).collect();
    ensure!(all.len() == universe.len(), "cover size");
    let json = ok(plan.to_json())?;
    let back = ok(SplitPlan::from_json(&json))?;
    ensure!(&back == plan, "JSON round trip changed the plan");
    let replayed = ok(back.replay(train, test))?;
    ensure!(&replayed == plan, "replay differs");
    ensure!(ok(replayed.to_json())? == json, "replayed JSON bytes differ");
    Ok(())
}

fn split_properties() -> Outcome {
    let mut rng = RngStream::new(6);
    let mut plans = 0;
    let mut worst_dev = 0.0f64;
    for case in 0..1000 {
        let (train, test) = random_split_input(&mut rng, case);
        let merged = ok(LabeledDataset::merge(&train, &test))?;
        let universe = merged.ids();
        let labels: HashMap<String, Label> = merged.samples.iter().map(|s| (s.id.clone(), s.label)).collect();
        let seed = rng.next_u64();
        let vf = rng.below(4) as f64 * 0.1;
        let opts = SplitOptions::new(seed).val_fraction(vf);

        let p1 = ok(policy1(&train, &test, &opts))?;
        check_plan(&p1, &train, &test, &universe)?;
        let (tp, tn) = train.class_counts();
        let (vp, vn) = label_counts(&p1.val_ids, &labels);
        for (got, total) in [(vp, tp), (vn, tn)] {
            let dev = (got as f64 - vf * total as f64).abs();
            worst_dev = worst_dev.max(dev);
            ensure!(dev <= 1.0, "case {case}: policy1 validation {got} of {total} at {vf}");
        }

        let k = 2 + rng.below((universe.len().min(10) - 1) as u64) as usize;
        let folds = ok(policy2(&train, &test, k, &opts.val_fraction(0.0)))?;
        let (mp, mn) = merged.class_counts();
        for f in &folds {
            check_plan(f, &train, &test, &universe)?;
            let (fp, fnn) = label_counts(&f.test_ids, &labels);
            for (got, total) in [(fp, mp), (fnn, mn)] {
                let dev = (got as f64 - total as f64 / k as f64).abs();
                worst_dev = worst_dev.max(dev);
                ensure!(dev <= 1.0, "case {case}: fold holds {got} of {total} with k={k}");
            }
        }

        let r = 0.05 + rng.uniform() * 0.4;
        let p3 = ok(policy3(&train, &test, r, &opts))?;
        check_plan(&p3, &train, &test, &universe)?;
        let n = policy3_move_count(train.len(), test.len(), r);
        ensure!(p3.test_ids.len() == test.len() + n, "case {case}: policy3 test size");
        let test_ids: BTreeSet<&String> = test.samples.iter().map(|s| &s.id).collect();
        let moved: Vec<String> = p3.test_ids.iter().filter(|id| !test_ids.contains(id)).cloned().collect();
        let (mvp, mvn) = label_counts(&moved, &labels);
        for (got, total) in [(mvp, tp), (mvn, tn)] {
            let dev = (got as f64 - n as f64 * total as f64 / train.len() as f64).abs();
            worst_dev = worst_dev.max(dev);
            ensure!(dev <= 1.0, "case {case}: policy3 moved {got} of {total}");
        }
        plans += 2 + folds.len();
    }
    Ok(format!("1000 datasets, {plans} plans: disjoint covers, JSON replay exact, worst stratum deviation {worst_dev:.2}"))
}

// Criterion 7: round trips.

fn round_trips() -> Outcome {
    let model = ok(CctModel::new(CctConfig::tiny_test()))?;
    let params: ModelParams = ok(model.init_params(&RngStream::new(7)))?;
    let mut meta = indexmap::IndexMap::new();
    meta.insert("seed".to_string(), "7".to_string());
    let text = ok(write_checkpoint(&params, model.config(), &meta))?;
    let ck = ok(read_checkpoint(&text))?;
    ensure!(&ck.config == model.config(), "checkpoint config differs");
    let x = random(&[4, 1, 32, 32], &mut RngStream::new(8));
    let a = ok(model.logits(&params, &x))?;
    let b = ok(model.logits(&ck.params, &x))?;
    let delta = a.max_abs_diff(&b).unwrap_or(f64::INFINITY);
    ensure!(delta < 1e-5, "checkpoint logit delta {delta:.2e}");

    let scores = [0.9, 0.8, 0.8, 0.3, 0.6, 0.1];
    let truth = [true, true, false, false, true, false];
    let labels: Vec<usize> = truth.iter().map(|&t| t as usize).collect();
    let preds: Vec<usize> = scores.iter().map(|&s| (s >= 0.5) as usize).collect();
    let curve = ok(roc_curve(&scores, &truth))?;
    let report = ok(MetricsReport::new(ok(confusion(&preds, &labels, 1))?, Some(curve.clone())))?;
    let schema: serde_json::Value = ok(serde_json::from_str(METRICS_SCHEMA))?;
    let validator = ok(jsonschema::validator_for(&schema))?;
    let run = RunManifest::new("acceptance").with("seed", 7);
    for r in [report.clone(), ok(MetricsReport::new(ConfusionMatrix { tp: 198, fp: 2, fn_: 2, tn: 198 }, None))?] {
        let json: serde_json::Value = ok(serde_json::from_str(&ok(render_report_json(&r, &run))?))?;
        let errors: Vec<String> = validator.iter_errors(&json).map(|e| e.to_string()).collect();
        ensure!(errors.is_empty(), "report JSON fails the schema: {errors:?}");
    }

    let task = ok(synthetic_task(9, 8, 4, 32, 0.25))?;
    let tc = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    let out = ok(train(&model, &tc, &task.plan, &task.store))?;
    let rows = ok(parse_history_csv(&out.history.to_csv()))?;
    let rows_csv = cct_core::metrics::parse_roc_csv(&cct_core::metrics::roc_csv(&curve, &run));
    let rows_csv = ok(rows_csv)?;
    let render = || -> Result<Vec<String>, String> {
        Ok(vec![
            ok(accuracy_svg(&rows, &run))?,
            ok(loss_svg(&rows, &run))?,
            ok(roc_svg(&rows_csv, Some(auc(&curve)), &run))?,
            ok(confusion_svg(&report.confusion, &run))?,
        ])
    };
    let (first, second) = (render()?, render()?);
    ensure!(first == second, "SVG output is not byte-stable");
    Ok(format!("checkpoint logit delta {delta:.1e}; report JSON schema-valid; 4 SVGs byte-stable"))
}

// Criterion 8: ablation wiring.

fn ablation_wiring() -> Outcome {
    let mut seen = Vec::new();
    for (tokenizer, pooling, want) in
        [("patch", "class_token", Variant::VitLite), ("patch", "seqpool", Variant::Cvt), ("convolutional", "seqpool", Variant::Cct)]
    {
        let json = format!(
            r#"{{"image_size":[32,32],"tokenizer":"{tokenizer}","pooling":"{pooling}","patch_size":4,"tokenizer_stages":2,
                "conv_kernel":3,"pool_kernel":3,"min_stem_channels":8,"embed_dim":16,"num_heads":2,"encoder_depth":1,
                "dropout_rate":0.0,"attention_dropout_rate":0.0}}"#
        );
        let cfg: CctConfig = ok(serde_json::from_str(&json))?;
        ensure!(cfg.variant() == want, "{tokenizer}+{pooling} selected {:?}", cfg.variant());
        let model = ok(CctModel::new(cfg))?;
        let params: ModelParams = ok(model.init_params(&RngStream::new(3)))?;
        let logits = ok(model.logits(&params, &random(&[2, 1, 32, 32], &mut RngStream::new(4))))?;
        ensure!(logits.shape() == [2, 2], "{want} logits shape {:?}", logits.shape());
        ensure!(params.names().any(|n| n == "class_token") == (want == Variant::VitLite), "{want}: class token parameter presence");
        seen.push(want.to_string());
    }

    let cfg = CctConfig { positional_embedding: PositionalEmbedding::None, ..CctConfig::tiny_test() };
    let params: ModelParams = ok(init_params(&cfg, &RngStream::new(11)))?;
    let mut rng = RngStream::new(12);
    let n = 9;
    let d = cfg.embed_dim;
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let toks = random(&[1, n, d], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut permuted = Vec::with_capacity(n * d);
        for &i in &perm {
            permuted.extend_from_slice(&toks.data()[i * d..(i + 1) * d]);
        }
        let permuted = ok(Tensor::new(vec![1, n, d], permuted))?;
        let run = |x: &Tensor<f64>| -> Result<Vec<f64>, String> {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = ok(classify_tokens(&mut tape, xv, &bound, &cfg, &mut RngStream::new(0), false))?;
            Ok(tape.data(out).to_vec())
        };
        let (a, b) = (run(&toks)?, run(&permuted)?);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
        ensure!(worst < 1e-12, "trial {trial}: permuted tokens changed the logits by {worst:.2e}");
    }
    Ok(format!("{} selectable from config; SeqPool permutation-invariant without positions (max delta {worst:.1e})", seen.join(", ")))
}

/// Written to the stderr handle directly so the lines survive libtest's
/// output capture.
fn report(line: String) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("metric oracle", metric_oracle),
        ("reference arithmetic", reference_arithmetic),
        ("tokenizer geometry", geometry),
        ("learning smoke test", learning_smoke),
        ("split properties", split_properties),
        ("round trips", round_trips),
        ("ablation wiring", ablation_wiring),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => report(format!("criterion {} PASS {name}: {detail}", i + 1)),
            Err(detail) => {
                report(format!("criterion {} FAIL {name}: {detail}", i + 1));
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
