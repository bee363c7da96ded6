use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cct_core::datasplit::{ingest, policy1, policy2, policy3, LabeledDataset, Origin, SplitOptions, SplitPlan};
use cct_core::manifest::RunManifest;
use cct_core::metrics::{parse_report_confusion, parse_roc_csv, render_report_json, roc_csv, MetricsReport, RocRow};
use cct_core::model::{
    channel_schedule, count_params, load_checkpoint, plan_tokenizer, save_checkpoint, CctConfig, CctModel, TokenizerPlan,
};
use cct_core::plot::{accuracy_svg, confusion_svg, loss_svg, roc_svg};
use cct_core::trainer::{
    evaluate, parse_history_csv, run_folds, synthetic_task, train_any, write_synthetic_task, EpochRecord, Evaluation, ImageStore,
};
use cct_core::{CctError, Result};

use crate::config::RunConfigFile;
use crate::{CvArgs, EvalArgs, EvalSet, PlanArgs, PolicyName, ReportArgs, SplitArgs, SynthArgs, TrainArgs};

/// Model and training settings of the shipped tiny preset, reused by `synth`.
pub const TINY_TEST_CONFIG: &str = include_str!("../../../configs/tiny-test.json");

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(format!("reading {}", path.display()), e))
}

fn io_err(context: String, e: std::io::Error) -> CctError {
    CctError::Io { context, source: e }
}

fn read_plan(path: &Path) -> Result<SplitPlan> {
    SplitPlan::from_json(&read_file(path)?).map_err(|e| CctError::Data(format!("plan {}: {e}", path.display())))
}

struct Data {
    train: LabeledDataset,
    test: LabeledDataset,
    merged: LabeledDataset,
}

fn load_data(train: &Path, test: &Path) -> Result<Data> {
    let train = ingest(train, Origin::OfficialTrain)?;
    let test = ingest(test, Origin::OfficialTest)?;
    let merged = LabeledDataset::merge(&train, &test)?;
    Ok(Data { train, test, merged })
}

fn check_fingerprints(plan: &SplitPlan, data: &Data) -> Result<()> {
    if plan.train_fingerprint != data.train.fingerprint() || plan.test_fingerprint != data.test.fingerprint() {
        return Err(CctError::Data("the plan was made from different manifests than the ones given".into()));
    }
    Ok(())
}

fn load_store(data: &Data, ids: &[String], model: &CctConfig, cfg: &RunConfigFile) -> Result<ImageStore<f64>> {
    ImageStore::load(&data.merged, ids, model.image_size, model.in_channels, cfg.data.normalization)
}

fn build_model(config: &CctConfig) -> Result<CctModel> {
    CctModel::new(config.clone())
}

fn stage_table(out: &mut String, plan: &TokenizerPlan, channels: &[usize]) {
    let _ = writeln!(out, "{:<6} {:>11} {:>11} {:>11} {:>9}", "stage", "input", "conv", "pool", "channels");
    for (i, s) in plan.stages.iter().enumerate() {
        let ext = |e: (usize, usize)| format!("{}x{}", e.0, e.1);
        let _ = writeln!(
            out,
            "{:<6} {:>11} {:>11} {:>11} {:>9}",
            i + 1,
            ext(s.in_extent),
            ext(s.post_conv_extent),
            ext(s.post_pool_extent),
            channels.get(i).copied().unwrap_or(s.channels)
        );
    }
}

pub fn plan(args: &PlanArgs) -> Result<()> {
    let cfg = RunConfigFile::load(&args.config)?;
    let model = &cfg.model;
    let mut out = String::new();
    let _ = writeln!(out, "config: {}", args.config.display());
    let _ = writeln!(out, "variant: {}", model.variant());
    match plan_tokenizer(model) {
        Ok(tp) => {
            stage_table(&mut out, &tp, &channel_schedule(model));
            if !tp.stages.is_empty() {
                let _ = writeln!(out, "height trace: {}", tp.height_trace());
            }
            let _ = writeln!(out, "token grid: {}x{}", tp.grid.0, tp.grid.1);
            let _ = writeln!(out, "sequence length: {}", tp.sequence_length);
            let _ = writeln!(out, "embedding dim: {}", model.embed_dim);
            let _ = writeln!(out, "parameters: {}", count_params(model)?);
            print!("{out}");
            Ok(())
        }
        Err(err) => {
            // Show the stages that still close before the failing one.
            for s in (1..model.tokenizer_stages).rev() {
                let prefix = CctConfig { tokenizer_stages: s, ..model.clone() };
                if let Ok(tp) = plan_tokenizer(&prefix) {
                    stage_table(&mut out, &tp, &channel_schedule(model));
                    let _ = writeln!(out, "height trace: {}", tp.height_trace());
                    break;
                }
            }
            print!("{out}");
            Err(err)
        }
    }
}

fn size_rows(out: &mut String, label: &str, plan: &SplitPlan, data: &LabeledDataset) -> Result<()> {
    let counts = plan.class_counts(data)?;
    for (i, (set, (p, n))) in ["train", "validation", "test"].iter().zip(counts).enumerate() {
        let _ = writeln!(out, "{:<22} {:<11} {:>9} {:>9} {:>9}", if i == 0 { label } else { "" }, set, p, n, p + n);
    }
    Ok(())
}

pub fn split(args: &SplitArgs) -> Result<()> {
    let data = load_data(&args.train_manifest, &args.test_manifest)?;
    let val_fraction = args.val_fraction.unwrap_or(match args.policy {
        PolicyName::Policy1 => 0.1,
        _ => 0.0,
    });
    let opts = SplitOptions::new(args.seed).val_fraction(val_fraction).stratify(!args.no_stratify);
    let plans = match args.policy {
        PolicyName::Policy1 => vec![("policy1".to_string(), policy1(&data.train, &data.test, &opts)?)],
        PolicyName::Policy2 => {
            let plans = policy2(&data.train, &data.test, args.k, &opts)?;
            let width = args.k.to_string().len().max(2);
            plans.into_iter().enumerate().map(|(i, p)| (format!("policy2_fold{:0width$}", i + 1), p)).collect()
        }
        PolicyName::Policy3 => vec![("policy3".to_string(), policy3(&data.train, &data.test, args.ratio, &opts)?)],
    };
    let mut out = String::new();
    let _ = writeln!(out, "{:<22} {:<11} {:>9} {:>9} {:>9}", "plan", "set", "positive", "negative", "total");
    let universe = data.merged.ids();
    for (name, plan) in &plans {
        plan.verify(&universe)?;
        size_rows(&mut out, name, plan, &data.merged)?;
    }
    for (name, plan) in &plans {
        let mut plan = plan.clone();
        plan.run.set("train_manifest", args.train_manifest.display());
        plan.run.set("test_manifest", args.test_manifest.display());
        write_file(&args.out_dir.join(format!("{name}.json")), &plan.to_json()?)?;
    }
    let _ = writeln!(out, "wrote {} plan file(s) to {}", plans.len(), args.out_dir.display());
    print!("{out}");
    Ok(())
}

fn epoch_line(r: &EpochRecord, total: usize) -> String {
    let mut s = format!("epoch {}/{} train_loss {:.6} train_acc {:.4}", r.epoch, total, r.train_loss, r.train_accuracy);
    if let (Some(l), Some(a)) = (r.val_loss, r.val_accuracy) {
        let _ = write!(s, " val_loss {l:.6} val_acc {a:.4}");
    }
    if let Some(auc) = r.val_auc {
        let _ = write!(s, " val_auc {auc:.4}");
    }
    s
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(j) = args.jobs {
        cfg.train.jobs = j;
    }
    cfg.train.validate()?;
    let model = build_model(&cfg.model)?;
    let (tm, sm) = cfg.manifests(args.train_manifest.as_deref(), args.test_manifest.as_deref())?;
    let data = load_data(&tm, &sm)?;
    let plan = read_plan(&args.plan)?;
    check_fingerprints(&plan, &data)?;
    let ids: Vec<String> = plan.train_ids.iter().chain(&plan.val_ids).cloned().collect();
    let store = load_store(&data, &ids, &cfg.model, &cfg)?;

    let outcome = train_any(&model, &cfg.train, &plan, &store)?;
    let mut history = outcome.history;
    let mut run = RunManifest::new("train")
        .with_input("config", &args.config)?
        .with_input("plan", &args.plan)?
        .with("train_fingerprint", &plan.train_fingerprint)
        .with("test_fingerprint", &plan.test_fingerprint);
    for (k, v) in &history.run.entries {
        if !run.entries.contains_key(k) {
            run.set(k, v);
        }
    }
    history.run = run;
    write_file(&args.history, &history.to_csv())?;
    if let Some(p) = &args.history_json {
        write_file(p, &history.to_json()?)?;
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(format!("creating {}", dir.display()), e))?;
    }
    save_checkpoint(&outcome.params, &cfg.model, &history.run.entries, &args.out)?;
    if let Some(last) = history.last() {
        println!("{}", epoch_line(last, cfg.train.epochs));
    }
    if history.stopped_early {
        println!("stopped early; kept epoch {}", history.best_epoch.unwrap_or(0));
    }
    println!("wrote {} and {}", args.out.display(), args.history.display());
    Ok(())
}

fn summary(report: &MetricsReport) -> String {
    let s = &report.scalars;
    let mut out = String::new();
    let cm = &report.confusion;
    let _ = writeln!(out, "confusion: tp {} fp {} fn {} tn {}", cm.tp, cm.fp, cm.fn_, cm.tn);
    for (name, v) in [
        ("accuracy", &s.accuracy),
        ("precision", &s.precision),
        ("recall", &s.recall),
        ("f1", &s.f1),
        ("tpr", &s.tpr),
        ("fpr", &s.fpr),
        ("fnr", &s.fnr),
        ("tnr", &s.tnr),
    ] {
        let _ = writeln!(out, "{name:<10} {}", v.pct());
    }
    match &report.auc_roc {
        Some(a) => {
            let _ = writeln!(out, "{:<10} {}", "auc_roc", a.pct());
        }
        None => {
            let _ = writeln!(out, "{:<10} n/a", "auc_roc");
        }
    }
    out
}

fn write_evaluation(ev: &Evaluation, run: &RunManifest, report: &Path, roc: Option<&Path>) -> Result<()> {
    write_file(report, &render_report_json(&ev.report, run)?)?;
    if let Some(p) = roc {
        match &ev.report.roc {
            Some(curve) => write_file(p, &roc_csv(curve, run))?,
            None => log::warn!("no ROC curve (single category in the evaluated set); {} not written", p.display()),
        }
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let cfg = match &args.config {
        Some(p) => {
            let cfg = RunConfigFile::load(p)?;
            if cfg.model != ck.config {
                return Err(CctError::Parameter(format!(
                    "checkpoint {} was trained with a different model config than {}",
                    args.checkpoint.display(),
                    p.display()
                )));
            }
            cfg
        }
        None => RunConfigFile { model: ck.config.clone(), ..RunConfigFile::default() },
    };
    let model = build_model(&ck.config)?;
    let (tm, sm) = cfg.manifests(args.train_manifest.as_deref(), args.test_manifest.as_deref())?;
    let data = load_data(&tm, &sm)?;
    let plan = read_plan(&args.plan)?;
    check_fingerprints(&plan, &data)?;
    let ids = match args.set {
        EvalSet::Test => &plan.test_ids,
        EvalSet::Validation => &plan.val_ids,
        EvalSet::Train => &plan.train_ids,
    };
    if ids.is_empty() {
        return Err(CctError::Data(format!("the plan's {:?} set is empty", args.set).to_lowercase()));
    }
    let store = load_store(&data, ids, &ck.config, &cfg)?;
    let ev = evaluate(&model, &ck.params, &store, ids)?;
    let mut run = RunManifest::new("eval")
        .with_input("checkpoint", &args.checkpoint)?
        .with_input("plan", &args.plan)?
        .with("set", format!("{:?}", args.set).to_lowercase())
        .with("plan_seed", plan.seed);
    if let Some(p) = &args.config {
        run = run.with_input("config", p)?;
    }
    write_evaluation(&ev, &run, &args.report, args.roc.as_deref())?;
    print!("{}", summary(&ev.report));
    println!("wrote {}", args.report.display());
    Ok(())
}

/// Trapezoidal area under listed ROC points.
fn roc_rows_auc(rows: &[RocRow]) -> f64 {
    rows.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

pub fn report(args: &ReportArgs) -> Result<()> {
    if args.history.is_none() && args.roc.is_none() && args.cm.is_none() {
        return Err(CctError::Usage("give at least one of --history, --roc, --cm".into()));
    }
    let mut written = Vec::new();
    if let Some(h) = &args.history {
        let rows = parse_history_csv(&read_file(h)?).map_err(|e| CctError::Data(format!("{}: {e}", h.display())))?;
        let run = RunManifest::new("report").with_input("history", h)?;
        written.push(("accuracy.svg", accuracy_svg(&rows, &run)?));
        written.push(("loss.svg", loss_svg(&rows, &run)?));
    }
    if let Some(r) = &args.roc {
        let rows = parse_roc_csv(&read_file(r)?).map_err(|e| CctError::Data(format!("{}: {e}", r.display())))?;
        let run = RunManifest::new("report").with_input("roc", r)?;
        written.push(("roc.svg", roc_svg(&rows, Some(roc_rows_auc(&rows)), &run)?));
    }
    if let Some(c) = &args.cm {
        let cm = parse_report_confusion(&read_file(c)?).map_err(|e| CctError::Data(format!("{}: {e}", c.display())))?;
        let run = RunManifest::new("report").with_input("cm", c)?;
        written.push(("confusion.svg", confusion_svg(&cm, &run)?));
    }
    for (name, svg) in &written {
        let p = args.svg_dir.join(name);
        write_file(&p, svg)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn cv(args: &CvArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let model = build_model(&cfg.model)?;
    let (tm, sm) = cfg.manifests(args.train_manifest.as_deref(), args.test_manifest.as_deref())?;
    let data = load_data(&tm, &sm)?;
    let opts = SplitOptions::new(args.split_seed).val_fraction(args.val_fraction).stratify(!args.no_stratify);
    let plans = policy2(&data.train, &data.test, args.k, &opts)?;
    let store = load_store(&data, &data.merged.ids(), &cfg.model, &cfg)?;
    let outcome = run_folds(&model, &cfg.train, &plans, &store, args.jobs)?;

    let base = RunManifest::new("cv")
        .with_input("config", &args.config)?
        .with("folds", args.k)
        .with("split_seed", args.split_seed)
        .with("seed", cfg.train.seed);
    let width = args.k.to_string().len().max(2);
    let mut out = String::new();
    let _ = writeln!(out, "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9}", "fold", "accuracy", "precision", "recall", "f1", "auc_roc");
    for (f, plan) in outcome.folds.iter().zip(&plans) {
        let dir = args.out_dir.join(format!("fold{:0width$}", f.fold + 1));
        let run = base.clone().with("fold", f.fold + 1).with("fold_seed", f.seed);
        write_file(&dir.join("plan.json"), &plan.to_json()?)?;
        let mut history = f.history.clone();
        for (k, v) in &run.entries {
            history.run.set(k, v);
        }
        write_file(&dir.join("history.csv"), &history.to_csv())?;
        write_evaluation(&f.evaluation, &run, &dir.join("report.json"), Some(&dir.join("roc.csv")))?;
        let s = &f.evaluation.report.scalars;
        let auc = f.evaluation.report.auc_roc.as_ref().map(|a| a.pct()).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            out,
            "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9}",
            f.fold + 1,
            s.accuracy.pct(),
            s.precision.pct(),
            s.recall.pct(),
            s.f1.pct(),
            auc
        );
    }
    let agg = &outcome.aggregate;
    let s = &agg.scalars;
    let auc = agg.auc_roc.as_ref().map(|a| a.pct()).unwrap_or_else(|| "n/a".into());
    let _ =
        writeln!(out, "{:<6} {:>9} {:>9} {:>9} {:>9} {:>9}", "mean", s.accuracy.pct(), s.precision.pct(), s.recall.pct(), s.f1.pct(), auc);
    let agg_path = args.out_dir.join("aggregate.json");
    write_file(&agg_path, &render_report_json(agg, &base)?)?;
    let _ = writeln!(out, "wrote {} fold reports and {}", outcome.folds.len(), agg_path.display());
    print!("{out}");
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let task = synthetic_task(args.seed, args.n_train, args.n_test, args.size, args.val_fraction)?;
    let (train_csv, test_csv) = write_synthetic_task(&task, &args.out_dir)?;
    let mut plan = task.plan.clone();
    plan.run.set("train_manifest", train_csv.display());
    plan.run.set("test_manifest", test_csv.display());
    let plan_path = args.out_dir.join("plan.json");
    write_file(&plan_path, &plan.to_json()?)?;

    let mut cfg: RunConfigFile = serde_json::from_str(TINY_TEST_CONFIG)?;
    cfg.model.image_size = [args.size, args.size];
    cfg.data.train_manifest = Some(PathBuf::from("train.csv"));
    cfg.data.test_manifest = Some(PathBuf::from("test.csv"));
    let cfg_path = args.out_dir.join("config.json");
    write_file(&cfg_path, &format!("{}\n", serde_json::to_string_pretty(&cfg)?))?;
    println!(
        "wrote {} training and {} test images, {}, {}, {}",
        task.train.len(),
        task.test.len(),
        train_csv.display(),
        plan_path.display(),
        cfg_path.display()
    );
    Ok(())
}
