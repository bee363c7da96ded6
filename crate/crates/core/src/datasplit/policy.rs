use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};
use crate::manifest::RunManifest;
use crate::rng::RngStream;

use super::{Label, LabeledDataset};

pub const SPLIT_PLAN_FORMAT: &str = "cct-split-plan/1";

const TAG_VALIDATION: u64 = 1;
const TAG_FOLDS: u64 = 2;
const TAG_MOVE: u64 = 3;

// Guards floor(fraction·count) against products like 0.29·100 = 28.999….
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    /// Official train (minus validation) / official test.
    Policy1,
    /// Fold `fold` (0-based) of `folds` over the merged data.
    Policy2 { fold: usize, folds: usize },
    /// `moved` samples taken from train into test.
    Policy3 { ratio: f64, moved: usize },
}

/// One train/validation/test assignment and everything needed to recompute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub format: String,
    pub run: RunManifest,
    pub policy: PolicyKind,
    pub seed: u64,
    pub stratified: bool,
    pub val_fraction: f64,
    pub train_fingerprint: String,
    pub test_fingerprint: String,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Inputs shared by every policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub seed: u64,
    pub stratify: bool,
    /// Fraction of each category's training samples held out for validation.
    pub val_fraction: f64,
}

impl SplitOptions {
    pub fn new(seed: u64) -> Self {
        SplitOptions { seed, stratify: true, val_fraction: 0.0 }
    }

    pub fn val_fraction(mut self, f: f64) -> Self {
        self.val_fraction = f;
        self
    }

    pub fn stratify(mut self, on: bool) -> Self {
        self.stratify = on;
        self
    }

    fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CctError::Parameter(format!("validation fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

type Entry<'a> = (&'a str, Label);

fn entries(d: &LabeledDataset) -> Vec<Entry<'_>> {
    d.samples.iter().map(|s| (s.id.as_str(), s.label)).collect()
}

/// Positions of each category (positive first), or one group of everything.
fn groups(items: &[Entry], stratify: bool) -> Vec<Vec<usize>> {
    if !stratify {
        return vec![(0..items.len()).collect()];
    }
    Label::ALL.iter().map(|&l| (0..items.len()).filter(|&i| items[i].1 == l).collect()).collect()
}

fn shuffled_groups(items: &[Entry], stratify: bool, rng: &RngStream) -> Vec<Vec<usize>> {
    let mut gs = groups(items, stratify);
    for (g, members) in gs.iter_mut().enumerate() {
        rng.fork(g as u64).shuffle(members);
    }
    gs
}

fn owned(items: &[Entry], keep: impl Fn(usize) -> bool) -> Vec<String> {
    (0..items.len()).filter(|&i| keep(i)).map(|i| items[i].0.to_string()).collect()
}

/// Split `train` into (train, validation), taking ⌊fraction·count⌋ of each
/// group at random. Both outputs keep input order.
fn carve(items: &[Entry], fraction: f64, stratify: bool, rng: &RngStream) -> (Vec<String>, Vec<String>) {
    let mut held = HashSet::new();
    for members in shuffled_groups(items, stratify, rng) {
        let take = (fraction * members.len() as f64 + FLOOR_SLACK).floor() as usize;
        held.extend(members.into_iter().take(take));
    }
    (owned(items, |i| !held.contains(&i)), owned(items, |i| held.contains(&i)))
}

fn plan_base(train: &LabeledDataset, test: &LabeledDataset, policy: PolicyKind, opts: &SplitOptions) -> SplitPlan {
    let run = RunManifest::new("split")
        .with("policy", policy_label(&policy))
        .with("seed", opts.seed)
        .with("train_fingerprint", train.fingerprint())
        .with("test_fingerprint", test.fingerprint());
    SplitPlan {
        format: SPLIT_PLAN_FORMAT.to_string(),
        run,
        policy,
        seed: opts.seed,
        stratified: opts.stratify,
        val_fraction: opts.val_fraction,
        train_fingerprint: train.fingerprint(),
        test_fingerprint: test.fingerprint(),
        train_ids: Vec::new(),
        val_ids: Vec::new(),
        test_ids: Vec::new(),
    }
}

fn policy_label(p: &PolicyKind) -> String {
    match p {
        PolicyKind::Policy1 => "policy1".into(),
        PolicyKind::Policy2 { fold, folds } => format!("policy2 fold {}/{folds}", fold + 1),
        PolicyKind::Policy3 { ratio, .. } => format!("policy3 ratio {ratio}"),
    }
}

/// Train on official train (minus a stratified validation slice), test on
/// official test verbatim.
pub fn policy1(train: &LabeledDataset, test: &LabeledDataset, opts: &SplitOptions) -> Result<SplitPlan> {
    opts.check()?;
    let merged = LabeledDataset::merge(train, test)?;
    let mut plan = plan_base(train, test, PolicyKind::Policy1, opts);
    let rng = RngStream::new(opts.seed).fork(TAG_VALIDATION);
    let (tr, val) = carve(&entries(train), opts.val_fraction, opts.stratify, &rng);
    plan.train_ids = tr;
    plan.val_ids = val;
    plan.test_ids = test.ids();
    plan.verify(&merged.ids())?;
    Ok(plan)
}

/// Merge both sets and deal them into `k` folds; plan `i` tests on fold `i`.
/// Within each category the shuffled samples are dealt round-robin, and the
/// next category starts where the previous one stopped, so fold sizes differ
/// by at most one overall and per category.
pub fn policy2(train: &LabeledDataset, test: &LabeledDataset, k: usize, opts: &SplitOptions) -> Result<Vec<SplitPlan>> {
    opts.check()?;
    let merged = LabeledDataset::merge(train, test)?;
    if k < 2 || k > merged.len() {
        return Err(CctError::Parameter(format!("fold count must lie in [2, {}], got {k}", merged.len())));
    }
    let items = entries(&merged);
    let root = RngStream::new(opts.seed);
    let mut fold_of = vec![0usize; items.len()];
    let mut offset = 0;
    for members in shuffled_groups(&items, opts.stratify, &root.fork(TAG_FOLDS)) {
        for (j, &m) in members.iter().enumerate() {
            fold_of[m] = (offset + j) % k;
        }
        offset += members.len();
    }
    let all_ids = merged.ids();
    (0..k)
        .map(|fold| {
            let mut plan = plan_base(train, test, PolicyKind::Policy2 { fold, folds: k }, opts);
            let rest: Vec<Entry> = (0..items.len()).filter(|&i| fold_of[i] != fold).map(|i| items[i]).collect();
            let rng = root.fork_path(&[TAG_VALIDATION, fold as u64]);
            let (tr, val) = carve(&rest, opts.val_fraction, opts.stratify, &rng);
            plan.train_ids = tr;
            plan.val_ids = val;
            plan.test_ids = owned(&items, |i| fold_of[i] == fold);
            plan.verify(&all_ids)?;
            Ok(plan)
        })
        .collect()
}

/// `round_half_even((ratio·train − test) / (1 + ratio))`, clamped to `[0, train]`.
pub fn policy3_move_count(train: usize, test: usize, ratio: f64) -> usize {
    let n = ((ratio * train as f64 - test as f64) / (1.0 + ratio)).round_ties_even();
    n.clamp(0.0, train as f64) as usize
}

/// Largest-remainder apportionment of `n` across groups by size.
fn apportion(n: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut quota: Vec<usize> = sizes.iter().map(|&s| (n as u128 * s as u128 / total as u128) as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let rem = |g: usize| (n as u128 * sizes[g] as u128) % total as u128;
    order.sort_by(|&a, &b| rem(b).cmp(&rem(a)).then(a.cmp(&b)));
    let short = n - quota.iter().sum::<usize>();
    for &g in order.iter().take(short) {
        quota[g] += 1;
    }
    quota
}

/// Move samples from train to test until test ≈ `ratio` × remaining train.
/// Moved samples follow the official test ids in `test_ids`.
pub fn policy3(train: &LabeledDataset, test: &LabeledDataset, ratio: f64, opts: &SplitOptions) -> Result<SplitPlan> {
    opts.check()?;
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CctError::Parameter(format!("policy3 ratio must lie in (0, 1), got {ratio}")));
    }
    let merged = LabeledDataset::merge(train, test)?;
    let n = policy3_move_count(train.len(), test.len(), ratio);
    let items = entries(train);
    let root = RngStream::new(opts.seed);
    let gs = shuffled_groups(&items, opts.stratify, &root.fork(TAG_MOVE));
    let quota = apportion(n, &gs.iter().map(Vec::len).collect::<Vec<_>>());
    let mut moved = HashSet::new();
    for (members, q) in gs.into_iter().zip(quota) {
        moved.extend(members.into_iter().take(q));
    }
    let remaining: Vec<Entry> = (0..items.len()).filter(|i| !moved.contains(i)).map(|i| items[i]).collect();
    let (tr, val) = carve(&remaining, opts.val_fraction, opts.stratify, &root.fork(TAG_VALIDATION));
    let mut plan = plan_base(train, test, PolicyKind::Policy3 { ratio, moved: n }, opts);
    plan.train_ids = tr;
    plan.val_ids = val;
    plan.test_ids = test.ids();
    plan.test_ids.extend(owned(&items, |i| moved.contains(&i)));
    plan.verify(&merged.ids())?;
    Ok(plan)
}

/// Hold out a validation slice of an existing plan's training ids.
pub fn carve_validation(plan: &SplitPlan, data: &LabeledDataset, fraction: f64, seed: u64) -> Result<SplitPlan> {
    let labels: HashMap<&str, Label> = entries(data).into_iter().collect();
    let items: Vec<Entry> = plan
        .train_ids
        .iter()
        .map(|id| {
            labels.get(id.as_str()).map(|&l| (id.as_str(), l)).ok_or_else(|| CctError::Data(format!("plan id {id:?} not in dataset")))
        })
        .collect::<Result<_>>()?;
    let (tr, val) = carve(&items, fraction, plan.stratified, &RngStream::new(seed).fork(TAG_VALIDATION));
    let mut out = plan.clone();
    out.train_ids = tr;
    out.val_ids.extend(val);
    Ok(out)
}

impl SplitPlan {
    /// The three id lists are pairwise disjoint and together equal `universe`.
    pub fn verify(&self, universe: &[String]) -> Result<()> {
        let mut seen = HashSet::new();
        for (set, ids) in [("train", &self.train_ids), ("validation", &self.val_ids), ("test", &self.test_ids)] {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(CctError::Data(format!("split plan lists {id:?} twice (again in {set})")));
                }
            }
        }
        let all: HashSet<&str> = universe.iter().map(String::as_str).collect();
        if seen.len() != all.len() || seen.iter().any(|id| !all.contains(id)) {
            return Err(CctError::Data(format!("split plan covers {} ids but the input has {}", seen.len(), all.len())));
        }
        Ok(())
    }

    /// Recompute this plan from the same inputs. Fails if the datasets differ
    /// from the ones the plan was made from.
    pub fn replay(&self, train: &LabeledDataset, test: &LabeledDataset) -> Result<SplitPlan> {
        if train.fingerprint() != self.train_fingerprint || test.fingerprint() != self.test_fingerprint {
            return Err(CctError::Data("datasets do not match the fingerprints recorded in the plan".into()));
        }
        let opts = SplitOptions { seed: self.seed, stratify: self.stratified, val_fraction: self.val_fraction };
        let mut plan = match &self.policy {
            PolicyKind::Policy1 => policy1(train, test, &opts)?,
            PolicyKind::Policy2 { fold, folds } => policy2(train, test, *folds, &opts)?
                .into_iter()
                .nth(*fold)
                .ok_or_else(|| CctError::Data(format!("fold {fold} out of range")))?,
            PolicyKind::Policy3 { ratio, .. } => policy3(train, test, *ratio, &opts)?,
        };
        plan.run = self.run.clone();
        Ok(plan)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<SplitPlan> {
        let plan: SplitPlan = serde_json::from_str(text)?;
        if plan.format != SPLIT_PLAN_FORMAT {
            return Err(CctError::Data(format!("split plan format {:?}, expected {SPLIT_PLAN_FORMAT:?}", plan.format)));
        }
        Ok(plan)
    }

    /// (positives, negatives) per set, looked up in `data`.
    pub fn class_counts(&self, data: &LabeledDataset) -> Result<[(usize, usize); 3]> {
        let labels: HashMap<&str, Label> = entries(data).into_iter().collect();
        let count = |ids: &[String]| -> Result<(usize, usize)> {
            let mut c = (0, 0);
            for id in ids {
                match labels.get(id.as_str()) {
                    Some(Label::Positive) => c.0 += 1,
                    Some(Label::Negative) => c.1 += 1,
                    None => return Err(CctError::Data(format!("plan id {id:?} not in dataset"))),
                }
            }
            Ok(c)
        };
        Ok([count(&self.train_ids)?, count(&self.val_ids)?, count(&self.test_ids)?])
    }
}
