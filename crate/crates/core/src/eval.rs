//! Metrics, patient-grouped folds and cross-validated reporting.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{apply_normalization, compute_stats, Dataset};
use crate::error::{Error, Result};
use crate::losses::mse_loss;
use crate::pipeline::{prepare_split, run_split, train_teacher, RunConfig, SplitOutcome, TargetModel};

/// Share of patients held out for testing when `k == 1`.
pub const HOLDOUT_FRACTION: f64 = 0.2;

/// `(mse, mean absolute error)`.
pub fn metric_mse_mad(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    let mse = mse_loss(pred, truth)?;
    let mad = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64;
    Ok((mse, mad))
}

/// Area under the ROC curve with ties counted as one half, computed by a
/// sweep over score-sorted tie groups.
pub fn metric_auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            op: "auroc",
            left: scores.len(),
            right: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidLabel { op: "auroc", label });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auroc" });
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // for each positive: negatives strictly below plus half the tied ones
    let mut credit = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k] == 1.0).count();
        let group_neg = (j - i) - group_pos;
        credit += group_pos as f64 * (neg_below as f64 + 0.5 * group_neg as f64);
        neg_below += group_neg;
        i = j;
    }
    Ok(credit / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mad: f64,
    /// Absent when the test labels contain a single class.
    pub auroc: Option<f64>,
}

/// Test metrics of a target model; LOS errors are in original units.
pub fn evaluate_model(model: &TargetModel, test: &Dataset) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test split".into()));
    }
    let records: Vec<_> = test.records.iter().collect();
    let preds = model.predict(&records)?;
    let los: Vec<f64> = preds.iter().map(|p| p.los).collect();
    let (mse, mad) = metric_mse_mad(&los, &test.los())?;
    let scores: Vec<f64> = preds.iter().map(|p| p.p_outcome).collect();
    let auroc = match metric_auroc(&scores, &test.outcomes()) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics { mse, mad, auroc })
}

/// Patient ids assigned to each of `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    /// Checks that folds are disjoint.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, f) in self.folds.iter().enumerate() {
            for id in f {
                if !seen.insert(id) {
                    return Err(Error::LabelLeak(format!("patient `{id}` appears again in fold {i}")));
                }
            }
        }
        Ok(())
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || ids.len() < k {
        return Err(Error::TooFewPatients {
            patients: ids.len(),
            folds: k,
        });
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    let plan = FoldPlan { k, seed, folds };
    plan.check_disjoint()?;
    Ok(plan)
}

/// First epoch (1-based) whose value is at most `threshold`.
pub fn epochs_to_reach(curve: &[f64], threshold: f64) -> Option<usize> {
    curve.iter().position(|&v| v <= threshold).map(|i| i + 1)
}

/// Best value of a curve and the first epoch attaining it.
pub fn curve_best(curve: &[f64]) -> Option<(f64, usize)> {
    curve
        .iter()
        .enumerate()
        .fold(None, |best: Option<(f64, usize)>, (i, &v)| match best {
            Some((b, _)) if b <= v => best,
            _ => Some((v, i + 1)),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    /// Seeds to repeat the whole run with; empty means the run seed only.
    pub seeds: Vec<u64>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 5, seeds: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub seed: u64,
    pub fold: usize,
    pub mse: f64,
    pub mad: f64,
    pub auroc: Option<f64>,
    /// Epoch at which the target model stopped improving.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub folds: Vec<FoldReport>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

impl Summary {
    pub fn new(folds: Vec<FoldReport>) -> Self {
        let mut mean = BTreeMap::new();
        let mut std = BTreeMap::new();
        let columns: [(&str, Vec<f64>); 3] = [
            ("mse", folds.iter().map(|f| f.mse).collect()),
            ("mad", folds.iter().map(|f| f.mad).collect()),
            ("auroc", folds.iter().filter_map(|f| f.auroc).collect()),
        ];
        for (name, v) in columns {
            if v.is_empty() {
                continue;
            }
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            mean.insert(name.to_string(), m);
            std.insert(name.to_string(), (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt());
        }
        Self { folds, mean, std }
    }

    /// `metric: mean(std)` lines under `title`.
    pub fn to_text(&self, title: &str) -> String {
        let mut out = String::new();
        self.text(title, &mut out);
        out
    }

    fn text(&self, title: &str, out: &mut String) {
        out.push_str(title);
        out.push('\n');
        for name in ["mse", "mad", "auroc"] {
            if let (Some(m), Some(s)) = (self.mean.get(name), self.std.get(name)) {
                out.push_str(&format!("{name}: {m:.3}({s:.3})\n"));
            }
        }
    }
}

/// One convergence comparison per fold when the scratch comparator runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Convergence {
    pub seed: u64,
    pub fold: usize,
    pub scratch_best_val_mse: f64,
    pub scratch_best_epoch: usize,
    /// First epoch at which the transferred model matches the scratch best.
    pub transfer_epochs_to_scratch_best: Option<usize>,
}

impl Convergence {
    pub fn transfer_faster(&self) -> bool {
        self.transfer_epochs_to_scratch_best
            .is_some_and(|e| e < self.scratch_best_epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    #[serde(flatten)]
    pub transfer: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scratch: Option<Summary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub convergence: Vec<Convergence>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        self.transfer.text("transfer", &mut out);
        if let Some(s) = &self.scratch {
            s.text("scratch", &mut out);
        }
        if !self.convergence.is_empty() {
            let faster = self.convergence.iter().filter(|c| c.transfer_faster()).count();
            out.push_str(&format!(
                "convergence: transfer reached the scratch best validation mse sooner in {faster} of {} runs\n",
                self.convergence.len()
            ));
        }
        out
    }
}

/// Everything produced for one (seed, fold) run.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub seed: u64,
    pub fold: usize,
    pub outcome: SplitOutcome,
}

impl FoldRun {
    fn report(&self, metrics: &crate::eval::Metrics, best_epoch: Option<usize>) -> FoldReport {
        FoldReport {
            seed: self.seed,
            fold: self.fold,
            mse: metrics.mse,
            mad: metrics.mad,
            auroc: metrics.auroc,
            best_epoch,
        }
    }

    fn convergence(&self) -> Option<Convergence> {
        let (scratch, _) = self.outcome.scratch.as_ref()?;
        let (best, epoch) = curve_best(&scratch.log.val_mse_curve())?;
        Some(Convergence {
            seed: self.seed,
            fold: self.fold,
            scratch_best_val_mse: best,
            scratch_best_epoch: epoch,
            transfer_epochs_to_scratch_best: epochs_to_reach(&self.outcome.transfer.log.val_mse_curve(), best),
        })
    }
}

/// Assembles a report from fold runs, independent of their order.
pub fn build_report(runs: &[FoldRun]) -> Report {
    let mut sorted: Vec<&FoldRun> = runs.iter().collect();
    sorted.sort_by_key(|r| (r.seed, r.fold));
    let transfer = Summary::new(
        sorted
            .iter()
            .map(|r| r.report(&r.outcome.transfer_metrics, r.outcome.transfer.log.best_epoch))
            .collect(),
    );
    let scratch = sorted.iter().all(|r| r.outcome.scratch.is_some()).then(|| {
        Summary::new(
            sorted
                .iter()
                .filter_map(|r| r.outcome.scratch.as_ref().map(|(run, m)| r.report(m, run.log.best_epoch)))
                .collect(),
        )
    });
    let scratch = scratch.filter(|s| !s.folds.is_empty());
    Report {
        transfer,
        scratch,
        convergence: sorted.iter().filter_map(|r| r.convergence()).collect(),
    }
}

/// Train/test patient ids for every fold of a plan; `k == 1` becomes a
/// single holdout split.
fn fold_splits(ids: &[String], k: usize, seed: u64) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let plan = kfold_split(ids, k, seed)?;
    if k == 1 {
        let mut order = plan.folds[0].clone();
        let n_test = ((order.len() as f64 * HOLDOUT_FRACTION).round() as usize).clamp(1, order.len().saturating_sub(1).max(1));
        let test = order.split_off(order.len() - n_test);
        if order.is_empty() {
            return Err(Error::TooFewPatients { patients: ids.len(), folds: 2 });
        }
        return Ok(vec![(order, test)]);
    }
    Ok((0..k)
        .map(|i| {
            let train = plan
                .folds
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, f)| f.iter().cloned())
                .collect();
            (train, plan.folds[i].clone())
        })
        .collect())
}

/// Full pipeline for every seed and fold. With `target_test` given, each
/// seed runs a single split training on all of `target` and testing on it;
/// otherwise target patients are split into `cv.k` folds.
pub fn run_cv(
    source: &Dataset,
    target: &Dataset,
    target_test: Option<&Dataset>,
    cfg: &RunConfig,
    cv: &CvConfig,
    scratch: bool,
) -> Result<Vec<FoldRun>> {
    cfg.validate()?;
    let seeds = if cv.seeds.is_empty() { vec![cfg.seed] } else { cv.seeds.clone() };
    let normalized_source = apply_normalization(source, &compute_stats(source)?);
    let mut runs = Vec::new();
    for seed in seeds {
        let cfg = RunConfig { seed, ..cfg.clone() };
        let splits: Vec<(Dataset, Dataset)> = match target_test {
            Some(test) => vec![(target.clone(), test.clone())],
            None => fold_splits(&target.patient_ids(), cv.k, seed)?
                .into_iter()
                .map(|(tr, te)| (target.select_ids(&tr), target.select_ids(&te)))
                .collect(),
        };
        for (train, test) in &splits {
            let train_ids: BTreeSet<&str> = train.records.iter().map(|r| r.id.as_str()).collect();
            if let Some(r) = test.records.iter().find(|r| train_ids.contains(r.id.as_str())) {
                return Err(Error::LabelLeak(format!("patient `{}` is in both train and test", r.id)));
            }
        }
        let teacher = train_teacher(&normalized_source, &cfg)?.model;
        let outcomes: Vec<Result<SplitOutcome>> = splits
            .par_iter()
            .enumerate()
            .map(|(fold, (train, test))| {
                prepare_split(source, train, test)
                    .and_then(|split| run_split(&teacher, &split, &cfg, scratch))
                    .map_err(|e| Error::Fold {
                        fold,
                        source: Box::new(e),
                    })
            })
            .collect();
        for (fold, outcome) in outcomes.into_iter().enumerate() {
            runs.push(FoldRun {
                seed,
                fold,
                outcome: outcome?,
            });
        }
    }
    Ok(runs)
}
