use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::models::{LabelScaler, SourceModel, TargetModel, TransitionBundle};
use super::{fit, shuffled_batches, stage_rng, RunConfig, Stage, TrainLog};
use crate::adversarial::{adversarial_step, TransitionOptimizer};
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{align_schemas, apply_normalization, compute_stats, Alignment, Dataset, FeatureSchema, PatientRecord};
use crate::dtw::{build_transfer_map, transfer_parameters, TransferMap};
use crate::encoder::{McGruEncoder, PredictionHeads};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, Metrics};
use crate::nn::Module;
use crate::optim::Adam;

fn refs(ds: &Dataset) -> Vec<&PatientRecord> {
    ds.records.iter().collect()
}

fn pick<'a>(records: &'a [PatientRecord], idx: &[usize]) -> Vec<&'a PatientRecord> {
    idx.iter().map(|&i| &records[i]).collect()
}

/// One optimiser step on `loss`; returns the loss value.
fn step<M: Module>(
    model: &mut M,
    opt: &mut Adam,
    loss: impl FnOnce(&M, &mut Graph, &M::Vars) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (vars, handles) = model.bind_with_handles(&mut g, true)?;
    let l = loss(model, &mut g, &vars)?;
    let value = g.value(l).data()[0];
    g.backward(l)?;
    let grads: Vec<Tensor> = handles.iter().map(|&v| g.grad(v)).collect();
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Copy of `ds` with every label zeroed, so a consumer provably cannot
/// depend on them.
pub fn strip_labels(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for r in &mut out.records {
        r.outcome = 0;
        r.los = 0.0;
    }
    out
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub model: SourceModel,
    pub log: TrainLog,
}

/// Stage 1 on a normalised source dataset.
pub fn train_teacher(source: &Dataset, cfg: &RunConfig) -> Result<TeacherRun> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset("source".into()));
    }
    let tc = cfg.stage(Stage::Teacher);
    let (fit_set, val_set) = source.split_validation(tc.val_fraction, cfg.seed);
    let labels = cfg.source_task.scaler(&fit_set.records)?;
    let mut model = SourceModel::init(
        source.schema.names().to_vec(),
        cfg.model.hidden,
        cfg.model.rep,
        cfg.source_task,
        labels,
        &mut stage_rng(cfg.seed, Stage::Teacher, 0),
    )?;
    let mut rng = stage_rng(cfg.seed, Stage::Teacher, 1);
    let mut opt = Adam::new(tc.adam());
    let val = refs(&val_set);
    let log = fit(
        Stage::Teacher,
        &mut model,
        &tc,
        |m, _| {
            let mut total = 0.0;
            for idx in shuffled_batches(fit_set.len(), tc.batch, &mut rng) {
                let batch = pick(&fit_set.records, &idx);
                total += step(m, &mut opt, |m, g, v| m.loss(g, v, &batch))? * batch.len() as f64;
            }
            Ok(total / fit_set.len() as f64)
        },
        |m| Ok((m.evaluate(&val)?, None)),
    )?;
    Ok(TeacherRun { model, log })
}

/// Endless reshuffled stream of indices `0..n`.
struct Cycle {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycle {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TransitionRun {
    pub bundle: TransitionBundle,
    pub log: TrainLog,
    /// Mean per-step domain accuracy of the classifier for each epoch.
    pub domain_accuracy: Vec<f64>,
}

/// Stage 2. The teacher is frozen; the target dataset contributes features
/// only (its labels are stripped before use).
pub fn train_transition(
    teacher: &SourceModel,
    source: &Dataset,
    target: &Dataset,
    alignment: &Alignment,
    cfg: &RunConfig,
) -> Result<TransitionRun> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyDataset("stage 2 needs source and target patients".into()));
    }
    let target = strip_labels(target);
    let tc = cfg.stage(Stage::Transition);
    let (fit_set, val_set) = source.split_validation(tc.val_fraction, cfg.seed);
    let mut bundle = TransitionBundle::init(
        teacher.clone(),
        alignment,
        cfg.model.hidden,
        cfg.loss,
        &mut stage_rng(cfg.seed, Stage::Transition, 0),
    )?;
    let b = tc.batch.min(fit_set.len()).min(target.len());
    let mut src_rng = stage_rng(cfg.seed, Stage::Transition, 1);
    let mut tar_stream = Cycle::new(target.len(), stage_rng(cfg.seed, Stage::Transition, 2));
    let mut opt = TransitionOptimizer::new(tc.adam());
    let mut accuracy = Vec::new();
    let val = refs(&val_set);
    let log = fit(
        Stage::Transition,
        &mut bundle,
        &tc,
        |m, _| {
            let mut total = 0.0;
            let mut acc = 0.0;
            let batches = shuffled_batches(fit_set.len(), b, &mut src_rng);
            for idx in &batches {
                let src = pick(&fit_set.records, idx);
                let tar = pick(&target.records, &tar_stream.take(src.len()));
                let l = adversarial_step(m, &mut opt, &src, &tar)?;
                total += l.objective * src.len() as f64;
                acc += l.domain_accuracy;
            }
            accuracy.push(acc / batches.len() as f64);
            Ok(total / fit_set.len() as f64)
        },
        |m| Ok((m.evaluate(&val)?, None)),
    )?;
    if bundle.teacher != *teacher {
        return Err(Error::Config("teacher parameters changed during stage 2".into()));
    }
    Ok(TransitionRun {
        bundle,
        log,
        domain_accuracy: accuracy,
    })
}

/// Target model whose channels are copied from the transition encoder
/// according to `map`; projection and heads are freshly initialised.
pub fn init_target_from_transition(
    transition: &McGruEncoder,
    map: &TransferMap,
    target_schema: &FeatureSchema,
    los: LabelScaler,
    cfg: &RunConfig,
) -> Result<TargetModel> {
    let mut rng = stage_rng(cfg.seed, Stage::Target, 0);
    let encoder = transfer_parameters(transition, map, target_schema, &mut rng)?;
    let heads = PredictionHeads::init(encoder.rep_size(), &mut rng);
    Ok(TargetModel { encoder, heads, los })
}

/// Same architecture as the transferred model with every parameter random.
pub fn scratch_target(target_schema: &FeatureSchema, los: LabelScaler, cfg: &RunConfig) -> Result<TargetModel> {
    let mut rng = stage_rng(cfg.seed, Stage::Target, 0);
    let encoder = McGruEncoder::init(target_schema.names().to_vec(), cfg.model.hidden, cfg.model.rep, &mut rng)?;
    let heads = PredictionHeads::init(encoder.rep_size(), &mut rng);
    Ok(TargetModel { encoder, heads, los })
}

#[derive(Debug, Clone)]
pub struct TargetRun {
    pub model: TargetModel,
    pub log: TrainLog,
    /// Validation LOS MSE of the initial weights.
    pub init_val_mse: f64,
}

/// Stage 3 fine-tuning of every target parameter on `BCE + MSE`.
pub fn train_target(model: TargetModel, target: &Dataset, cfg: &RunConfig) -> Result<TargetRun> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyDataset("target".into()));
    }
    let tc = cfg.stage(Stage::Target);
    let (fit_set, val_set) = target.split_validation(tc.val_fraction, cfg.seed);
    let val = refs(&val_set);
    let init_val_mse = model.evaluate(&val)?.1;
    let mut model = model;
    let mut rng = stage_rng(cfg.seed, Stage::Target, 1);
    let mut opt = Adam::new(tc.adam());
    let log = fit(
        Stage::Target,
        &mut model,
        &tc,
        |m, _| {
            let mut total = 0.0;
            for idx in shuffled_batches(fit_set.len(), tc.batch, &mut rng) {
                let batch = pick(&fit_set.records, &idx);
                total += step(m, &mut opt, |m, g, v| m.loss(g, v, &batch))? * batch.len() as f64;
            }
            Ok(total / fit_set.len() as f64)
        },
        |m| {
            let (l, mse) = m.evaluate(&val)?;
            Ok((l, Some(mse)))
        },
    )?;
    Ok(TargetRun {
        model,
        log,
        init_val_mse,
    })
}

/// Normalised inputs of one train/test split.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
    pub alignment: Alignment,
}

/// Aligns schemas and normalises: the source by its own statistics, both
/// target parts by the target training statistics.
pub fn prepare_split(source: &Dataset, target_train: &Dataset, target_test: &Dataset) -> Result<PreparedSplit> {
    let alignment = align_schemas(&source.schema, &target_train.schema);
    let src_stats = compute_stats(source)?;
    let tar_stats = compute_stats(target_train)?;
    Ok(PreparedSplit {
        source: apply_normalization(source, &src_stats).with_schema(alignment.source_schema(&source.schema)),
        target_train: apply_normalization(target_train, &tar_stats).with_schema(alignment.target_schema(&target_train.schema)),
        target_test: apply_normalization(target_test, &tar_stats).with_schema(alignment.target_schema(&target_test.schema)),
        alignment,
    })
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub transition: TransitionRun,
    pub map: TransferMap,
    pub transfer: TargetRun,
    pub transfer_metrics: Metrics,
    pub scratch: Option<(TargetRun, Metrics)>,
}

/// Stages 2 and 3 (plus the optional scratch comparator) on a prepared
/// split, given a teacher trained on `split.source`.
pub fn run_split(teacher: &SourceModel, split: &PreparedSplit, cfg: &RunConfig, scratch: bool) -> Result<SplitOutcome> {
    let transition = train_transition(teacher, &split.source, &split.target_train, &split.alignment, cfg)?;
    let map = build_transfer_map(&split.source, &split.target_train, &split.alignment, cfg.seed)?;
    let los = LabelScaler::fit(&split.target_train.los())?;
    let init = init_target_from_transition(&transition.bundle.encoder, &map, &split.target_train.schema, los, cfg)?;
    let transfer = train_target(init, &split.target_train, cfg)?;
    let transfer_metrics = evaluate_model(&transfer.model, &split.target_test)?;
    let scratch = if scratch {
        let init = scratch_target(&split.target_train.schema, los, cfg)?;
        let run = train_target(init, &split.target_train, cfg)?;
        let metrics = evaluate_model(&run.model, &split.target_test)?;
        Some((run, metrics))
    } else {
        None
    };
    Ok(SplitOutcome {
        transition,
        map,
        transfer,
        transfer_metrics,
        scratch,
    })
}
