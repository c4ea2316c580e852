//! Teacher → transition → target training with early stopping.

mod models;
mod stages;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

pub use models::{LabelScaler, Prediction, SourceModel, SourceTask, SourceVars, TargetModel, TargetVars, TransitionBundle};
pub use stages::{
    init_target_from_transition, prepare_split, run_split, scratch_target, strip_labels, train_target, train_teacher,
    train_transition, PreparedSplit, SplitOutcome, TargetRun, TeacherRun, TransitionRun,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Teacher,
    Transition,
    Target,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Transition => "transition",
            Stage::Target => "target",
        }
    }

    /// RNG stream reserved for this stage.
    fn stream(self) -> u64 {
        match self {
            Stage::Teacher => 11,
            Stage::Transition => 12,
            Stage::Target => 13,
        }
    }
}

/// Seeded generator for one purpose within a stage.
pub(crate) fn stage_rng(seed: u64, stage: Stage, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(purpose.wrapping_mul(0x9e37_79b9)));
    rng.set_stream(stage.stream());
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Fraction of training patients held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            epochs: 200,
            patience: 10,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 || self.patience == 0 {
            return bad("batch and patience must be positive".into());
        }
        if self.epochs > 0 && self.patience > self.epochs {
            return bad(format!("patience {} exceeds epochs {}", self.patience, self.epochs));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Per-stage replacements for fields of the shared [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverride {
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverrides {
    pub teacher: TrainOverride,
    pub transition: TrainOverride,
    pub target: TrainOverride,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub rep: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: crate::encoder::DEFAULT_HIDDEN,
            rep: crate::encoder::DEFAULT_REP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub stages: StageOverrides,
    pub source_task: SourceTask,
}

impl RunConfig {
    pub fn stage(&self, stage: Stage) -> TrainConfig {
        let o = match stage {
            Stage::Teacher => self.stages.teacher,
            Stage::Transition => self.stages.transition,
            Stage::Target => self.stages.target,
        };
        TrainConfig {
            lr: o.lr.unwrap_or(self.train.lr),
            batch: o.batch.unwrap_or(self.train.batch),
            epochs: o.epochs.unwrap_or(self.train.epochs),
            patience: o.patience.unwrap_or(self.train.patience),
            val_fraction: self.train.val_fraction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.hidden == 0 || self.model.rep == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        self.loss.validate()?;
        for s in [Stage::Teacher, Stage::Transition, Stage::Target] {
            self.stage(s)
                .validate()
                .map_err(|e| Error::Config(format!("{} stage: {e}", s.name())))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// LOS squared error on the validation split, original units (target
    /// stage only).
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub rows: Vec<EpochLog>,
    /// Epoch whose weights were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// `epoch,train_loss,val_loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
        }
        s
    }

    /// Convergence curve: `epoch,train_loss,val_mse` rows.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mse\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_mse.unwrap_or(f64::NAN)));
        }
        s
    }

    pub fn val_mse_curve(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.val_mse).collect()
    }
}

/// Shuffled index batches covering `0..n`.
pub(crate) fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn divergence(stage: Stage, epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Divergence {
            stage: stage.name(),
            epoch,
        },
        other => other,
    }
}

/// Runs up to `cfg.epochs` epochs with early stopping on validation loss and
/// leaves `model` at the best epoch's weights.
pub(crate) fn fit<M: Clone>(
    stage: Stage,
    model: &mut M,
    cfg: &TrainConfig,
    mut run_epoch: impl FnMut(&mut M, usize) -> Result<f64>,
    mut validate: impl FnMut(&M) -> Result<(f64, Option<f64>)>,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let mut best: Option<(f64, M)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let on_err = divergence(stage, epoch);
        let train_loss = run_epoch(model, epoch).map_err(&on_err)?;
        let (val_loss, val_mse) = validate(model).map_err(&on_err)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence {
                stage: stage.name(),
                epoch,
            });
        }
        log::debug!("{} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}", stage.name());
        log.rows.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_mse,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_overrides_apply() {
        let cfg = RunConfig {
            stages: StageOverrides {
                teacher: TrainOverride {
                    epochs: Some(5),
                    patience: Some(2),
                    ..TrainOverride::default()
                },
                ..StageOverrides::default()
            },
            ..RunConfig::default()
        };
        assert_eq!(cfg.stage(Stage::Teacher).epochs, 5);
        assert_eq!(cfg.stage(Stage::Target).epochs, 200);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.patience = 300;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fit_returns_best_epoch_and_stops_on_patience() {
        let vals = [5.0, 3.0, 4.0, 2.0, 2.5, 2.6, 2.7, 1.0];
        let cfg = TrainConfig {
            epochs: 8,
            patience: 3,
            ..TrainConfig::default()
        };
        let mut model = 0usize;
        let log = fit(
            Stage::Teacher,
            &mut model,
            &cfg,
            |m, e| {
                *m = e;
                Ok(1.0)
            },
            |m| Ok((vals[*m - 1], None)),
        )
        .unwrap();
        assert_eq!(log.rows.len(), 7);
        assert_eq!(log.best_epoch, Some(4));
        assert_eq!(model, 4);
    }

    #[test]
    fn fit_reports_divergence_epoch() {
        let cfg = TrainConfig {
            epochs: 5,
            patience: 5,
            ..TrainConfig::default()
        };
        let mut model = 0;
        let err = fit(
            Stage::Target,
            &mut model,
            &cfg,
            |_, e| Ok(if e == 3 { f64::NAN } else { 1.0 }),
            |_| Ok((1.0, None)),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { stage: "target", epoch: 3 }));
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut model = 42;
        let log = fit(Stage::Teacher, &mut model, &cfg, |_, _| Ok(0.0), |_| Ok((0.0, None))).unwrap();
        assert!(log.rows.is_empty() && log.best_epoch.is_none());
        assert_eq!(model, 42);
    }
}
