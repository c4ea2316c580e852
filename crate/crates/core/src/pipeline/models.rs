//! Model bundles of the three stages and their checkpoint layouts.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::DomainClassifier;
use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{Alignment, PatientRecord, STD_FLOOR};
use crate::encoder::{head_hidden, EncoderVars, HeadVars, McGruEncoder, PredictionHeads};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{take_tensor, Mlp, MlpVars, Module};

/// Rows per forward pass when evaluating without gradients.
pub(crate) const EVAL_CHUNK: usize = 128;

/// Affine standardisation of a regression label, fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScaler {
    pub center: f64,
    pub scale: f64,
}

impl LabelScaler {
    pub const IDENTITY: Self = Self {
        center: 0.0,
        scale: 1.0,
    };

    /// Mean and population standard deviation of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("label scaler".into()));
        }
        let n = values.len() as f64;
        let center = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n;
        Ok(Self {
            center,
            scale: var.sqrt().max(STD_FLOOR),
        })
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        self.center + self.scale * z
    }

    fn export(&self, key: String, out: &mut BTreeMap<String, Tensor>) {
        out.insert(key, Tensor::row(vec![self.center, self.scale]).expect("two values"));
    }

    fn import(key: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let t = take_tensor(map, key)?;
        match t.data() {
            &[center, scale] if scale > 0.0 => Ok(Self { center, scale }),
            _ => Err(Error::CorruptCheckpoint(format!("`{key}` must hold [center, positive scale]"))),
        }
    }
}

/// Label the source model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceTask {
    /// Standardised length of stay, squared error.
    #[default]
    Regression,
    /// Outcome, binary cross-entropy on a sigmoid output.
    Binary,
}

impl SourceTask {
    fn code(self) -> f64 {
        match self {
            SourceTask::Regression => 0.0,
            SourceTask::Binary => 1.0,
        }
    }

    fn from_code(v: f64) -> Result<Self> {
        match v {
            0.0 => Ok(SourceTask::Regression),
            1.0 => Ok(SourceTask::Binary),
            _ => Err(Error::CorruptCheckpoint(format!("unknown source task code {v}"))),
        }
    }

    /// Fits the label scaler appropriate for this task.
    pub fn scaler(self, records: &[PatientRecord]) -> Result<LabelScaler> {
        match self {
            SourceTask::Regression => LabelScaler::fit(&records.iter().map(|r| r.los).collect::<Vec<_>>()),
            SourceTask::Binary => Ok(LabelScaler::IDENTITY),
        }
    }

    /// Loss of raw head outputs `out` (`B × 1`) against the records' labels.
    pub fn loss(self, g: &mut Graph, out: Var, records: &[&PatientRecord], labels: &LabelScaler) -> Result<Var> {
        match self {
            SourceTask::Regression => {
                let y = Tensor::column(records.iter().map(|r| labels.forward(r.los)).collect())?;
                losses::mse(g, out, &y)
            }
            SourceTask::Binary => {
                let y = Tensor::column(records.iter().map(|r| f64::from(r.outcome)).collect())?;
                let p = g.sigmoid(out)?;
                losses::bce(g, p, &y)
            }
        }
    }
}

fn chunks<'a>(records: &'a [&'a PatientRecord]) -> impl Iterator<Item = &'a [&'a PatientRecord]> {
    records.chunks(EVAL_CHUNK)
}

/// Encoder plus a single prediction head; the teacher of stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub encoder: McGruEncoder,
    pub head: Mlp,
    pub task: SourceTask,
    pub labels: LabelScaler,
}

#[derive(Debug, Clone)]
pub struct SourceVars {
    pub encoder: EncoderVars,
    pub head: MlpVars,
}

impl SourceModel {
    pub fn init(
        features: Vec<String>,
        hidden: usize,
        rep: usize,
        task: SourceTask,
        labels: LabelScaler,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder = McGruEncoder::init(features, hidden, rep, rng)?;
        let head = Mlp::init(rep, head_hidden(rep), 1, rng);
        Ok(Self {
            encoder,
            head,
            task,
            labels,
        })
    }

    /// Returns `(s, raw output)` for a batch.
    pub fn forward(&self, g: &mut Graph, vars: &SourceVars, records: &[&PatientRecord]) -> Result<(Var, Var)> {
        let embed = vars.encoder.embed_all(g, &self.encoder, records)?;
        let s = vars.encoder.project(g, &embed)?;
        let out = vars.head.forward(g, s)?;
        Ok((s, out))
    }

    pub fn loss(&self, g: &mut Graph, vars: &SourceVars, records: &[&PatientRecord]) -> Result<Var> {
        let (_, out) = self.forward(g, vars, records)?;
        self.task.loss(g, out, records, &self.labels)
    }

    /// Health representations (`B × S`) computed without gradients.
    pub fn represent(&self, records: &[&PatientRecord]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.encoder.bind(&mut g, false)?;
        let embed = vars.embed_all(&mut g, &self.encoder, records)?;
        let s = vars.project(&mut g, &embed)?;
        Ok(g.value(s).clone())
    }

    /// Mean loss over `records`, evaluated in chunks without gradients.
    pub fn evaluate(&self, records: &[&PatientRecord]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in chunks(records) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let l = self.loss(&mut g, &vars, chunk)?;
            total += g.value(l).data()[0] * chunk.len() as f64;
        }
        Ok(total / records.len().max(1) as f64)
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        self.encoder.export(&format!("{prefix}.encoder"), out);
        self.head.export(&format!("{prefix}.head"), out);
        self.labels.export(format!("{prefix}.labels"), out);
        out.insert(format!("{prefix}.task"), Tensor::scalar(self.task.code()));
    }

    pub fn import(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let task = take_tensor(map, &format!("{prefix}.task"))?;
        let task = SourceTask::from_code(task.item().ok_or_else(|| Error::CorruptCheckpoint(format!("{prefix}.task must be a scalar")))?)?;
        Ok(Self {
            encoder: McGruEncoder::import(&format!("{prefix}.encoder"), map)?,
            head: Mlp::import(&format!("{prefix}.head"), map)?,
            task,
            labels: LabelScaler::import(&format!("{prefix}.labels"), map)?,
        })
    }
}

impl Module for SourceModel {
    type Vars = SourceVars;

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> SourceVars {
        SourceVars {
            encoder: self.encoder.vars_from(it),
            head: self.head.vars_from(it),
        }
    }
}

/// Stage-2 state: the frozen teacher, the transition encoder over
/// `[shared.., source-private..]` channels, its source head and the domain
/// classifier over the shared channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBundle {
    pub teacher: SourceModel,
    pub encoder: McGruEncoder,
    pub head: Mlp,
    /// Absent when the schemas share no features.
    pub classifier: Option<DomainClassifier>,
    /// Number of leading encoder channels that are shared features.
    pub shared: usize,
    pub weights: losses::LossWeights,
    pub task: SourceTask,
}

impl TransitionBundle {
    pub fn init(
        teacher: SourceModel,
        alignment: &Alignment,
        hidden: usize,
        weights: losses::LossWeights,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let features: Vec<String> = alignment
            .shared
            .iter()
            .chain(&alignment.source_private)
            .cloned()
            .collect();
        for f in &features {
            if teacher.encoder.channel_index(f).is_none() {
                return Err(Error::MissingFeature(format!("{f} (teacher encoder)")));
            }
        }
        let rep = teacher.encoder.rep_size();
        let encoder = McGruEncoder::init(features, hidden, rep, rng)?;
        let head = Mlp::init(rep, head_hidden(rep), 1, rng);
        let shared = alignment.shared.len();
        let classifier = (shared > 0).then(|| DomainClassifier::init(shared * hidden, rng));
        let task = teacher.task;
        Self::assemble(teacher, encoder, head, classifier, weights, task)
    }

    fn assemble(
        teacher: SourceModel,
        encoder: McGruEncoder,
        head: Mlp,
        classifier: Option<DomainClassifier>,
        weights: losses::LossWeights,
        task: SourceTask,
    ) -> Result<Self> {
        weights.validate()?;
        if teacher.encoder.rep_size() != encoder.rep_size() {
            return Err(Error::WidthMismatch {
                teacher: teacher.encoder.rep_size(),
                transition: encoder.rep_size(),
            });
        }
        let shared = match &classifier {
            Some(c) => {
                let width = c.input_size();
                if width % encoder.hidden() != 0 || width / encoder.hidden() > encoder.features().len() {
                    return Err(Error::ShapeMismatch {
                        op: "domain classifier input",
                        left: vec![width],
                        right: vec![encoder.features().len(), encoder.hidden()],
                    });
                }
                width / encoder.hidden()
            }
            None => 0,
        };
        Ok(Self {
            teacher,
            encoder,
            head,
            classifier,
            shared,
            weights,
            task,
        })
    }

    pub fn shared_features(&self) -> &[String] {
        &self.encoder.features()[..self.shared]
    }

    fn as_source(&self) -> SourceModel {
        SourceModel {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            task: self.task,
            labels: self.teacher.labels,
        }
    }

    /// Validation objective `alpha*L_rep + beta*L_pred` over source records.
    pub fn evaluate(&self, records: &[&PatientRecord]) -> Result<f64> {
        let student = self.as_source();
        let mut total = 0.0;
        for chunk in chunks(records) {
            let mut g = Graph::new();
            let vars = student.bind(&mut g, false)?;
            let (s, out) = student.forward(&mut g, &vars, chunk)?;
            let l_pred = self.task.loss(&mut g, out, chunk, &self.teacher.labels)?;
            let mut value = self.weights.beta * g.value(l_pred).data()[0];
            if self.weights.alpha > 0.0 {
                let teacher = self.teacher.represent(chunk)?;
                let l_rep = losses::kl_rep(&mut g, &teacher, s)?;
                value += self.weights.alpha * g.value(l_rep).data()[0];
            }
            total += value * chunk.len() as f64;
        }
        Ok(total / records.len().max(1) as f64)
    }

    /// Checkpoint of the trainable parts; the teacher is stored separately.
    pub fn export(&self, out: &mut BTreeMap<String, Tensor>) {
        self.encoder.export("transition.encoder", out);
        self.head.export("transition.head", out);
        if let Some(c) = &self.classifier {
            c.export("transition.classifier", out);
        }
        self.teacher.labels.export("transition.labels".into(), out);
        out.insert("transition.task".into(), Tensor::scalar(self.task.code()));
        let w = self.weights;
        out.insert(
            "transition.loss_weights".into(),
            Tensor::row(vec![w.alpha, w.beta, w.gamma]).expect("three weights"),
        );
    }

    pub fn import(teacher: SourceModel, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let encoder = McGruEncoder::import("transition.encoder", map)?;
        let head = Mlp::import("transition.head", map)?;
        let classifier = if map.keys().any(|k| k.starts_with("transition.classifier.")) {
            Some(DomainClassifier::import("transition.classifier", map)?)
        } else {
            None
        };
        let task = take_tensor(map, "transition.task")?;
        let task = SourceTask::from_code(task.item().unwrap_or(f64::NAN))?;
        let w = take_tensor(map, "transition.loss_weights")?;
        let weights = match w.data() {
            &[alpha, beta, gamma] => losses::LossWeights { alpha, beta, gamma },
            _ => return Err(Error::CorruptCheckpoint("transition.loss_weights must hold 3 values".into())),
        };
        let labels = LabelScaler::import("transition.labels", map)?;
        if labels != teacher.labels {
            return Err(Error::CorruptCheckpoint("transition label scaling differs from the teacher's".into()));
        }
        Self::assemble(teacher, encoder, head, classifier, weights, task)
    }

    /// Only the transition encoder, which is all stage 3 needs.
    pub fn import_encoder(map: &BTreeMap<String, Tensor>) -> Result<McGruEncoder> {
        McGruEncoder::import("transition.encoder", map)
    }
}

/// Stage-3 model: encoder over the target schema and outcome/LOS heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub encoder: McGruEncoder,
    pub heads: PredictionHeads,
    pub los: LabelScaler,
}

#[derive(Debug, Clone)]
pub struct TargetVars {
    pub encoder: EncoderVars,
    pub heads: HeadVars,
}

/// One patient's prediction in original units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_outcome: f64,
    pub los: f64,
}

impl TargetModel {
    /// Returns `(p_outcome, standardised LOS)`, each `B × 1`.
    pub fn forward(&self, g: &mut Graph, vars: &TargetVars, records: &[&PatientRecord]) -> Result<(Var, Var)> {
        let embed = vars.encoder.embed_all(g, &self.encoder, records)?;
        let s = vars.encoder.project(g, &embed)?;
        vars.heads.forward(g, s)
    }

    /// `BCE(outcome) + MSE(standardised LOS)`.
    pub fn loss(&self, g: &mut Graph, vars: &TargetVars, records: &[&PatientRecord]) -> Result<Var> {
        let (p, los) = self.forward(g, vars, records)?;
        let y = Tensor::column(records.iter().map(|r| f64::from(r.outcome)).collect())?;
        let y_los = Tensor::column(records.iter().map(|r| self.los.forward(r.los)).collect())?;
        let l_out = losses::bce(g, p, &y)?;
        let l_los = losses::mse(g, los, &y_los)?;
        g.add(l_out, l_los)
    }

    pub fn predict(&self, records: &[&PatientRecord]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in chunks(records) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let (p, los) = self.forward(&mut g, &vars, chunk)?;
            out.extend(g.value(p).data().iter().zip(g.value(los).data()).map(|(&p, &z)| Prediction {
                p_outcome: p,
                los: self.los.inverse(z),
            }));
        }
        Ok(out)
    }

    /// `(mean L_tar, LOS MSE in original units)` over `records`.
    pub fn evaluate(&self, records: &[&PatientRecord]) -> Result<(f64, f64)> {
        let mut total = 0.0;
        for chunk in chunks(records) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let l = self.loss(&mut g, &vars, chunk)?;
            total += g.value(l).data()[0] * chunk.len() as f64;
        }
        let preds = self.predict(records)?;
        let los: Vec<f64> = preds.iter().map(|p| p.los).collect();
        let truth: Vec<f64> = records.iter().map(|r| r.los).collect();
        Ok((total / records.len().max(1) as f64, losses::mse_loss(&los, &truth)?))
    }

    pub fn export(&self, out: &mut BTreeMap<String, Tensor>) {
        self.encoder.export("target.encoder", out);
        self.heads.export("target.heads", out);
        self.los.export("target.labels".into(), out);
    }

    pub fn import(map: &BTreeMap<String, Tensor>) -> Result<Self> {
        Ok(Self {
            encoder: McGruEncoder::import("target.encoder", map)?,
            heads: PredictionHeads::import("target.heads", map)?,
            los: LabelScaler::import("target.labels", map)?,
        })
    }
}

impl Module for TargetModel {
    type Vars = TargetVars;

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.heads.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.heads.params_mut());
        p
    }

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> TargetVars {
        TargetVars {
            encoder: self.encoder.vars_from(it),
            heads: self.heads.vars_from(it),
        }
    }
}
