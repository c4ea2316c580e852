//! Domain classifier over shared-feature embeddings and the joint
//! adversarial/distillation update of the transition model.
//!
//! The classifier minimises domain cross-entropy. Its input passes through a
//! gradient reversal node scaled by `gamma`, so in the same backward pass the
//! encoder receives `-gamma` times the classifier's gradient and ascends on
//! the domain loss.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{Mlp, MlpVars, Module};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::TransitionBundle;

/// Hidden width of the domain classifier.
pub const CLASSIFIER_HIDDEN: usize = 32;

/// Domain label of source rows.
pub const SOURCE_DOMAIN: usize = 0;
/// Domain label of target rows.
pub const TARGET_DOMAIN: usize = 1;

/// `N_sf·H → 32 (tanh) → 2` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifier {
    pub mlp: Mlp,
}

impl DomainClassifier {
    pub fn init(input: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::init(input, CLASSIFIER_HIDDEN, 2, rng),
        }
    }

    pub fn zeros(input: usize) -> Self {
        Self {
            mlp: Mlp::zeros(input, CLASSIFIER_HIDDEN, 2),
        }
    }

    pub fn input_size(&self) -> usize {
        self.mlp.input_size()
    }

    /// Logits for one patient's shared-feature embedding matrix.
    pub fn classify_domain(&self, f_sf: &Tensor) -> Result<[f64; 2]> {
        if f_sf.numel() != self.input_size() || f_sf.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "classify_domain",
                left: vec![self.input_size()],
                right: f_sf.shape().to_vec(),
            });
        }
        let out = self.mlp.forward(f_sf.data())?;
        Ok([out[0], out[1]])
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        self.mlp.export(prefix, out);
    }

    pub fn import(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mlp = Mlp::import(prefix, map)?;
        if mlp.output.output_size() != 2 {
            return Err(Error::CorruptCheckpoint(format!("{prefix}: classifier must emit 2 logits")));
        }
        Ok(Self { mlp })
    }
}

impl Module for DomainClassifier {
    type Vars = MlpVars;

    fn params(&self) -> Vec<&Tensor> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> MlpVars {
        self.mlp.vars_from(it)
    }
}

/// How the domain branch is attached to the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainBranch {
    /// Through a reversal node with the given strength.
    Reversed(f64),
    /// Without reversal; used to probe the sign property.
    Unreversed,
    /// On a detached copy of the embeddings: the classifier trains, the
    /// encoder receives nothing.
    Detached,
    /// No classifier at all.
    Off,
}

/// Which terms enter the backward objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms {
    pub rep: bool,
    pub pred: bool,
    pub domain: DomainBranch,
}

impl Terms {
    /// The training objective implied by the bundle's loss weights.
    pub fn for_bundle(bundle: &TransitionBundle) -> Self {
        let w = bundle.weights;
        Self {
            rep: w.alpha > 0.0,
            pred: true,
            domain: match &bundle.classifier {
                None => DomainBranch::Off,
                Some(_) if w.gamma > 0.0 => DomainBranch::Reversed(w.gamma),
                Some(_) => DomainBranch::Detached,
            },
        }
    }
}

/// Unweighted loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub l_pred: f64,
    pub l_rep: f64,
    pub l_d: f64,
    /// Value of the backward objective `alpha*l_rep + beta*l_pred + l_d`.
    pub objective: f64,
    /// Fraction of batch rows the classifier assigns to the right domain.
    pub domain_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TransitionGrads {
    pub losses: StepLosses,
    pub encoder: Vec<Tensor>,
    pub head: Vec<Tensor>,
    pub classifier: Vec<Tensor>,
}

fn check_batches(bundle: &TransitionBundle, src: &[&PatientRecord], tar: &[&PatientRecord]) -> Result<()> {
    if src.is_empty() || tar.is_empty() {
        return Err(Error::Empty("adversarial batch".into()));
    }
    if bundle.classifier.is_some() && src.len() != tar.len() {
        return Err(Error::LengthMismatch {
            op: "balanced domain batch",
            left: src.len(),
            right: tar.len(),
        });
    }
    for f in bundle.shared_features() {
        if let Some(r) = tar.iter().find(|r| !r.series.contains_key(f)) {
            return Err(Error::MissingFeature(format!("{f} (target patient {})", r.id)));
        }
    }
    Ok(())
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &d)| {
            let row = logits.row_slice(i);
            usize::from(row[1] > row[0]) == d
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Builds the transition objective for one balanced batch and returns its
/// gradients. Target rows only ever pass through the shared channels.
pub fn transition_gradients(
    bundle: &TransitionBundle,
    src: &[&PatientRecord],
    tar: &[&PatientRecord],
    terms: Terms,
) -> Result<TransitionGrads> {
    check_batches(bundle, src, tar)?;
    let w = bundle.weights;
    let mut g = Graph::new();
    let (enc, enc_handles) = bundle.encoder.bind_with_handles(&mut g, true)?;
    let (head, head_handles) = bundle.head.bind_with_handles(&mut g, true)?;
    let clf = match &bundle.classifier {
        Some(c) if terms.domain != DomainBranch::Off => Some(c.bind_with_handles(&mut g, true)?),
        _ => None,
    };

    let src_embed = enc.embed_all(&mut g, &bundle.encoder, src)?;
    let s_src = enc.project(&mut g, &src_embed)?;
    let mut losses = StepLosses::default();
    let mut parts = Vec::new();

    let out = head.forward(&mut g, s_src)?;
    let l_pred = bundle.task.loss(&mut g, out, src, &bundle.teacher.labels)?;
    losses.l_pred = g.value(l_pred).data()[0];
    if terms.pred {
        parts.push(g.scale(l_pred, w.beta)?);
    }

    if terms.rep {
        let teacher = bundle.teacher.represent(src)?;
        let l_rep = losses::kl_rep(&mut g, &teacher, s_src)?;
        losses.l_rep = g.value(l_rep).data()[0];
        parts.push(g.scale(l_rep, w.alpha)?);
    }

    if let Some((clf, _)) = &clf {
        let m = bundle.shared;
        let tar_embed = (0..m)
            .map(|i| {
                let seqs = tar
                    .iter()
                    .map(|r| r.sequence(&bundle.encoder.features()[i]))
                    .collect::<Result<Vec<_>>>()?;
                enc.embed(&mut g, i, &seqs)
            })
            .collect::<Result<Vec<_>>>()?;
        let f_src = g.concat_cols(&src_embed[..m])?;
        let f_tar = g.concat_cols(&tar_embed)?;
        let stacked = g.concat_rows(&[f_src, f_tar])?;
        let input = match terms.domain {
            DomainBranch::Reversed(lambda) => g.gradient_reverse(stacked, lambda)?,
            DomainBranch::Unreversed => stacked,
            DomainBranch::Detached | DomainBranch::Off => {
                let detached = g.value(stacked).clone();
                g.constant(detached)?
            }
        };
        let logits = clf.forward(&mut g, input)?;
        let labels: Vec<usize> = std::iter::repeat_n(SOURCE_DOMAIN, src.len())
            .chain(std::iter::repeat_n(TARGET_DOMAIN, tar.len()))
            .collect();
        let l_d = losses::domain_ce(&mut g, logits, &labels)?;
        losses.l_d = g.value(l_d).data()[0];
        losses.domain_accuracy = accuracy(g.value(logits), &labels);
        parts.push(l_d);
    }

    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::Empty("transition objective has no terms".into()))?;
    let objective = rest.iter().try_fold(first, |acc, &p| g.add(acc, p))?;
    losses.objective = g.value(objective).data()[0];
    g.backward(objective)?;
    let grads = |handles: &[Var]| handles.iter().map(|&v| g.grad(v)).collect::<Vec<_>>();
    let classifier = match (&clf, &bundle.classifier) {
        (Some((_, handles)), _) => grads(handles),
        (None, Some(c)) => c.params().iter().map(|t| Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()])).collect::<Result<_>>()?,
        (None, None) => Vec::new(),
    };
    Ok(TransitionGrads {
        losses,
        encoder: grads(&enc_handles),
        head: grads(&head_handles),
        classifier,
    })
}

/// Optimiser state for every trainable part of a transition bundle.
#[derive(Debug, Clone)]
pub struct TransitionOptimizer {
    adam: Adam,
}

impl TransitionOptimizer {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { adam: Adam::new(cfg) }
    }
}

/// One simultaneous update of encoder, source head and domain classifier on
/// a balanced pair of batches.
pub fn adversarial_step(
    bundle: &mut TransitionBundle,
    opt: &mut TransitionOptimizer,
    src: &[&PatientRecord],
    tar: &[&PatientRecord],
) -> Result<StepLosses> {
    let terms = Terms::for_bundle(bundle);
    let grads = transition_gradients(bundle, src, tar, terms)?;
    let mut all = grads.encoder;
    all.extend(grads.head);
    all.extend(grads.classifier);
    let mut params = bundle.encoder.params_mut();
    params.extend(bundle.head.params_mut());
    if let Some(c) = bundle.classifier.as_mut() {
        params.extend(c.params_mut());
    }
    opt.adam.step(params, &all)?;
    Ok(grads.losses)
}
