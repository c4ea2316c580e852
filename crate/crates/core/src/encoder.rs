//! Multi-channel GRU encoder: one univariate GRU per medical feature, their
//! final hidden states stacked into an embedding matrix `F` (`N × H`), and a
//! linear projection of the row-major flattened `F` into the health
//! representation `s`.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{sigmoid, Graph, Tensor, Var};
use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::nn::{take_tensor, uniform, Linear, LinearVars, Mlp, MlpVars, Module};

pub const DEFAULT_HIDDEN: usize = 16;
pub const DEFAULT_REP: usize = 32;

const GATE_PARAMS: [&str; 9] = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];

/// Parameters of one univariate GRU channel with hidden size `H`.
///
/// Input weights are `1 × H`, recurrent weights `H × H`, biases `1 × H`.
/// The update rule is `h_t = (1 - z) ⊙ h_{t-1} + z ⊙ h̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruChannelParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruChannelParams {
    pub fn zeros(hidden: usize) -> Self {
        let row = || Tensor::zeros(1, hidden);
        let sq = || Tensor::zeros(hidden, hidden);
        Self {
            w_z: row(),
            u_z: sq(),
            b_z: row(),
            w_r: row(),
            u_r: sq(),
            b_r: row(),
            w_h: row(),
            u_h: sq(),
            b_h: row(),
        }
    }

    /// Weights uniform in `[-1/√H, 1/√H]`, biases zero.
    pub fn init(hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(hidden);
        for t in [&mut p.w_z, &mut p.u_z, &mut p.w_r, &mut p.u_r, &mut p.w_h, &mut p.u_h] {
            let (r, c) = t.dims2().expect("matrix");
            *t = uniform(rng, r, c, bound);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.b_z.cols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        for (name, t) in GATE_PARAMS.iter().zip(self.params()) {
            let expected = if name.starts_with('u') { (h, h) } else { (1, h) };
            if t.dims2() != Some(expected) {
                return Err(Error::ShapeMismatch {
                    op: "gru_channel",
                    left: vec![expected.0, expected.1],
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// One recurrence step on plain vectors.
    pub fn gru_step(&self, h_prev: &[f64], x: f64) -> Result<Vec<f64>> {
        let h = self.hidden();
        if h_prev.len() != h {
            return Err(Error::LengthMismatch {
                op: "gru_step",
                left: h_prev.len(),
                right: h,
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "gru_step" });
        }
        // accumulation order mirrors the graph ops: (x·W + h·U) + b
        let pre = |w: &Tensor, u: &Tensor, b: &Tensor, state: &[f64]| -> Vec<f64> {
            (0..h)
                .map(|j| {
                    let xw = x * w.data()[j];
                    let mut hu = 0.0;
                    for (k, s) in state.iter().enumerate() {
                        if *s != 0.0 {
                            hu += s * u.data()[k * h + j];
                        }
                    }
                    (xw + hu) + b.data()[j]
                })
                .collect()
        };
        let z: Vec<f64> = pre(&self.w_z, &self.u_z, &self.b_z, h_prev).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = pre(&self.w_r, &self.u_r, &self.b_r, h_prev).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let cand: Vec<f64> = pre(&self.w_h, &self.u_h, &self.b_h, &rh).into_iter().map(f64::tanh).collect();
        Ok((0..h)
            .map(|j| (-z[j] + 1.0) * h_prev[j] + z[j] * cand[j])
            .collect())
    }

    /// Final hidden state after feeding `seq` from a zero initial state.
    pub fn encode_channel(&self, seq: &[f64]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::Empty("channel sequence".into()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let out = vars.encode(&mut g, &[seq])?;
        Ok(g.value(out).data().to_vec())
    }

    fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (name, t) in GATE_PARAMS.iter().zip(self.params()) {
            out.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    fn import(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| take_tensor(map, &format!("{prefix}.{name}"));
        let p = Self {
            w_z: get("w_z")?,
            u_z: get("u_z")?,
            b_z: get("b_z")?,
            w_r: get("w_r")?,
            u_r: get("u_r")?,
            b_r: get("b_r")?,
            w_h: get("w_h")?,
            u_h: get("u_h")?,
            b_h: get("b_h")?,
        };
        p.check().map_err(|e| Error::CorruptCheckpoint(format!("{prefix}: {e}")))?;
        Ok(p)
    }
}

impl Module for GruChannelParams {
    type Vars = GruVars;

    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h, &self.b_h,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> GruVars {
        let mut next = || it.next().expect("gru parameter");
        GruVars {
            w_z: next(),
            u_z: next(),
            b_z: next(),
            w_r: next(),
            u_r: next(),
            b_r: next(),
            w_h: next(),
            u_h: next(),
            b_h: next(),
        }
    }
}

impl GruVars {
    fn gate(&self, g: &mut Graph, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add_row(s, b)
    }

    /// One batched step: `x` is `B × 1`, `h_prev` is `B × H`.
    pub fn step(&self, g: &mut Graph, h_prev: Var, x: Var) -> Result<Var> {
        let z = self.gate(g, x, h_prev, self.w_z, self.u_z, self.b_z)?;
        let z = g.sigmoid(z)?;
        let r = self.gate(g, x, h_prev, self.w_r, self.u_r, self.b_r)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h_prev)?;
        let cand = self.gate(g, x, rh, self.w_h, self.u_h, self.b_h)?;
        let cand = g.tanh(cand)?;
        let neg_z = g.scale(z, -1.0)?;
        let keep = g.add_scalar(neg_z, 1.0)?;
        let kept = g.mul(keep, h_prev)?;
        let fresh = g.mul(z, cand)?;
        g.add(kept, fresh)
    }

    /// Encodes a batch of sequences (possibly of different lengths) into
    /// their final hidden states, `B × H`. Rows whose sequence has ended are
    /// carried forward unchanged.
    pub fn encode(&self, g: &mut Graph, seqs: &[&[f64]]) -> Result<Var> {
        let b = seqs.len();
        if b == 0 {
            return Err(Error::Empty("channel batch".into()));
        }
        if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
            return Err(Error::Empty(format!("channel sequence {i}")));
        }
        let hidden = g.value(self.b_z).cols();
        let t_max = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut h = g.constant(Tensor::zeros(b, hidden))?;
        for t in 0..t_max {
            let xs: Vec<f64> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0.0)).collect();
            let x = g.constant(Tensor::column(xs)?)?;
            let next = self.step(g, h, x)?;
            let active: Vec<bool> = seqs.iter().map(|s| t < s.len()).collect();
            h = if active.iter().all(|a| *a) {
                next
            } else {
                let mask = |on: bool| {
                    let data = active
                        .iter()
                        .flat_map(|&a| std::iter::repeat_n(if a == on { 1.0 } else { 0.0 }, hidden))
                        .collect();
                    Tensor::matrix(b, hidden, data)
                };
                let m_on = g.constant(mask(true)?)?;
                let m_off = g.constant(mask(false)?)?;
                let fresh = g.mul(m_on, next)?;
                let held = g.mul(m_off, h)?;
                g.add(fresh, held)?
            };
        }
        Ok(h)
    }
}

/// Per-feature GRU channels plus the projection `s = flatten(F) · W1 + b1`.
#[derive(Debug, Clone, PartialEq)]
pub struct McGruEncoder {
    features: Vec<String>,
    pub channels: Vec<GruChannelParams>,
    pub projection: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub channels: Vec<GruVars>,
    pub projection: LinearVars,
}

impl McGruEncoder {
    pub fn new(features: Vec<String>, channels: Vec<GruChannelParams>, projection: Linear) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("encoder features".into()));
        }
        if features.len() != channels.len() {
            return Err(Error::LengthMismatch {
                op: "encoder channels",
                left: features.len(),
                right: channels.len(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &features {
            if !seen.insert(f) {
                return Err(Error::DuplicateFeature(f.clone()));
            }
        }
        let hidden = channels[0].hidden();
        for c in &channels {
            c.check()?;
            if c.hidden() != hidden {
                return Err(Error::ShapeMismatch {
                    op: "encoder channels",
                    left: vec![hidden],
                    right: vec![c.hidden()],
                });
            }
        }
        if projection.input_size() != features.len() * hidden {
            return Err(Error::ShapeMismatch {
                op: "encoder projection",
                left: vec![features.len() * hidden],
                right: projection.weight.shape().to_vec(),
            });
        }
        Ok(Self {
            features,
            channels,
            projection,
        })
    }

    /// Randomly initialised encoder for `features`.
    pub fn init(features: Vec<String>, hidden: usize, rep: usize, rng: &mut impl Rng) -> Result<Self> {
        let channels = features.iter().map(|_| GruChannelParams::init(hidden, rng)).collect();
        let projection = Linear::init(features.len() * hidden, rep, rng);
        Self::new(features, channels, projection)
    }

    pub fn zeros(features: Vec<String>, hidden: usize, rep: usize) -> Result<Self> {
        let channels = features.iter().map(|_| GruChannelParams::zeros(hidden)).collect();
        let projection = Linear::zeros(features.len() * hidden, rep);
        Self::new(features, channels, projection)
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn hidden(&self) -> usize {
        self.channels[0].hidden()
    }

    pub fn rep_size(&self) -> usize {
        self.projection.output_size()
    }

    pub fn channel_index(&self, feature: &str) -> Option<usize> {
        self.features.iter().position(|f| f == feature)
    }

    pub fn channel(&self, feature: &str) -> Option<&GruChannelParams> {
        self.channel_index(feature).map(|i| &self.channels[i])
    }

    /// `N × H` matrix whose row `i` encodes feature `i` of the record.
    /// Features are looked up by name, so storage order is irrelevant.
    pub fn build_embedding_matrix(&self, record: &PatientRecord) -> Result<Tensor> {
        let h = self.hidden();
        let mut data = Vec::with_capacity(self.features.len() * h);
        for (f, ch) in self.features.iter().zip(&self.channels) {
            data.extend(ch.encode_channel(record.sequence(f)?)?);
        }
        Tensor::matrix(self.features.len(), h, data)
    }

    /// `flatten(F) · W1 + b1`.
    pub fn project_health(&self, embedding: &Tensor) -> Result<Vec<f64>> {
        let expected = (self.features.len(), self.hidden());
        if embedding.dims2() != Some(expected) {
            return Err(Error::ShapeMismatch {
                op: "project_health",
                left: vec![expected.0, expected.1],
                right: embedding.shape().to_vec(),
            });
        }
        self.projection.forward(embedding.data())
    }

    /// Health representation of a single record.
    pub fn represent(&self, record: &PatientRecord) -> Result<Vec<f64>> {
        self.project_health(&self.build_embedding_matrix(record)?)
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (i, (f, ch)) in self.features.iter().zip(&self.channels).enumerate() {
            ch.export(&format!("{prefix}.channel.{i:04}.{f}"), out);
        }
        self.projection.export(&format!("{prefix}.projection"), out);
    }

    pub fn import(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let channel_prefix = format!("{prefix}.channel.");
        let mut found: BTreeMap<usize, String> = BTreeMap::new();
        for key in map.keys() {
            let Some(rest) = key.strip_prefix(&channel_prefix) else {
                continue;
            };
            let (idx, tail) = rest
                .split_once('.')
                .ok_or_else(|| Error::CorruptCheckpoint(format!("bad channel key `{key}`")))?;
            let (feature, _param) = tail
                .rsplit_once('.')
                .ok_or_else(|| Error::CorruptCheckpoint(format!("bad channel key `{key}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::CorruptCheckpoint(format!("bad channel index in `{key}`")))?;
            if let Some(prev) = found.insert(idx, feature.to_string()) {
                if prev != feature {
                    return Err(Error::CorruptCheckpoint(format!("channel {idx} names both `{prev}` and `{feature}`")));
                }
            }
        }
        if found.keys().copied().ne(0..found.len()) {
            return Err(Error::CorruptCheckpoint(format!("{prefix}: channel indices are not contiguous")));
        }
        let mut features = Vec::with_capacity(found.len());
        let mut channels = Vec::with_capacity(found.len());
        for (i, f) in found {
            channels.push(GruChannelParams::import(&format!("{channel_prefix}{i:04}.{f}"), map)?);
            features.push(f);
        }
        let projection = Linear::import(&format!("{prefix}.projection"), map)?;
        Self::new(features, channels, projection).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }
}

impl Module for McGruEncoder {
    type Vars = EncoderVars;

    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.channels.iter().flat_map(|c| c.params()).collect();
        p.extend(self.projection.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.channels.iter_mut().flat_map(|c| c.params_mut()).collect();
        p.extend(self.projection.params_mut());
        p
    }

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> EncoderVars {
        EncoderVars {
            channels: self.channels.iter().map(|c| c.vars_from(it)).collect(),
            projection: self.projection.vars_from(it),
        }
    }
}

impl EncoderVars {
    /// Encodes channel `index` for a batch; returns `B × H`.
    pub fn embed(&self, g: &mut Graph, index: usize, seqs: &[&[f64]]) -> Result<Var> {
        self.channels[index].encode(g, seqs)
    }

    /// Encodes every channel in encoder order for the given records.
    pub fn embed_all(&self, g: &mut Graph, encoder: &McGruEncoder, records: &[&PatientRecord]) -> Result<Vec<Var>> {
        encoder
            .features()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let seqs = records.iter().map(|r| r.sequence(f)).collect::<Result<Vec<_>>>()?;
                self.embed(g, i, &seqs)
            })
            .collect()
    }

    /// Flattens per-channel embeddings (row-major `F` per patient) into
    /// `B × (N·H)`.
    pub fn flatten(&self, g: &mut Graph, embeddings: &[Var]) -> Result<Var> {
        g.concat_cols(embeddings)
    }

    /// `B × S` health representation from per-channel embeddings.
    pub fn project(&self, g: &mut Graph, embeddings: &[Var]) -> Result<Var> {
        let flat = self.flatten(g, embeddings)?;
        self.projection.forward(g, flat)
    }
}

/// Width of the hidden layer of every prediction head.
pub fn head_hidden(rep: usize) -> usize {
    (rep / 2).max(1)
}

/// Target-model heads: outcome probability (sigmoid) and LOS (identity).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHeads {
    pub outcome: Mlp,
    pub los: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub outcome: MlpVars,
    pub los: MlpVars,
}

impl PredictionHeads {
    pub fn init(rep: usize, rng: &mut impl Rng) -> Self {
        Self {
            outcome: Mlp::init(rep, head_hidden(rep), 1, rng),
            los: Mlp::init(rep, head_hidden(rep), 1, rng),
        }
    }

    pub fn zeros(rep: usize) -> Self {
        Self {
            outcome: Mlp::zeros(rep, head_hidden(rep), 1),
            los: Mlp::zeros(rep, head_hidden(rep), 1),
        }
    }

    /// `(p_outcome, los)` for one representation.
    pub fn predict(&self, s: &[f64]) -> Result<(f64, f64)> {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "predict" });
        }
        let logit = self.outcome.forward(s)?[0];
        let los = self.los.forward(s)?[0];
        Ok((sigmoid(logit), los))
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        self.outcome.export(&format!("{prefix}.outcome"), out);
        self.los.export(&format!("{prefix}.los"), out);
    }

    pub fn import(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        Ok(Self {
            outcome: Mlp::import(&format!("{prefix}.outcome"), map)?,
            los: Mlp::import(&format!("{prefix}.los"), map)?,
        })
    }
}

impl Module for PredictionHeads {
    type Vars = HeadVars;

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.outcome.params();
        p.extend(self.los.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.outcome.params_mut();
        p.extend(self.los.params_mut());
        p
    }

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> HeadVars {
        HeadVars {
            outcome: self.outcome.vars_from(it),
            los: self.los.vars_from(it),
        }
    }
}

impl HeadVars {
    /// Returns `(p_outcome, los)`, each `B × 1`.
    pub fn forward(&self, g: &mut Graph, s: Var) -> Result<(Var, Var)> {
        let logit = self.outcome.forward(g, s)?;
        let p = g.sigmoid(logit)?;
        let los = self.los.forward(g, s)?;
        Ok((p, los))
    }
}
