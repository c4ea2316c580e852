//! Parameter containers shared by every model: the [`Module`] trait, dense
//! layers and small MLPs.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{matmul_data, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A bundle of trainable tensors that can be placed on a graph.
///
/// `params`, `params_mut` and the order in which [`Module::Vars`] consumes
/// variables must agree, so optimisers can zip parameters with gradients.
pub trait Module {
    type Vars;

    fn params(&self) -> Vec<&Tensor>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> Self::Vars;

    /// Places every parameter on `g` as a leaf. Frozen modules bind with
    /// `trainable = false`.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Self::Vars> {
        let vars = self
            .params()
            .into_iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.vars_from(&mut vars.into_iter()))
    }

    /// Like [`Module::bind`], also returning the leaf handles in parameter
    /// order so their gradients can be read back.
    fn bind_with_handles(&self, g: &mut Graph, trainable: bool) -> Result<(Self::Vars, Vec<Var>)> {
        let vars = self
            .params()
            .into_iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok((self.vars_from(&mut vars.iter().copied()), vars))
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

pub(crate) fn take_tensor(map: &BTreeMap<String, Tensor>, key: &str) -> Result<Tensor> {
    map.get(key)
        .cloned()
        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{key}`")))
}

/// Affine map `x · W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(input, output),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform(rng, input, output, 1.0 / (input as f64).sqrt()),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_size() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: vec![1, x.len()],
                right: self.weight.shape().to_vec(),
            });
        }
        let mut out = matmul_data(x, self.weight.data(), 1, x.len(), self.output_size());
        for (o, b) in out.iter_mut().zip(self.bias.data()) {
            *o += b;
        }
        Ok(out)
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        out.insert(format!("{prefix}.weight"), self.weight.clone());
        out.insert(format!("{prefix}.bias"), self.bias.clone());
    }

    pub fn import(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let weight = take_tensor(map, &format!("{prefix}.weight"))?;
        let bias = take_tensor(map, &format!("{prefix}.bias"))?;
        let (_, out) = weight
            .dims2()
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{prefix}.weight is not a matrix")))?;
        if bias.dims2() != Some((1, out)) {
            return Err(Error::CorruptCheckpoint(format!("{prefix}.bias has shape {:?}", bias.shape())));
        }
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    type Vars = LinearVars;

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> LinearVars {
        LinearVars {
            weight: it.next().expect("linear weight"),
            bias: it.next().expect("linear bias"),
        }
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul(x, self.weight)?;
        g.add_row(xw, self.bias)
    }
}

/// Two-layer perceptron `in → hidden (tanh) → out` returning raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub hidden: LinearVars,
    pub output: LinearVars,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::zeros(input, hidden),
            output: Linear::zeros(hidden, output),
        }
    }

    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::init(input, hidden, rng),
            output: Linear::init(hidden, output, rng),
        }
    }

    pub fn input_size(&self) -> usize {
        self.hidden.input_size()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h: Vec<f64> = self.hidden.forward(x)?.into_iter().map(f64::tanh).collect();
        self.output.forward(&h)
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        self.hidden.export(&format!("{prefix}.hidden"), out);
        self.output.export(&format!("{prefix}.output"), out);
    }

    pub fn import(prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        Ok(Self {
            hidden: Linear::import(&format!("{prefix}.hidden"), map)?,
            output: Linear::import(&format!("{prefix}.output"), map)?,
        })
    }
}

impl Module for Mlp {
    type Vars = MlpVars;

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.hidden.params();
        p.extend(self.output.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.hidden.params_mut();
        p.extend(self.output.params_mut());
        p
    }

    fn vars_from(&self, it: &mut dyn Iterator<Item = Var>) -> MlpVars {
        MlpVars {
            hidden: self.hidden.vars_from(it),
            output: self.output.vars_from(it),
        }
    }
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h)?;
        self.output.forward(g, h)
    }
}
