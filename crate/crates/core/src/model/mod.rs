//! Decoder-only transformers and the two-branch cross-attention model.
//!
//! Weights follow the `[out, in]` convention: a projection is applied as
//! `x · Wᵀ`. There are no biases and layer norms carry no parameters, so a
//! [`ParameterSet`] holds only matrices.

mod check;
mod count;
mod cross;
mod transformer;

pub use check::{CheckedModel, GradCheckSetup};
pub use count::{cross_block_count, cross_param_count, dense_param_count};
pub(crate) use cross::mean_projection;
pub use cross::{JamCross, JamCrossConfig, BRANCH_IMG, BRANCH_LLM};
pub use transformer::Transformer;

use crate::data::TokenId;
use crate::tensor::{grad_check, GradCheckReport, Graph, NodeId, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Standard deviation of every freshly initialized weight.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: TokenId, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("parameter {name:?}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter sets differ at {0:?}")]
    Structure(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    #[default]
    Pre,
    Post,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub norm: NormPlacement,
    /// Always true; present so configs state it.
    #[serde(default = "yes")]
    pub no_bias: bool,
    /// Always false.
    #[serde(default)]
    pub affine_norm: bool,
}

impl TransformerConfig {
    /// The toy parent used throughout tests and experiments.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 64,
            vocab_size,
            max_seq_len: 64,
            norm: NormPlacement::Pre,
            no_bias: true,
            affine_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("n_layers, d_model and d_ff must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        if !self.no_bias {
            return bad("bias terms are not supported");
        }
        if self.affine_norm {
            return bad("affine layer norms are not supported");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Doubled width, FFN width and head count; per-head size unchanged.
    pub fn widened(&self) -> Self {
        Self {
            d_model: 2 * self.d_model,
            d_ff: 2 * self.d_ff,
            n_heads: 2 * self.n_heads,
            ..*self
        }
    }

    /// Every parameter name with its shape, in a fixed order. `prefix` is
    /// prepended to everything except the token embedding.
    pub(crate) fn param_shapes(&self, prefix: &str, with_tok_emb: bool) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = Vec::new();
        if with_tok_emb {
            out.push(("tok_emb".to_string(), vec![self.vocab_size, d]));
        }
        out.push((format!("{prefix}pos_emb"), vec![self.max_seq_len, d]));
        for l in 0..self.n_layers {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                out.push((format!("{prefix}layers.{l}.attn.{w}"), vec![d, d]));
            }
            out.push((format!("{prefix}layers.{l}.ffn.w1"), vec![f, d]));
            out.push((format!("{prefix}layers.{l}.ffn.w2"), vec![d, f]));
        }
        out
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(ModelError::TokenOutOfVocab {
                token: t,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

/// Named weight matrices, kept in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Errors with the first name at which the two sets differ in name or shape.
    pub fn check_same_structure(&self, other: &ParameterSet) -> Result<()> {
        let mut a = self.tensors.iter();
        let mut b = other.tensors.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((na, ta)), Some((nb, tb))) => {
                    if na != nb {
                        return Err(ModelError::Structure(na.min(nb).clone()));
                    }
                    if ta.shape() != tb.shape() {
                        return Err(ModelError::Structure(na.clone()));
                    }
                }
                (Some((n, _)), None) | (None, Some((n, _))) => return Err(ModelError::Structure(n.clone())),
            }
        }
    }

    /// Errors unless names and shapes are exactly `shapes`.
    pub(crate) fn check_shapes(&self, shapes: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in shapes {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if self.len() != shapes.len() {
            let extra = self
                .names()
                .find(|n| !shapes.iter().any(|(s, _)| s == n))
                .unwrap_or_default();
            return Err(ModelError::Structure(extra.to_string()));
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParameterSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Graph leaves for every parameter of a set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    nodes: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ParameterSet) -> Self {
        Self {
            nodes: params
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t.clone())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Anything that maps a token prefix to next-token logits.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// `[tokens.len(), V]`; row `t` scores the token after position `t`.
    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor>;
}

/// A language model whose forward pass can be recorded for training.
pub trait Trainable: LanguageModel {
    fn params(&self) -> &ParameterSet;
    fn params_mut(&mut self) -> &mut ParameterSet;
    /// Logits for each sequence of `batch`, stacked row-wise.
    fn build_logits(&self, g: &mut Graph, bound: &BoundParams, batch: &[&[TokenId]]) -> Result<NodeId>;
}

pub(crate) fn infer<M: Trainable + ?Sized>(model: &M, tokens: &[TokenId]) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, model.params());
    let out = model.build_logits(&mut g, &bound, &[tokens])?;
    Ok(g.value(out).clone())
}

fn as_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

/// Finite-difference check of the next-token loss on `tokens` with respect to
/// every parameter of `model`.
pub fn check_model_gradients<M: Trainable + ?Sized>(model: &M, tokens: &[TokenId], step: f64) -> Result<GradCheckReport> {
    if tokens.len() < 2 {
        return Err(ModelError::EmptySequence);
    }
    let inputs = &tokens[..tokens.len() - 1];
    infer(model, inputs)?;
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let values: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        |g, leaves| {
            let b = BoundParams {
                nodes: names.iter().cloned().zip(leaves.iter().copied()).collect(),
            };
            let logits = model.build_logits(g, &b, &[inputs]).map_err(as_tensor_error)?;
            g.cross_entropy(logits, &tokens[1..], None)
        },
        &values,
        step,
    )?;
    Ok(report)
}

/// Either model family behind one type.
#[derive(Clone, Debug, PartialEq)]
pub enum JamModel {
    Dense(Transformer),
    Cross(JamCross),
}

impl JamModel {
    pub fn param_count(&self) -> usize {
        self.params().num_scalars()
    }

    /// Same architecture, different weights.
    pub fn with_params(&self, params: ParameterSet) -> Result<JamModel> {
        Ok(match self {
            JamModel::Dense(m) => Transformer::from_params(*m.config(), params)?.into(),
            JamModel::Cross(m) => JamCross::from_params(*m.config(), params)?.into(),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            JamModel::Dense(_) => "dense",
            JamModel::Cross(_) => "cross",
        }
    }
}

impl LanguageModel for JamModel {
    fn vocab_size(&self) -> usize {
        match self {
            JamModel::Dense(m) => m.vocab_size(),
            JamModel::Cross(m) => m.vocab_size(),
        }
    }

    fn max_seq_len(&self) -> usize {
        match self {
            JamModel::Dense(m) => m.max_seq_len(),
            JamModel::Cross(m) => m.max_seq_len(),
        }
    }

    fn logits(&self, tokens: &[TokenId]) -> Result<Tensor> {
        infer(self, tokens)
    }
}

impl Trainable for JamModel {
    fn params(&self) -> &ParameterSet {
        match self {
            JamModel::Dense(m) => m.params(),
            JamModel::Cross(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParameterSet {
        match self {
            JamModel::Dense(m) => m.params_mut(),
            JamModel::Cross(m) => m.params_mut(),
        }
    }

    fn build_logits(&self, g: &mut Graph, bound: &BoundParams, batch: &[&[TokenId]]) -> Result<NodeId> {
        match self {
            JamModel::Dense(m) => m.build_logits(g, bound, batch),
            JamModel::Cross(m) => m.build_logits(g, bound, batch),
        }
    }
}

impl From<Transformer> for JamModel {
    fn from(m: Transformer) -> Self {
        JamModel::Dense(m)
    }
}

impl From<JamCross> for JamModel {
    fn from(m: JamCross) -> Self {
        JamModel::Cross(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = TransformerConfig::toy(20);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = TransformerConfig::toy(20);
        c.affine_norm = true;
        assert!(c.validate().is_err());
        let mut c = TransformerConfig::toy(20);
        c.max_seq_len = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn structure_mismatch_names_first_difference() {
        let mut a = ParameterSet::new();
        a.insert("x", Tensor::zeros(&[2, 2]));
        a.insert("y", Tensor::zeros(&[2, 2]));
        let mut b = a.clone();
        assert!(a.check_same_structure(&b).is_ok());
        b.insert("y", Tensor::zeros(&[2, 3]));
        assert_eq!(a.check_same_structure(&b), Err(ModelError::Structure("y".into())));
        b.insert("w", Tensor::zeros(&[1, 1]));
        assert_eq!(a.check_same_structure(&b), Err(ModelError::Structure("w".into())));
    }
}
