//! Training loop, schedule, validation and checkpoint selection.
//!
//! Alignment runs select the recorded checkpoint with the lowest average
//! validation perplexity. Instruct runs keep one record per epoch and leave
//! the choice to the caller.

pub mod ablation;
mod optim;
pub mod report;

pub use optim::{clip_global_norm, global_norm, Adam};

use crate::data::{cm3_transform, Cm3Params, CorpusKind, DataError, MixedSequence, SpanKind, TokenId, Vocabulary};
use crate::fusion::FusionError;
use crate::model::{BoundParams, LanguageModel, ModelError, ParameterSet, Trainable};
use crate::retrieval::{prepend_retrieved, query_dropout, MemoryBank, RetrievalConfig, RetrievalError};
use crate::tensor::{log_sum_exp, Graph, Tensor, TensorError};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}; lower the learning rate or check the data")]
    NonFinite { step: usize, what: String },
    #[error("no positions selected for evaluation")]
    EmptySelection,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Alignment,
    Instruct,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup, then flat.
    #[default]
    Constant,
    /// Linear warmup, then cosine decay to zero at `total_steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Sequences are drawn until the batch holds at least this many tokens.
    pub batch_tokens: usize,
    pub seed: u64,
    pub phase: Phase,
    pub mixture_weights: BTreeMap<CorpusKind, f64>,
    pub retrieval_enabled: bool,
    /// Validation and checkpoint cadence in steps.
    pub eval_interval: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub cm3: Cm3Params,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            warmup_steps: 50,
            total_steps: 2000,
            batch_tokens: 4096,
            seed: 0,
            phase: Phase::Alignment,
            mixture_weights: [(CorpusKind::TextOnly, 0.5), (CorpusKind::CaptionPairs, 0.5)].into(),
            retrieval_enabled: false,
            eval_interval: 250,
            schedule: Schedule::Constant,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            clip_norm: 1.0,
            weight_decay: 0.0,
            cm3: Cm3Params::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        if self.batch_tokens == 0 || self.eval_interval == 0 {
            return bad("batch_tokens and eval_interval must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam needs betas in [0, 1) and a positive eps");
        }
        if !(self.clip_norm >= 0.0 && self.weight_decay >= 0.0) {
            return bad("clip_norm and weight_decay must be non-negative");
        }
        if self.mixture_weights.is_empty() || self.mixture_weights.values().any(|w| !(*w >= 0.0)) {
            return bad("mixture weights must be non-negative and non-empty");
        }
        let total: f64 = self.mixture_weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TrainError::Config(format!("mixture weights sum to {total}, not 1")));
        }
        let uses = |k| self.mixture_weights.get(&k).is_some_and(|w| *w > 0.0);
        match self.phase {
            Phase::Alignment if uses(CorpusKind::InterleavedInstruct) => {
                return bad("alignment mixes text_only and caption_pairs only")
            }
            Phase::Instruct if !uses(CorpusKind::InterleavedInstruct) => {
                return bad("instruct phase needs interleaved_instruct data")
            }
            Phase::Instruct if uses(CorpusKind::TextOnly) => {
                return bad("instruct phase mixes interleaved_instruct with caption_pairs only")
            }
            _ => {}
        }
        self.cm3.validate(vocab)?;
        Ok(())
    }

    /// Steps needed to see `n_tokens` instruct tokens once at this batch
    /// size and mixture.
    pub fn steps_per_epoch(&self, n_tokens: usize) -> usize {
        let w = self
            .mixture_weights
            .get(&CorpusKind::InterleavedInstruct)
            .copied()
            .unwrap_or(1.0);
        let per_step = (self.batch_tokens as f64 * w).max(1.0);
        ((n_tokens as f64 / per_step).ceil() as usize).max(1)
    }
}

/// Learning rate for the update that completes `step` (clamped to `total_steps`).
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.lr * (step as f64 / cfg.warmup_steps as f64);
    }
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
            let t = (step - cfg.warmup_steps) as f64 / span;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanFilter {
    All,
    Text,
    Image,
}

impl SpanFilter {
    fn selects(self, kind: Option<SpanKind>) -> bool {
        match self {
            SpanFilter::All => true,
            SpanFilter::Text => kind == Some(SpanKind::Text),
            SpanFilter::Image => kind == Some(SpanKind::Image),
        }
    }

    /// Ids the softmax is normalized over: image ids for image spans,
    /// everything else for text spans, the full vocabulary otherwise.
    fn support(self, vocab: &Vocabulary) -> Vec<bool> {
        (0..vocab.size())
            .map(|t| match self {
                SpanFilter::All => true,
                SpanFilter::Text => !vocab.is_image(t),
                SpanFilter::Image => vocab.is_image(t),
            })
            .collect()
    }
}

/// Teacher-forced perplexity over positions of the selected span kind.
/// Retrieval prefixes are never scored.
pub fn evaluate_ppl<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    seqs: &[MixedSequence],
    filter: SpanFilter,
) -> Result<f64> {
    let support = filter.support(vocab);
    let mut nll = 0.0;
    let mut count = 0usize;
    let mut row_buf = Vec::with_capacity(vocab.size());
    for seq in seqs {
        let toks = seq.tokens();
        let kinds = seq.position_kinds();
        let first = seq.prefix_len().max(1);
        if toks.len() <= first || !(first..toks.len()).any(|p| filter.selects(kinds[p])) {
            continue;
        }
        let logits = model.logits(&toks[..toks.len() - 1])?;
        for p in first..toks.len() {
            if !filter.selects(kinds[p]) {
                continue;
            }
            let row = logits.row(p - 1);
            row_buf.clear();
            row_buf.extend(row.iter().zip(&support).filter(|(_, &s)| s).map(|(x, _)| *x));
            nll += log_sum_exp(&row_buf) - row[toks[p]];
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptySelection);
    }
    Ok((nll / count as f64).exp())
}

/// Per-modality validation perplexity; `None` when the split has no span of that kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub text_ppl: Option<f64>,
    pub image_ppl: Option<f64>,
}

impl ValMetrics {
    pub fn evaluate<M: LanguageModel + ?Sized>(model: &M, vocab: &Vocabulary, seqs: &[MixedSequence]) -> Result<Self> {
        let get = |f| match evaluate_ppl(model, vocab, seqs, f) {
            Ok(p) => Ok(Some(p)),
            Err(TrainError::EmptySelection) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            text_ppl: get(SpanFilter::Text)?,
            image_ppl: get(SpanFilter::Image)?,
        })
    }

    /// Mean of the available modalities.
    pub fn average(&self) -> Option<f64> {
        let v: Vec<f64> = [self.text_ppl, self.image_ppl].into_iter().flatten().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub params: ParameterSet,
    pub metrics: ValMetrics,
}

/// Index of the record with the lowest average validation PPL (earliest on ties).
pub fn select_checkpoint(records: &[CheckpointRecord]) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.metrics.average().map(|a| (i, a)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val: Option<ValMetrics>,
}

/// Sequences by corpus kind, with an optional retrieval bank.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: BTreeMap<CorpusKind, Vec<MixedSequence>>,
    pub val: Vec<MixedSequence>,
    pub bank: Option<MemoryBank>,
    pub retrieval: RetrievalConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<CheckpointRecord>,
    pub metrics: Vec<MetricsRow>,
    /// Alignment only: the record whose parameters the model now holds.
    pub selected: Option<usize>,
}

/// A training example: tokens with `<eos>` and the length of its unscored prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub prefix_len: usize,
}

impl Example {
    /// Next-token targets and weights for `tokens[..n-1]`; prefix targets weigh 0.
    pub fn targets(&self) -> (&[TokenId], &[TokenId], Vec<f64>) {
        let n = self.tokens.len();
        let weights = (1..n).map(|p| if p < self.prefix_len { 0.0 } else { 1.0 }).collect();
        (&self.tokens[..n - 1], &self.tokens[1..], weights)
    }
}

/// Builds one example: optional retrieval prefix, CM3 transform, `<eos>`.
pub fn make_example<R: Rng + ?Sized>(
    seq: &MixedSequence,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    retrieval: Option<(&MemoryBank, &RetrievalConfig)>,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<Example> {
    // Worst-case growth from the transform: one sentinel per span in place
    // and one before each re-emitted span, plus `<eos>`.
    let reserve = 2 * cfg.cm3.max_spans + 1;
    let seq = match retrieval {
        Some((bank, rcfg)) => {
            let query = query_dropout(seq.body(), vocab, rcfg.query_dropout, rng);
            let hits = match bank.encoder().embed_tokens(&query) {
                Ok(q) => bank.retrieve(&q, rcfg),
                Err(RetrievalError::EmptyDocument) => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            let budget = (max_seq_len + 1).saturating_sub(reserve).max(seq.len());
            prepend_retrieved(seq, bank, &hits, vocab, budget)?
        }
        None => seq.clone(),
    };
    let mut tokens = cm3_transform(&seq, &cfg.cm3, vocab, rng)?;
    if tokens.last() != Some(&vocab.eos()) {
        tokens.push(vocab.eos());
    }
    if tokens.len() > max_seq_len + 1 {
        return Err(TrainError::Config(format!(
            "example of {} tokens exceeds the context of {max_seq_len}",
            tokens.len()
        )));
    }
    Ok(Example {
        tokens,
        prefix_len: seq.prefix_len(),
    })
}

/// Tags non-finite values with the step they appeared at.
fn at_step(step: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) | TrainError::Tensor(TensorError::NonFinite { op }) => {
            TrainError::NonFinite { step, what: op.into() }
        }
        other => other,
    }
}

/// Loss and parameter gradients for one packed batch.
pub fn loss_and_grads<M: Trainable + ?Sized>(
    model: &M,
    batch: &[Example],
) -> Result<(f64, BTreeMap<String, Tensor>), ModelError> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, model.params());
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for ex in batch {
        let (i, t, w) = ex.targets();
        inputs.push(i);
        targets.extend_from_slice(t);
        weights.extend(w);
    }
    let logits = model.build_logits(&mut g, &bound, &inputs)?;
    let loss = g.cross_entropy(logits, &targets, Some(&weights))?;
    let grads = g.backward(loss)?;
    let out = bound.iter().map(|(n, id)| (n.to_string(), grads.wrt(id))).collect();
    Ok((g.value(loss).item(), out))
}

/// Runs `cfg.total_steps` optimizer steps on mixture-sampled batches.
pub fn train<M: Trainable + ?Sized>(
    model: &mut M,
    vocab: &Vocabulary,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(vocab)?;
    if model.vocab_size() != vocab.size() {
        return Err(TrainError::Config(format!(
            "model vocabulary {} does not match data vocabulary {}",
            model.vocab_size(),
            vocab.size()
        )));
    }
    let kinds: Vec<(CorpusKind, f64)> = cfg
        .mixture_weights
        .iter()
        .filter(|(_, w)| **w > 0.0)
        .map(|(k, w)| (*k, *w))
        .collect();
    for (k, _) in &kinds {
        if data.train.get(k).is_none_or(Vec::is_empty) {
            return Err(TrainError::Config(format!("no {} training data", k.name())));
        }
    }
    let retrieval = match (cfg.retrieval_enabled, &data.bank) {
        (false, _) => None,
        (true, Some(bank)) => {
            data.retrieval.validate()?;
            Some((bank, &data.retrieval))
        }
        (true, None) => return Err(TrainError::Config("retrieval enabled without a bank".into())),
    };
    let picker = WeightedIndex::new(kinds.iter().map(|(_, w)| *w))
        .map_err(|e| TrainError::Config(format!("mixture weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let max_len = model.max_seq_len();

    let mut records = Vec::new();
    let mut metrics = Vec::new();
    let mut record = |model: &M, step: usize, metrics: &mut Vec<MetricsRow>, loss: Option<f64>| -> Result<()> {
        let val = if data.val.is_empty() {
            ValMetrics::default()
        } else {
            ValMetrics::evaluate(model, vocab, &data.val)?
        };
        if [val.text_ppl, val.image_ppl].iter().flatten().any(|p| !p.is_finite()) {
            return Err(TrainError::NonFinite { step, what: "validation perplexity".into() });
        }
        records.push(CheckpointRecord {
            step,
            params: model.params().clone(),
            metrics: val,
        });
        metrics.push(MetricsRow { step, lr: lr_at(step, cfg), train_loss: loss, val: Some(val) });
        Ok(())
    };
    if cfg.phase == Phase::Alignment {
        record(model, 0, &mut metrics, None).map_err(at_step(0))?;
    }
    for step in 1..=cfg.total_steps {
        let mut batch = Vec::new();
        let mut n_tokens = 0;
        while n_tokens < cfg.batch_tokens {
            let (kind, _) = kinds[picker.sample(&mut rng)];
            let pool = &data.train[&kind];
            let seq = &pool[rng.random_range(0..pool.len())];
            let ex = make_example(seq, vocab, cfg, retrieval, max_len, &mut rng)?;
            n_tokens += ex.tokens.len() - 1;
            batch.push(ex);
        }
        let (loss, mut grads) = loss_and_grads(model, &batch).map_err(|e| at_step(step)(e.into()))?;
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { step, what: "gradient".into() });
        }
        let lr = lr_at(step, cfg);
        opt.step(model.params_mut(), &grads, lr);
        if step % cfg.eval_interval == 0 || step == cfg.total_steps {
            record(model, step, &mut metrics, Some(loss)).map_err(at_step(step))?;
        } else {
            metrics.push(MetricsRow { step, lr, train_loss: Some(loss), val: None });
        }
    }
    let selected = match cfg.phase {
        Phase::Alignment => {
            let i = select_checkpoint(&records);
            if let Some(i) = i {
                *model.params_mut() = records[i].params.clone();
            }
            i
        }
        Phase::Instruct => None,
    };
    Ok(TrainOutcome {
        records,
        metrics,
        selected,
    })
}
