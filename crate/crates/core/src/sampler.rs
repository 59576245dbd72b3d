//! Mixed-modal decoding.
//!
//! Generation alternates between a text state, where image ids are masked
//! out, and an image state entered on `<break>`. In the image state each of
//! the `image_len` tokens is drawn from a guided mix of the conditional
//! stream and an unconditional stream whose context is
//! `<query_mask> <break> image-so-far`; a closing `<break>` is then forced.

use crate::data::{DataError, MixedSequence, TokenId, Vocabulary};
use crate::model::{LanguageModel, ModelError};
use crate::retrieval::{prepend_retrieved, Hit, MemoryBank, RetrievalConfig, RetrievalError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack on the cumulative mass when deciding where the nucleus ends.
pub const TOP_P_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("shape mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("prompt of length {len} leaves no room in a context of {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("model vocabulary {model} does not match data vocabulary {data}")]
    VocabMismatch { model: usize, data: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub cfg_alpha: f64,
    /// Generated tokens, including forced closing breaks.
    pub max_tokens: usize,
    pub max_images: usize,
    pub seed: u64,
    /// Also guide text tokens (experimental; off by default).
    pub cfg_on_text: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
            cfg_alpha: 3.5,
            max_tokens: 48,
            max_images: 1,
            seed: 0,
            cfg_on_text: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SamplerError::Config("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SamplerError::Config("top_p must be in (0, 1]".into()));
        }
        if !self.cfg_alpha.is_finite() {
            return Err(SamplerError::Config("cfg_alpha must be finite".into()));
        }
        if self.max_tokens == 0 {
            return Err(SamplerError::Config("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(SamplerError::Config("temperature must be positive".into()));
    }
    Ok(logits.iter().map(|x| x / temperature).collect())
}

/// Keeps the smallest set of most-probable tokens whose mass reaches
/// `top_p` (ties broken by lower id) and renormalizes.
pub fn top_p_filter(probs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return probs.to_vec();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= top_p - TOP_P_TOLERANCE {
            break;
        }
    }
    out.iter_mut().for_each(|p| *p /= mass);
    out
}

/// `(1 − α)·uncond + α·cond`, which equals `uncond + α(cond − uncond)` and
/// reproduces either stream exactly at α = 0 and α = 1.
pub fn cfg_mix(cond: &[f64], uncond: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(SamplerError::Shape(cond.len(), uncond.len()));
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| (1.0 - alpha) * u + alpha * c)
        .collect())
}

/// Softmax over the allowed entries at the given temperature, then top-p.
pub fn masked_distribution(logits: &[f64], allowed: &[bool], temperature: f64, top_p: f64) -> Result<Vec<f64>> {
    if logits.len() != allowed.len() {
        return Err(SamplerError::Shape(logits.len(), allowed.len()));
    }
    let scaled = apply_temperature(logits, temperature)?;
    let max = scaled
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(SamplerError::Config("no token is allowed".into()));
    }
    let mut probs: Vec<f64> = scaled
        .iter()
        .zip(allowed)
        .map(|(x, &a)| if a { (x - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(top_p_filter(&probs, top_p))
}

/// Inverse-CDF draw.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Retrieved prefix (if any), prompt and generated tokens.
    pub sequence: MixedSequence,
    pub retrieved: Vec<Hit>,
    /// Number of tokens produced by the sampler.
    pub generated: usize,
}

fn last_row<M: LanguageModel + ?Sized>(model: &M, tokens: &[TokenId]) -> Result<Vec<f64>> {
    let l = model.logits(tokens)?;
    Ok(l.row(l.rows() - 1).to_vec())
}

/// Interleaved generation from `prompt`. With a bank, the best documents
/// for the prompt are prefixed first.
pub fn generate_interleaved<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    prompt: &MixedSequence,
    cfg: &SamplerConfig,
    bank: Option<(&MemoryBank, &RetrievalConfig)>,
) -> Result<Generation> {
    cfg.validate()?;
    if model.vocab_size() != vocab.size() {
        return Err(SamplerError::VocabMismatch {
            model: model.vocab_size(),
            data: vocab.size(),
        });
    }
    let max_len = model.max_seq_len();
    let l = vocab.image_len;
    if prompt.is_empty() || prompt.len() >= max_len {
        return Err(SamplerError::PromptTooLong { len: prompt.len(), max: max_len });
    }
    let (start, retrieved) = match bank {
        Some((bank, rcfg)) => {
            rcfg.validate()?;
            let query = bank.encoder().embed_tokens(prompt.body())?;
            let hits = bank.retrieve(&query, rcfg);
            let reserve = cfg.max_tokens.min(l + 2);
            let seq = prepend_retrieved(prompt, bank, &hits, vocab, max_len.saturating_sub(reserve).max(prompt.len()))?;
            // Hits arrive best first and overflow trims from the tail.
            let mut room = seq.prefix_len() - prompt.prefix_len();
            let kept = hits.into_iter().take_while(|h| {
                let n = bank.get(h.doc_id).map_or(0, |d| d.prefix_tokens(vocab).len());
                let fits = n <= room;
                room = room.saturating_sub(n);
                fits && n > 0
            });
            (seq, kept.collect())
        }
        None => (prompt.clone(), Vec::new()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = start.tokens().to_vec();
    let prefix_len = start.prefix_len();
    let mut generated = 0;
    let mut images = 0;
    let room = |tokens: &Vec<TokenId>, generated: usize, need: usize| {
        generated + need <= cfg.max_tokens && tokens.len() + need <= max_len
    };
    let text_allowed: Vec<bool> = (0..vocab.size())
        .map(|t| vocab.is_text(t) || t == vocab.eos() || t == vocab.break_id())
        .collect();
    let image_allowed: Vec<bool> = (0..vocab.size()).map(|t| vocab.is_image(t)).collect();

    if start.ends_with_eos(vocab) {
        return finish(vocab, tokens, prefix_len, retrieved, generated);
    }
    loop {
        if !room(&tokens, generated, 1) {
            break;
        }
        // Text state.
        let mut allowed = text_allowed.clone();
        if cfg.max_images == 0 || images >= cfg.max_images || !room(&tokens, generated, l + 2) {
            allowed[vocab.break_id()] = false;
        }
        let mut logits = last_row(model, &tokens)?;
        if cfg.cfg_on_text {
            let uncond = last_row(model, &[vocab.query_mask()])?;
            logits = cfg_mix(&logits, &uncond, cfg.cfg_alpha)?;
        }
        let probs = masked_distribution(&logits, &allowed, cfg.temperature, cfg.top_p)?;
        let t = sample_index(&probs, &mut rng);
        tokens.push(t);
        generated += 1;
        if t == vocab.eos() {
            break;
        }
        if t != vocab.break_id() {
            continue;
        }
        // Image state.
        let mut uncond_ctx = vec![vocab.query_mask(), vocab.break_id()];
        for _ in 0..l {
            let cond = last_row(model, &tokens)?;
            let uncond = last_row(model, &uncond_ctx)?;
            let mixed = cfg_mix(&cond, &uncond, cfg.cfg_alpha)?;
            let probs = masked_distribution(&mixed, &image_allowed, cfg.temperature, cfg.top_p)?;
            let t = sample_index(&probs, &mut rng);
            tokens.push(t);
            uncond_ctx.push(t);
        }
        tokens.push(vocab.break_id());
        generated += l + 1;
        images += 1;
        if images >= cfg.max_images {
            break;
        }
    }
    finish(vocab, tokens, prefix_len, retrieved, generated)
}

fn finish(
    vocab: &Vocabulary,
    tokens: Vec<TokenId>,
    prefix_len: usize,
    retrieved: Vec<Hit>,
    generated: usize,
) -> Result<Generation> {
    Ok(Generation {
        sequence: MixedSequence::parse(vocab, tokens, prefix_len)?,
        retrieved,
        generated,
    })
}
