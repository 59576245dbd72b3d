//! Causally-masked infilling: spans are cut out, replaced by sentinels, and
//! re-emitted after the sequence so a left-to-right model learns to infill.

use super::{DataError, MixedSequence, TokenId, Vocabulary};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cm3Params {
    /// Probability that a sequence is turned into an infilling instance.
    pub transform_probability: f64,
    /// Upper bound on masked spans per sequence; the count is uniform in `1..=max_spans`.
    pub max_spans: usize,
    pub min_span_len: usize,
    pub max_span_len: usize,
}

impl Default for Cm3Params {
    fn default() -> Self {
        Self {
            transform_probability: 0.5,
            max_spans: 3,
            min_span_len: 1,
            max_span_len: 16,
        }
    }
}

impl Cm3Params {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.transform_probability) {
            return Err(DataError::Params("transform_probability must be in [0, 1]".into()));
        }
        if self.max_spans == 0 {
            return Err(DataError::Params("max_spans must be at least 1".into()));
        }
        if self.max_spans > vocab.n_sentinels {
            return Err(DataError::Params(format!(
                "max_spans {} exceeds the {} sentinel tokens",
                self.max_spans, vocab.n_sentinels
            )));
        }
        if self.min_span_len == 0 || self.min_span_len > self.max_span_len {
            return Err(DataError::Params("span length bounds must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

/// Either returns the tokens unchanged (probability `1 - p`) or masks up to
/// `max_spans` disjoint spans. Spans never contain a special token, so no
/// span crosses a `<break>`. Sequences with nothing maskable are returned
/// unchanged.
pub fn cm3_transform<R: Rng + ?Sized>(
    seq: &MixedSequence,
    params: &Cm3Params,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<TokenId>, DataError> {
    params.validate(vocab)?;
    let tokens = seq.tokens();
    if !rng.random_bool(params.transform_probability) {
        return Ok(tokens.to_vec());
    }
    let spans = sample_spans(tokens, seq.prefix_len(), params, vocab, rng);
    if spans.is_empty() {
        return Ok(tokens.to_vec());
    }
    Ok(infill_with_spans(tokens, &spans, vocab))
}

/// Runs of maskable (non-special) tokens at or after `from`.
fn maskable_runs(tokens: &[TokenId], from: usize, vocab: &Vocabulary) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &t) in tokens.iter().enumerate().skip(from) {
        match (vocab.is_special(t), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                runs.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(s..tokens.len());
    }
    runs
}

fn sample_spans<R: Rng + ?Sized>(
    tokens: &[TokenId],
    from: usize,
    params: &Cm3Params,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Vec<Range<usize>> {
    let runs = maskable_runs(tokens, from, vocab);
    let longest = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    if longest < params.min_span_len {
        return Vec::new();
    }
    let k = rng.random_range(1..=params.max_spans);
    let mut taken = vec![false; tokens.len()];
    let mut spans: Vec<Range<usize>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut len = rng.random_range(params.min_span_len..=params.max_span_len);
        let starts = loop {
            let starts: Vec<usize> = runs
                .iter()
                .filter(|r| r.len() >= len)
                .flat_map(|r| r.start..=r.end - len)
                .filter(|&s| !taken[s..s + len].iter().any(|&t| t))
                .collect();
            if !starts.is_empty() || len == params.min_span_len {
                break starts;
            }
            len -= 1;
        };
        if starts.is_empty() {
            break;
        }
        let s = starts[rng.random_range(0..starts.len())];
        taken[s..s + len].iter_mut().for_each(|t| *t = true);
        spans.push(s..s + len);
    }
    spans.sort_by_key(|r| r.start);
    spans
}

/// Deterministic infilling layout for the given disjoint, sorted spans:
/// span `i` becomes `mask_i` in place, and `mask_i` followed by the span's
/// tokens is appended after the sequence, which is then closed with `<eos>`.
pub fn infill_with_spans(tokens: &[TokenId], spans: &[Range<usize>], vocab: &Vocabulary) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len() + 2 * spans.len() + 1);
    let mut cursor = 0;
    for (i, span) in spans.iter().enumerate() {
        out.extend_from_slice(&tokens[cursor..span.start]);
        out.push(vocab.mask(i));
        cursor = span.end;
    }
    out.extend_from_slice(&tokens[cursor..]);
    for (i, span) in spans.iter().enumerate() {
        out.push(vocab.mask(i));
        out.extend_from_slice(&tokens[span.clone()]);
    }
    out.push(vocab.eos());
    out
}
