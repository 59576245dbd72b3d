//! Mixed-modal token sequences.
//!
//! Ids are laid out as `[text | image | specials]`. A valid sequence follows
//! `text* (<break> image{L} <break> text*)* <eos>?`, optionally preceded by a
//! retrieval prefix that is conditioning only.

mod cm3;
mod io;
mod render;
mod synth;

pub use cm3::{cm3_transform, infill_with_spans, Cm3Params};
pub use io::{read_dataset, write_dataset, DatasetHeader, GeneratorInfo, DATASET_FORMAT_VERSION};
pub use render::{detokenize_report, tokenize_report, word_for};
pub use synth::{plug_in_mutual_information, synth_corpus, CorpusKind, SynthWorld};

use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

pub type TokenId = usize;

/// Image tokens per image at full scale.
pub const REFERENCE_IMAGE_LEN: usize = 1024;
/// Image codebook size at full scale.
pub const REFERENCE_N_IMAGE: usize = 8192;

/// Number of non-sentinel special tokens: break, eos, bos, query_mask.
const FIXED_SPECIALS: usize = 4;

#[derive(Debug, Error, Clone)]
pub enum DataError {
    #[error("token {token} at position {pos}: {msg}")]
    Grammar {
        pos: usize,
        token: TokenId,
        msg: &'static str,
    },
    #[error("sequence ends inside an image span (got {got} of {expected} image tokens)")]
    TruncatedImage { got: usize, expected: usize },
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(TokenId),
    #[error("malformed rendering at line {line}: {msg}")]
    Render { line: usize, msg: String },
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::sync::Arc<std::io::Error>),
    #[error("invalid parameters: {0}")]
    Params(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(std::sync::Arc::new(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpecialToken {
    Break,
    Eos,
    Bos,
    QueryMask,
    Mask(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Text,
    Image,
    Special(SpecialToken),
}

/// Token-id layout plus the fixed image length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Vocabulary {
    pub n_text: usize,
    pub n_image: usize,
    /// Number of infilling sentinels `mask_0 .. mask_{K-1}`.
    pub n_sentinels: usize,
    pub image_len: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            n_text: 32,
            n_image: 64,
            n_sentinels: 3,
            image_len: 16,
        }
    }
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.n_text + self.n_image + FIXED_SPECIALS + self.n_sentinels
    }

    pub fn text_range(&self) -> Range<TokenId> {
        0..self.n_text
    }

    pub fn image_range(&self) -> Range<TokenId> {
        self.n_text..self.n_text + self.n_image
    }

    pub fn special_range(&self) -> Range<TokenId> {
        self.n_text + self.n_image..self.size()
    }

    pub fn break_id(&self) -> TokenId {
        self.n_text + self.n_image
    }

    pub fn eos(&self) -> TokenId {
        self.break_id() + 1
    }

    pub fn bos(&self) -> TokenId {
        self.break_id() + 2
    }

    pub fn query_mask(&self) -> TokenId {
        self.break_id() + 3
    }

    pub fn mask(&self, i: usize) -> TokenId {
        assert!(i < self.n_sentinels, "sentinel {i} out of range");
        self.break_id() + FIXED_SPECIALS + i
    }

    pub fn image_token(&self, code: usize) -> TokenId {
        debug_assert!(code < self.n_image);
        self.n_text + code
    }

    pub fn classify(&self, id: TokenId) -> Option<TokenClass> {
        let b = self.break_id();
        Some(match id {
            _ if id < self.n_text => TokenClass::Text,
            _ if id < b => TokenClass::Image,
            _ if id == b => TokenClass::Special(SpecialToken::Break),
            _ if id == b + 1 => TokenClass::Special(SpecialToken::Eos),
            _ if id == b + 2 => TokenClass::Special(SpecialToken::Bos),
            _ if id == b + 3 => TokenClass::Special(SpecialToken::QueryMask),
            _ if id < self.size() => TokenClass::Special(SpecialToken::Mask(id - b - FIXED_SPECIALS)),
            _ => return None,
        })
    }

    pub fn is_text(&self, id: TokenId) -> bool {
        id < self.n_text
    }

    pub fn is_image(&self, id: TokenId) -> bool {
        self.image_range().contains(&id)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special_range().contains(&id)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_text == 0 || self.n_image == 0 || self.image_len == 0 {
            return Err(DataError::Params(
                "n_text, n_image and image_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Text,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// A token stream with its modality spans. Constructed only through
/// [`MixedSequence::parse`] or [`SequenceBuilder`], so every value satisfies
/// the grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedSequence {
    tokens: Vec<TokenId>,
    spans: Vec<Span>,
    prefix_len: usize,
}

impl MixedSequence {
    /// Parses `tokens`, checking the grammar on everything after the first
    /// `prefix_len` tokens. Prefix tokens only need to be valid ids.
    pub fn parse(vocab: &Vocabulary, tokens: Vec<TokenId>, prefix_len: usize) -> Result<Self, DataError> {
        if prefix_len > tokens.len() {
            return Err(DataError::Params("prefix longer than sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.size()) {
            return Err(DataError::UnknownToken(bad));
        }
        let spans = scan_spans(vocab, &tokens, prefix_len)?;
        Ok(Self {
            tokens,
            spans,
            prefix_len,
        })
    }

    pub fn builder(vocab: &Vocabulary) -> SequenceBuilder<'_> {
        SequenceBuilder {
            vocab,
            tokens: Vec::new(),
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<TokenId> {
        self.tokens
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The sequence without its retrieval prefix.
    pub fn body(&self) -> &[TokenId] {
        &self.tokens[self.prefix_len..]
    }

    pub fn image_count(&self) -> usize {
        self.spans.iter().filter(|s| s.kind == SpanKind::Image).count()
    }

    pub fn ends_with_eos(&self, vocab: &Vocabulary) -> bool {
        self.tokens.last() == Some(&vocab.eos())
    }

    /// Modality of the span covering `pos`, if any.
    pub fn kind_at(&self, pos: usize) -> Option<SpanKind> {
        self.spans
            .iter()
            .find(|s| s.range().contains(&pos))
            .map(|s| s.kind)
    }

    /// Per-position span kind (`None` for specials and prefix tokens).
    pub fn position_kinds(&self) -> Vec<Option<SpanKind>> {
        let mut kinds = vec![None; self.tokens.len()];
        for s in &self.spans {
            for k in &mut kinds[s.range()] {
                *k = Some(s.kind);
            }
        }
        kinds
    }

    /// Whether the declared spans equal the ones the grammar produces.
    pub fn check_spans(&self, vocab: &Vocabulary, spans: &[Span]) -> Result<(), DataError> {
        let expected = scan_spans(vocab, &self.tokens, self.prefix_len)?;
        if expected != spans {
            return Err(DataError::Format("span annotations disagree with tokens".into()));
        }
        Ok(())
    }
}

/// Incremental construction of a valid sequence.
pub struct SequenceBuilder<'a> {
    vocab: &'a Vocabulary,
    tokens: Vec<TokenId>,
}

impl SequenceBuilder<'_> {
    pub fn text(mut self, words: &[TokenId]) -> Self {
        self.tokens.extend_from_slice(words);
        self
    }

    /// Appends `<break> image <break>`.
    pub fn image(mut self, codes: &[TokenId]) -> Self {
        self.tokens.push(self.vocab.break_id());
        self.tokens.extend_from_slice(codes);
        self.tokens.push(self.vocab.break_id());
        self
    }

    pub fn eos(mut self) -> Self {
        self.tokens.push(self.vocab.eos());
        self
    }

    pub fn build(self) -> Result<MixedSequence, DataError> {
        MixedSequence::parse(self.vocab, self.tokens, 0)
    }
}

fn scan_spans(vocab: &Vocabulary, tokens: &[TokenId], prefix_len: usize) -> Result<Vec<Span>, DataError> {
    #[derive(PartialEq)]
    enum State {
        Text,
        Image(usize),
        AwaitClose,
        Done,
    }
    let mut spans = Vec::new();
    let mut state = State::Text;
    let mut text_start: Option<usize> = None;
    let mut image_start = 0;
    let close_text = |spans: &mut Vec<Span>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            spans.push(Span {
                kind: SpanKind::Text,
                start: s,
                end,
            });
        }
    };
    for (pos, &t) in tokens.iter().enumerate().skip(prefix_len) {
        let class = vocab.classify(t).ok_or(DataError::UnknownToken(t))?;
        state = match state {
            State::Done => {
                return Err(DataError::Grammar {
                    pos,
                    token: t,
                    msg: "token after <eos>",
                })
            }
            State::Text => match class {
                TokenClass::Text => {
                    text_start.get_or_insert(pos);
                    State::Text
                }
                TokenClass::Special(SpecialToken::Break) => {
                    close_text(&mut spans, &mut text_start, pos);
                    image_start = pos + 1;
                    State::Image(0)
                }
                TokenClass::Special(SpecialToken::Eos) => {
                    close_text(&mut spans, &mut text_start, pos);
                    State::Done
                }
                _ => {
                    return Err(DataError::Grammar {
                        pos,
                        token: t,
                        msg: "expected text, <break> or <eos>",
                    })
                }
            },
            State::Image(n) => match class {
                TokenClass::Image => {
                    if n + 1 == vocab.image_len {
                        spans.push(Span {
                            kind: SpanKind::Image,
                            start: image_start,
                            end: pos + 1,
                        });
                        State::AwaitClose
                    } else {
                        State::Image(n + 1)
                    }
                }
                _ => {
                    return Err(DataError::Grammar {
                        pos,
                        token: t,
                        msg: "expected image token",
                    })
                }
            },
            State::AwaitClose => match class {
                TokenClass::Special(SpecialToken::Break) => State::Text,
                _ => {
                    return Err(DataError::Grammar {
                        pos,
                        token: t,
                        msg: "image span must be closed by <break>",
                    })
                }
            },
        };
    }
    match state {
        State::Image(n) => Err(DataError::TruncatedImage {
            got: n,
            expected: vocab.image_len,
        }),
        State::AwaitClose => Err(DataError::TruncatedImage {
            got: vocab.image_len,
            expected: vocab.image_len,
        }),
        State::Text => {
            close_text(&mut spans, &mut text_start, tokens.len());
            Ok(spans)
        }
        State::Done => Ok(spans),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary {
            n_text: 5,
            n_image: 4,
            n_sentinels: 2,
            image_len: 3,
        }
    }

    #[test]
    fn id_ranges_partition_the_vocabulary() {
        let v = vocab();
        let mut counts = [0usize; 3];
        for id in 0..v.size() {
            match v.classify(id).unwrap() {
                TokenClass::Text => counts[0] += 1,
                TokenClass::Image => counts[1] += 1,
                TokenClass::Special(_) => counts[2] += 1,
            }
            assert_eq!(
                [v.is_text(id), v.is_image(id), v.is_special(id)].iter().filter(|b| **b).count(),
                1
            );
        }
        assert_eq!(counts, [5, 4, 6]);
        assert_eq!(v.classify(v.size()), None);
        assert_eq!(v.classify(v.mask(1)), Some(TokenClass::Special(SpecialToken::Mask(1))));
    }

    #[test]
    fn builder_produces_expected_spans() {
        let v = vocab();
        let img = [v.image_token(0), v.image_token(3), v.image_token(1)];
        let s = MixedSequence::builder(&v)
            .text(&[1, 2])
            .image(&img)
            .text(&[4])
            .eos()
            .build()
            .unwrap();
        assert_eq!(
            s.spans(),
            &[
                Span { kind: SpanKind::Text, start: 0, end: 2 },
                Span { kind: SpanKind::Image, start: 3, end: 6 },
                Span { kind: SpanKind::Text, start: 7, end: 8 },
            ]
        );
        assert_eq!(s.kind_at(4), Some(SpanKind::Image));
        assert_eq!(s.kind_at(2), None);
    }

    #[test]
    fn grammar_violations() {
        let v = vocab();
        let b = v.break_id();
        let i0 = v.image_token(0);
        // short image
        assert!(matches!(
            MixedSequence::parse(&v, vec![b, i0, i0, b], 0),
            Err(DataError::Grammar { .. })
        ));
        // unterminated image
        assert!(matches!(
            MixedSequence::parse(&v, vec![1, b, i0], 0),
            Err(DataError::TruncatedImage { .. })
        ));
        // image token in text
        assert!(MixedSequence::parse(&v, vec![1, i0], 0).is_err());
        // sentinel in text
        assert!(MixedSequence::parse(&v, vec![1, v.mask(0)], 0).is_err());
        // tokens after eos
        assert!(MixedSequence::parse(&v, vec![v.eos(), 1], 0).is_err());
        // two back-to-back images are fine
        assert!(MixedSequence::parse(&v, vec![b, i0, i0, i0, b, b, i0, i0, i0, b], 0).is_ok());
        // prefix tokens are exempt from the grammar
        let s = MixedSequence::parse(&v, vec![1, b, 2, 3], 2).unwrap();
        assert_eq!(s.body(), &[2, 3]);
    }
}
