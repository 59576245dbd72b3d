//! Memory bank of text/image documents with exact inner-product search.

use crate::data::{DataError, MixedSequence, TokenId, Vocabulary};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufRead, Write};
use thiserror::Error;

pub const DEFAULT_EMBED_DIM: usize = 32;
const SIDECAR_FORMAT: &str = "jam-bank-embeddings";
pub const SIDECAR_VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone)]
pub enum RetrievalError {
    #[error("document has neither text nor image tokens")]
    EmptyDocument,
    #[error("embedding degenerates to the zero vector")]
    Degenerate,
    #[error("duplicate doc_id {0}")]
    DuplicateId(u64),
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("sequence of length {len} does not fit max_seq_len {max}")]
    Overflow { len: usize, max: usize },
    #[error("embedding sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipDirection {
    /// Drop near-duplicates: candidates scoring at or above the threshold.
    #[default]
    SkipIfGeq,
    /// Drop candidates scoring at or below the threshold.
    SkipIfLeq,
}

impl SkipDirection {
    pub fn skips(self, score: f64, threshold: f64) -> bool {
        match self {
            SkipDirection::SkipIfGeq => score >= threshold,
            SkipDirection::SkipIfLeq => score <= threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub skip_threshold: f64,
    pub skip_direction: SkipDirection,
    pub query_dropout: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 2,
            skip_threshold: 0.9,
            skip_direction: SkipDirection::SkipIfGeq,
            query_dropout: 0.2,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.skip_threshold) {
            return Err(RetrievalError::Config("skip_threshold must be in [-1, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.query_dropout) {
            return Err(RetrievalError::Config("query_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Seeded random-projection encoder over token counts, one projection per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    vocab: Vocabulary,
    seed: u64,
    text_proj: Tensor,
    image_proj: Tensor,
}

fn normalize(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

impl ToyEncoder {
    pub fn new(vocab: Vocabulary, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            vocab,
            seed,
            text_proj: Tensor::randn(&[vocab.n_text, dim], 1.0, &mut rng),
            image_proj: Tensor::randn(&[vocab.n_image, dim], 1.0, &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.text_proj.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn project(&self, proj: &Tensor, codes: impl Iterator<Item = usize>) -> Result<Option<Vec<f64>>> {
        let mut v = vec![0.0; self.dim()];
        let mut any = false;
        for c in codes {
            any = true;
            for (x, p) in v.iter_mut().zip(proj.row(c)) {
                *x += p;
            }
        }
        if !any {
            return Ok(None);
        }
        normalize(v).map(Some).ok_or(RetrievalError::Degenerate)
    }

    /// Unit vector for a document; modalities present are embedded
    /// separately, averaged and renormalized. Special tokens are ignored.
    pub fn embed_document(&self, text: &[TokenId], image: &[TokenId]) -> Result<Vec<f64>> {
        let v = self.vocab;
        for &t in text.iter().chain(image) {
            if t >= v.size() {
                return Err(DataError::UnknownToken(t).into());
            }
        }
        let t = self.project(&self.text_proj, text.iter().copied().filter(|&t| v.is_text(t)))?;
        let i = self.project(
            &self.image_proj,
            image.iter().copied().filter(|&t| v.is_image(t)).map(|t| t - v.n_text),
        )?;
        match (t, i) {
            (None, None) => Err(RetrievalError::EmptyDocument),
            (Some(x), None) | (None, Some(x)) => Ok(x),
            (Some(a), Some(b)) => {
                normalize(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()).ok_or(RetrievalError::Degenerate)
            }
        }
    }

    /// Embedding of a raw token stream, splitting it by modality.
    pub fn embed_tokens(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let text: Vec<TokenId> = tokens.iter().copied().filter(|&t| self.vocab.is_text(t)).collect();
        let image: Vec<TokenId> = tokens.iter().copied().filter(|&t| self.vocab.is_image(t)).collect();
        self.embed_document(&text, &image)
    }
}

/// Inner product of two unit vectors.
pub fn score(q: &[f64], m: &[f64]) -> f64 {
    q.iter().zip(m).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: u64,
    pub text: Vec<TokenId>,
    pub image: Vec<TokenId>,
    pub embedding: Vec<f64>,
}

impl Document {
    /// `text <break> image <break>`; the image part is omitted when empty,
    /// leaving `text <break>`.
    pub fn prefix_tokens(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        let mut out = self.text.clone();
        if !self.image.is_empty() {
            out.push(vocab.break_id());
            out.extend_from_slice(&self.image);
        }
        out.push(vocab.break_id());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub doc_id: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    encoder: ToyEncoder,
    docs: Vec<Document>,
}

fn text_and_image(vocab: &Vocabulary, seq: &MixedSequence) -> (Vec<TokenId>, Vec<TokenId>) {
    let body = seq.body();
    (
        body.iter().copied().filter(|&t| vocab.is_text(t)).collect(),
        body.iter().copied().filter(|&t| vocab.is_image(t)).collect(),
    )
}

impl MemoryBank {
    pub fn new(encoder: ToyEncoder) -> Self {
        Self { encoder, docs: Vec::new() }
    }

    /// One document per sequence, `doc_id` = position in `seqs`.
    pub fn from_sequences(encoder: ToyEncoder, seqs: &[MixedSequence]) -> Result<Self> {
        let mut bank = Self::new(encoder);
        for (i, s) in seqs.iter().enumerate() {
            let (text, image) = text_and_image(&bank.encoder.vocab, s);
            bank.add(i as u64, text, image)?;
        }
        Ok(bank)
    }

    pub fn add(&mut self, doc_id: u64, text: Vec<TokenId>, image: Vec<TokenId>) -> Result<()> {
        if self.docs.iter().any(|d| d.doc_id == doc_id) {
            return Err(RetrievalError::DuplicateId(doc_id));
        }
        let embedding = self.encoder.embed_document(&text, &image)?;
        self.docs.push(Document {
            doc_id,
            text,
            image,
            embedding,
        });
        Ok(())
    }

    pub fn encoder(&self) -> &ToyEncoder {
        &self.encoder
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, doc_id: u64) -> Option<&Document> {
        self.docs.iter().find(|d| d.doc_id == doc_id)
    }

    /// Exact top-`k` by score after the skip rule; ties broken by ascending doc_id.
    pub fn retrieve(&self, query: &[f64], cfg: &RetrievalConfig) -> Vec<Hit> {
        if cfg.k == 0 {
            return Vec::new();
        }
        let mut hits: Vec<Hit> = self
            .docs
            .iter()
            .map(|d| Hit {
                doc_id: d.doc_id,
                score: score(query, &d.embedding),
            })
            .filter(|h| !cfg.skip_direction.skips(h.score, cfg.skip_threshold))
            .collect();
        hits.sort_by(rank);
        hits.truncate(cfg.k);
        hits
    }

    /// Writes one JSON line per document after a header line.
    pub fn write_sidecar<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| RetrievalError::Data(e.into());
        let header = SidecarHeader {
            format: SIDECAR_FORMAT.into(),
            version: SIDECAR_VERSION,
            encoder_seed: self.encoder.seed,
            dim: self.encoder.dim(),
            count: self.docs.len(),
        };
        w.write_all(json_line(&header).as_bytes()).map_err(io)?;
        for d in &self.docs {
            let rec = SidecarRecord {
                doc_id: d.doc_id,
                embedding: d.embedding.clone(),
            };
            w.write_all(json_line(&rec).as_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Rebuilds the bank from its dataset and checks the sidecar against the
    /// recomputed embeddings.
    pub fn load<R: BufRead>(vocab: &Vocabulary, seqs: &[MixedSequence], sidecar: R) -> Result<Self> {
        let bad = |m: String| RetrievalError::Sidecar(m);
        let mut lines = sidecar.lines();
        let first = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .map_err(|e| RetrievalError::Data(e.into()))?;
        let header: SidecarHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != SIDECAR_FORMAT || header.version != SIDECAR_VERSION {
            return Err(bad(format!("unsupported sidecar {} v{}", header.format, header.version)));
        }
        let bank = Self::from_sequences(ToyEncoder::new(*vocab, header.dim, header.encoder_seed), seqs)?;
        if header.count != bank.len() {
            return Err(bad(format!("{} embeddings for {} documents", header.count, bank.len())));
        }
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| RetrievalError::Data(e.into()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarRecord = serde_json::from_str(&line).map_err(|e| bad(format!("record {i}: {e}")))?;
            let doc = bank
                .get(rec.doc_id)
                .ok_or_else(|| bad(format!("unknown doc_id {}", rec.doc_id)))?;
            if !seen.insert(rec.doc_id) {
                return Err(RetrievalError::DuplicateId(rec.doc_id));
            }
            let norm = rec.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(bad(format!("doc {} embedding has norm {norm}", rec.doc_id)));
            }
            if rec.embedding != doc.embedding {
                return Err(bad(format!("doc {} embedding does not match its rebuild", rec.doc_id)));
            }
        }
        if seen.len() != bank.len() {
            return Err(bad("missing embeddings".into()));
        }
        Ok(bank)
    }
}

fn json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("plain data serializes");
    s.push('\n');
    s
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarHeader {
    format: String,
    version: u32,
    encoder_seed: u64,
    dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarRecord {
    doc_id: u64,
    embedding: Vec<f64>,
}

fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.doc_id.cmp(&b.doc_id))
}

/// Drops each non-special token independently with probability `p`.
/// Special tokens are always kept, so `<break>` markers survive; image
/// spans may come out shorter than an image, so the result is a bag of
/// tokens for the query encoder rather than a parseable sequence.
pub fn query_dropout<R: Rng + ?Sized>(tokens: &[TokenId], vocab: &Vocabulary, p: f64, rng: &mut R) -> Vec<TokenId> {
    assert!((0.0..1.0).contains(&p), "dropout must be in [0, 1)");
    tokens
        .iter()
        .copied()
        .filter(|&t| vocab.is_special(t) || p == 0.0 || !rng.random_bool(p))
        .collect()
}

/// Prefixes the hits' documents, best first, and marks them as conditioning.
/// If the result would exceed `max_len`, the lowest-scored documents are
/// dropped until it fits.
pub fn prepend_retrieved(
    seq: &MixedSequence,
    bank: &MemoryBank,
    hits: &[Hit],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<MixedSequence> {
    if seq.len() > max_len {
        return Err(RetrievalError::Overflow { len: seq.len(), max: max_len });
    }
    let mut ordered: Vec<Hit> = hits.to_vec();
    ordered.sort_by(rank);
    let mut docs: Vec<Vec<TokenId>> = ordered
        .iter()
        .filter_map(|h| bank.get(h.doc_id))
        .map(|d| d.prefix_tokens(vocab))
        .collect();
    while docs.iter().map(Vec::len).sum::<usize>() + seq.len() > max_len {
        docs.pop();
    }
    let mut tokens: Vec<TokenId> = docs.concat();
    let prefix_len = tokens.len() + seq.prefix_len();
    tokens.extend_from_slice(seq.tokens());
    Ok(MixedSequence::parse(vocab, tokens, prefix_len)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, CorpusKind, SynthWorld};

    fn encoder() -> ToyEncoder {
        ToyEncoder::new(Vocabulary::default(), DEFAULT_EMBED_DIM, 11)
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let e = encoder();
        let v = Vocabulary::default();
        let a = e.embed_document(&[3, 4, 5], &[v.image_token(1)]).unwrap();
        assert_eq!(a, e.embed_document(&[3, 4, 5], &[v.image_token(1)]).unwrap());
        assert!((score(&a, &a) - 1.0).abs() < 1e-9);
        let t = e.embed_document(&[3, 4, 5], &[]).unwrap();
        assert_eq!(t, e.embed_tokens(&[3, 4, 5]).unwrap());
        assert!(matches!(e.embed_document(&[], &[]), Err(RetrievalError::EmptyDocument)));
    }

    #[test]
    fn scores_of_identical_and_orthogonal_vectors() {
        assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn skip_rule_excludes_near_duplicates() {
        let mut bank = MemoryBank::new(encoder());
        bank.add(0, vec![3, 4, 5, 6], vec![]).unwrap();
        bank.add(1, vec![3, 4, 5, 7], vec![]).unwrap();
        bank.add(2, vec![20, 21], vec![]).unwrap();
        let q = bank.encoder().embed_document(&[3, 4, 5, 6], &[]).unwrap();
        let cfg = RetrievalConfig { k: 3, ..Default::default() };
        let hits = bank.retrieve(&q, &cfg);
        assert!(hits.iter().all(|h| h.doc_id != 0));
        assert!(hits.iter().all(|h| h.score < 0.9));
        assert!(bank.retrieve(&q, &RetrievalConfig { k: 0, ..cfg }).is_empty());
        let leq = RetrievalConfig {
            skip_direction: SkipDirection::SkipIfLeq,
            ..cfg
        };
        assert_eq!(bank.retrieve(&q, &leq)[0].doc_id, 0);
        assert!(matches!(bank.add(1, vec![3], vec![]), Err(RetrievalError::DuplicateId(1))));
    }

    #[test]
    fn prepend_one_doc_and_overflow() {
        let v = Vocabulary::default();
        let mut bank = MemoryBank::new(encoder());
        bank.add(7, vec![2, 3], vec![]).unwrap();
        bank.add(8, vec![4, 5, 6], vec![]).unwrap();
        let seq = MixedSequence::builder(&v).text(&[9, 10]).build().unwrap();
        let hit = |doc_id, score| Hit { doc_id, score };
        let one = prepend_retrieved(&seq, &bank, &[hit(7, 0.5)], &v, 64).unwrap();
        assert_eq!(one.tokens(), &[2, 3, v.break_id(), 9, 10]);
        assert_eq!(one.prefix_len(), 3);
        assert_eq!(prepend_retrieved(&seq, &bank, &[], &v, 64).unwrap(), seq);
        // Both docs need 3 + 4 prefix tokens; only the better one fits in 7.
        let cut = prepend_retrieved(&seq, &bank, &[hit(7, 0.2), hit(8, 0.6)], &v, 7).unwrap();
        assert_eq!(cut.tokens(), &[4, 5, 6, v.break_id(), 9, 10]);
        assert!(prepend_retrieved(&seq, &bank, &[], &v, 1).is_err());
    }

    #[test]
    fn dropout_edge_cases() {
        let v = Vocabulary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(query_dropout(&[], &v, 0.2, &mut rng).is_empty());
        let toks = vec![1, 2, v.break_id(), 3];
        assert_eq!(query_dropout(&toks, &v, 0.0, &mut rng), toks);
        let heavy = query_dropout(&toks, &v, 0.99, &mut rng);
        assert!(heavy.contains(&v.break_id()));
    }

    #[test]
    fn sidecar_round_trip() {
        let world = SynthWorld::new(Vocabulary::default(), 2, 0.1);
        let seqs = synth_corpus(&world, CorpusKind::CaptionPairs, 20, 5);
        let bank = MemoryBank::from_sequences(encoder(), &seqs).unwrap();
        let mut buf = Vec::new();
        bank.write_sidecar(&mut buf).unwrap();
        let back = MemoryBank::load(&world.vocab, &seqs, buf.as_slice()).unwrap();
        assert_eq!(back, bank);
        let tampered = String::from_utf8(buf).unwrap().replacen("\"doc_id\":3", "\"doc_id\":30", 1);
        assert!(MemoryBank::load(&world.vocab, &seqs, tampered.as_bytes()).is_err());
    }
}
