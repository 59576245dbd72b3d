//! Seeded synthetic corpora standing in for text-only, caption and
//! interleaved instruction data.
//!
//! A [`SynthWorld`] fixes the "language": a sparse bigram grammar over text
//! words and two word-to-image tables, one for captions and one for
//! instruction answers. Corpus seeds only control sampling, so every corpus
//! drawn from one world shares the same structure.

use super::{MixedSequence, TokenId, Vocabulary};
use rand::seq::IndexedRandom;
#[cfg(test)]
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Marker opening an instruction prompt ("how to ...").
pub const PROMPT_MARKER: TokenId = 0;
/// Marker separating the prompt from the answer.
pub const ANSWER_MARKER: TokenId = 1;
const FIRST_WORD: TokenId = 2;
const SUCCESSOR_PROBS: [f64; 3] = [0.6, 0.25, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    TextOnly,
    CaptionPairs,
    InterleavedInstruct,
}

impl CorpusKind {
    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::TextOnly => "text_only",
            CorpusKind::CaptionPairs => "caption_pairs",
            CorpusKind::InterleavedInstruct => "interleaved_instruct",
        }
    }
}

impl std::str::FromStr for CorpusKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text_only" => Ok(CorpusKind::TextOnly),
            "caption_pairs" => Ok(CorpusKind::CaptionPairs),
            "interleaved_instruct" => Ok(CorpusKind::InterleavedInstruct),
            other => Err(format!("unknown corpus kind {other:?}")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub vocab: Vocabulary,
    pub world_seed: u64,
    /// Caption words per image; word `s` controls image positions
    /// `j` with `j * caption_len / image_len == s`.
    pub caption_len: usize,
    /// Probability that an image token is replaced by a uniform draw.
    pub image_noise: f64,
    successors: Vec<[TokenId; 3]>,
    caption_codes: Vec<Vec<usize>>,
    instruct_codes: Vec<Vec<usize>>,
}

impl SynthWorld {
    pub fn new(vocab: Vocabulary, world_seed: u64, image_noise: f64) -> Self {
        assert!(vocab.n_text > FIRST_WORD + 3, "need a few text words beyond the markers");
        let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
        let words: Vec<TokenId> = (FIRST_WORD..vocab.n_text).collect();
        let mut successors = vec![[FIRST_WORD; 3]; vocab.n_text];
        for w in FIRST_WORD..vocab.n_text {
            let picks: Vec<TokenId> = words.choose_multiple(&mut rng, 3).copied().collect();
            successors[w] = [picks[0], picks[1], picks[2]];
        }
        let table = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
            (0..vocab.n_text)
                .map(|_| (0..vocab.image_len).map(|_| rng.random_range(0..vocab.n_image)).collect())
                .collect()
        };
        let caption_codes = table(&mut rng);
        let instruct_codes = table(&mut rng);
        Self {
            vocab,
            world_seed,
            caption_len: 4,
            image_noise,
            successors,
            caption_codes,
            instruct_codes,
        }
    }

    fn start_word<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        rng.random_range(FIRST_WORD..self.vocab.n_text)
    }

    fn next_word<R: Rng + ?Sized>(&self, w: TokenId, rng: &mut R) -> TokenId {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in SUCCESSOR_PROBS.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.successors[w][i];
            }
        }
        self.successors[w][2]
    }

    /// A grammar walk of `len` words, continuing from `after` when given.
    pub fn sentence<R: Rng + ?Sized>(&self, len: usize, after: Option<TokenId>, rng: &mut R) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(len);
        let mut prev = after.filter(|&w| w >= FIRST_WORD);
        for _ in 0..len {
            let w = match prev {
                Some(p) => self.next_word(p, rng),
                None => self.start_word(rng),
            };
            out.push(w);
            prev = Some(w);
        }
        out
    }

    fn slot(&self, position: usize) -> usize {
        position * self.caption_len / self.vocab.image_len
    }

    fn render_image(&self, table: &[Vec<usize>], words: &[TokenId]) -> Vec<TokenId> {
        (0..self.vocab.image_len)
            .map(|j| self.vocab.image_token(table[words[self.slot(j)]][j]))
            .collect()
    }

    /// Noise-free image for a caption of exactly `caption_len` words.
    pub fn caption_image(&self, caption: &[TokenId]) -> Vec<TokenId> {
        assert_eq!(caption.len(), self.caption_len);
        self.render_image(&self.caption_codes, caption)
    }

    /// Noise-free image for the last `caption_len` words of an answer.
    pub fn instruct_image(&self, answer_tail: &[TokenId]) -> Vec<TokenId> {
        assert_eq!(answer_tail.len(), self.caption_len);
        self.render_image(&self.instruct_codes, answer_tail)
    }

    fn add_noise<R: Rng + ?Sized>(&self, image: &mut [TokenId], rng: &mut R) {
        for t in image.iter_mut() {
            if self.image_noise > 0.0 && rng.random_bool(self.image_noise) {
                *t = self.vocab.image_token(rng.random_range(0..self.vocab.n_image));
            }
        }
    }

    pub fn text_only<R: Rng + ?Sized>(&self, rng: &mut R) -> MixedSequence {
        let len = rng.random_range(12..=24);
        MixedSequence::builder(&self.vocab)
            .text(&self.sentence(len, None, rng))
            .build()
            .expect("grammar walk is valid text")
    }

    pub fn caption_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> MixedSequence {
        let caption = self.sentence(self.caption_len, None, rng);
        let mut image = self.caption_image(&caption);
        self.add_noise(&mut image, rng);
        MixedSequence::builder(&self.vocab)
            .text(&caption)
            .image(&image)
            .build()
            .expect("caption pair is valid")
    }

    pub fn instruct_example<R: Rng + ?Sized>(&self, rng: &mut R) -> MixedSequence {
        let title = self.sentence(3, None, rng);
        let answer_len = rng.random_range(self.caption_len..=self.caption_len + 2);
        let answer = self.sentence(answer_len, title.last().copied(), rng);
        let mut image = self.instruct_image(&answer[answer_len - self.caption_len..]);
        self.add_noise(&mut image, rng);
        let mut prompt = vec![PROMPT_MARKER];
        prompt.extend_from_slice(&title);
        prompt.push(ANSWER_MARKER);
        prompt.extend_from_slice(&answer);
        MixedSequence::builder(&self.vocab)
            .text(&prompt)
            .image(&image)
            .build()
            .expect("instruct example is valid")
    }
}

/// `size` sequences of the given kind, fully determined by `(world, seed)`.
pub fn synth_corpus(world: &SynthWorld, kind: CorpusKind, size: usize, seed: u64) -> Vec<MixedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de_0000_0000);
    (0..size)
        .map(|_| match kind {
            CorpusKind::TextOnly => world.text_only(&mut rng),
            CorpusKind::CaptionPairs => world.caption_pair(&mut rng),
            CorpusKind::InterleavedInstruct => world.instruct_example(&mut rng),
        })
        .collect()
}

/// Plug-in (maximum-likelihood) estimate of I(X; Y) in nats from paired
/// samples.
pub fn plug_in_mutual_information(pairs: &[(usize, usize)]) -> f64 {
    let n = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut px: HashMap<usize, f64> = HashMap::new();
    let mut py: HashMap<usize, f64> = HashMap::new();
    for &(x, y) in pairs {
        *joint.entry((x, y)).or_default() += 1.0;
        *px.entry(x).or_default() += 1.0;
        *py.entry(y).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c / n;
            pxy * (pxy / ((px[&x] / n) * (py[&y] / n))).ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpanKind;

    fn world(noise: f64) -> SynthWorld {
        SynthWorld::new(Vocabulary::default(), 17, noise)
    }

    #[test]
    fn corpora_are_deterministic_and_valid() {
        let w = world(0.1);
        for kind in [CorpusKind::TextOnly, CorpusKind::CaptionPairs, CorpusKind::InterleavedInstruct] {
            let a = synth_corpus(&w, kind, 40, 3);
            let b = synth_corpus(&w, kind, 40, 3);
            assert_eq!(a, b);
            assert_ne!(a, synth_corpus(&w, kind, 40, 4));
            for s in &a {
                MixedSequence::parse(&w.vocab, s.tokens().to_vec(), 0).unwrap();
            }
        }
    }

    #[test]
    fn noise_free_captions_determine_images() {
        let w = world(0.0);
        for s in synth_corpus(&w, CorpusKind::CaptionPairs, 100, 1) {
            let caption = &s.tokens()[..w.caption_len];
            let image = &s.tokens()[s.spans()[1].range()];
            assert_eq!(image, w.caption_image(caption).as_slice());
        }
    }

    #[test]
    fn caption_and_image_share_information() {
        let w = world(0.1);
        let corpus = synth_corpus(&w, CorpusKind::CaptionPairs, 2000, 9);
        let pairs: Vec<(usize, usize)> = corpus
            .iter()
            .map(|s| {
                let img = s.spans().iter().find(|sp| sp.kind == SpanKind::Image).unwrap();
                (s.tokens()[0], s.tokens()[img.start])
            })
            .collect();
        let mi = plug_in_mutual_information(&pairs);
        // Shuffled pairing estimates the plug-in bias floor.
        let mut ys: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        ys.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        let shuffled: Vec<(usize, usize)> = pairs.iter().zip(ys).map(|(p, y)| (p.0, y)).collect();
        assert!(mi > 0.0);
        assert!(mi > plug_in_mutual_information(&shuffled) + 1.0, "mi {mi}");
    }

    #[test]
    fn mutual_information_of_independent_constant_is_zero() {
        let pairs = vec![(1, 2); 10];
        assert_eq!(plug_in_mutual_information(&pairs), 0.0);
    }
}
