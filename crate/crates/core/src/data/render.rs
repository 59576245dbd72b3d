//! Human-readable rendering of mixed sequences, and its inverse.
//!
//! ```text
//! text: kaba lobe
//! <break>
//! image 4x4:
//!   12 03 44 05
//!   ...
//! <break>
//! <eos>
//! ```

use super::{DataError, MixedSequence, SpanKind, SpecialToken, TokenClass, TokenId, Vocabulary};
use std::collections::HashMap;
use std::fmt::Write;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllable(i: usize) -> [char; 2] {
    let n = CONSONANTS.len() * VOWELS.len();
    let i = i % n;
    [
        CONSONANTS[i / VOWELS.len()] as char,
        VOWELS[i % VOWELS.len()] as char,
    ]
}

/// Pseudo-word for a text token id. Unique for ids below 4900.
pub fn word_for(id: TokenId) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut s = String::with_capacity(4);
    s.extend(syllable(id % n));
    s.extend(syllable(id / n));
    s
}

fn special_name(tok: SpecialToken) -> String {
    match tok {
        SpecialToken::Break => "<break>".into(),
        SpecialToken::Eos => "<eos>".into(),
        SpecialToken::Bos => "<bos>".into(),
        SpecialToken::QueryMask => "<query_mask>".into(),
        SpecialToken::Mask(i) => format!("<mask_{i}>"),
    }
}

fn grid_shape(len: usize) -> (usize, usize) {
    let side = (len as f64).sqrt().round() as usize;
    if side * side == len {
        (side, side)
    } else {
        (1, len)
    }
}

fn token_word(vocab: &Vocabulary, t: TokenId) -> String {
    match vocab.classify(t) {
        Some(TokenClass::Text) => word_for(t),
        Some(TokenClass::Image) => format!("#{}", t - vocab.n_text),
        Some(TokenClass::Special(s)) => special_name(s),
        None => format!("<unk:{t}>"),
    }
}

/// Line-oriented rendering; image spans become grids of code indices.
pub fn detokenize_report(seq: &MixedSequence, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    let tokens = seq.tokens();
    if seq.prefix_len() > 0 {
        let words: Vec<String> = tokens[..seq.prefix_len()].iter().map(|&t| token_word(vocab, t)).collect();
        let _ = writeln!(out, "prefix: {}", words.join(" "));
    }
    let width = (vocab.n_image.max(2) - 1).to_string().len();
    let (rows, cols) = grid_shape(vocab.image_len);
    let mut pos = seq.prefix_len();
    let mut spans = seq.spans().iter().peekable();
    while pos < tokens.len() {
        match spans.peek() {
            Some(span) if span.start == pos => {
                match span.kind {
                    SpanKind::Text => {
                        let words: Vec<String> = tokens[span.range()].iter().map(|&t| word_for(t)).collect();
                        let _ = writeln!(out, "text: {}", words.join(" "));
                    }
                    SpanKind::Image => {
                        let _ = writeln!(out, "image {rows}x{cols}:");
                        for r in 0..rows {
                            let codes: Vec<String> = tokens[span.start + r * cols..span.start + (r + 1) * cols]
                                .iter()
                                .map(|&t| format!("{:0width$}", t - vocab.n_text))
                                .collect();
                            let _ = writeln!(out, "  {}", codes.join(" "));
                        }
                    }
                }
                pos = span.end;
                spans.next();
            }
            _ => {
                let _ = writeln!(out, "{}", token_word(vocab, tokens[pos]));
                pos += 1;
            }
        }
    }
    out
}

struct Lexicon {
    words: HashMap<String, TokenId>,
}

impl Lexicon {
    fn new(vocab: &Vocabulary) -> Self {
        Self {
            words: vocab.text_range().map(|t| (word_for(t), t)).collect(),
        }
    }

    fn word(&self, vocab: &Vocabulary, w: &str, line: usize) -> Result<TokenId, DataError> {
        let err = |msg: String| DataError::Render { line, msg };
        if let Some(&t) = self.words.get(w) {
            return Ok(t);
        }
        if let Some(code) = w.strip_prefix('#') {
            let code: usize = code.parse().map_err(|_| err(format!("bad image code {w:?}")))?;
            if code >= vocab.n_image {
                return Err(err(format!("image code {code} out of range")));
            }
            return Ok(vocab.image_token(code));
        }
        match w {
            "<break>" => return Ok(vocab.break_id()),
            "<eos>" => return Ok(vocab.eos()),
            "<bos>" => return Ok(vocab.bos()),
            "<query_mask>" => return Ok(vocab.query_mask()),
            _ => {}
        }
        if let Some(i) = w.strip_prefix("<mask_").and_then(|r| r.strip_suffix('>')) {
            let i: usize = i.parse().map_err(|_| err(format!("bad sentinel {w:?}")))?;
            if i < vocab.n_sentinels {
                return Ok(vocab.mask(i));
            }
        }
        Err(err(format!("unknown word {w:?}")))
    }
}

/// Inverse of [`detokenize_report`].
pub fn tokenize_report(text: &str, vocab: &Vocabulary) -> Result<MixedSequence, DataError> {
    let lex = Lexicon::new(vocab);
    let mut tokens = Vec::new();
    let mut prefix_len = 0;
    let mut lines = text.lines().enumerate().peekable();
    while let Some((n, line)) = lines.next() {
        let line_no = n + 1;
        let err = |msg: String| DataError::Render { line: line_no, msg };
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("prefix:") {
            if !tokens.is_empty() {
                return Err(err("prefix must come first".into()));
            }
            for w in rest.split_whitespace() {
                tokens.push(lex.word(vocab, w, line_no)?);
            }
            prefix_len = tokens.len();
        } else if let Some(rest) = line.strip_prefix("text:") {
            for w in rest.split_whitespace() {
                let t = lex.word(vocab, w, line_no)?;
                if !vocab.is_text(t) {
                    return Err(err(format!("{w:?} is not a text word")));
                }
                tokens.push(t);
            }
        } else if let Some(dims) = line.strip_prefix("image ").and_then(|r| r.strip_suffix(':')) {
            let (r, c) = dims
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                .ok_or_else(|| err(format!("bad image header {line:?}")))?;
            if r * c != vocab.image_len {
                return Err(err(format!("image grid {r}x{c} does not hold {} tokens", vocab.image_len)));
            }
            for _ in 0..r {
                let (m, row) = lines.next().ok_or_else(|| err("image grid truncated".into()))?;
                let codes: Vec<&str> = row.split_whitespace().collect();
                if codes.len() != c {
                    return Err(DataError::Render {
                        line: m + 1,
                        msg: format!("expected {c} codes"),
                    });
                }
                for code in codes {
                    let code: usize = code.parse().map_err(|_| DataError::Render {
                        line: m + 1,
                        msg: format!("bad code {code:?}"),
                    })?;
                    if code >= vocab.n_image {
                        return Err(DataError::Render {
                            line: m + 1,
                            msg: format!("image code {code} out of range"),
                        });
                    }
                    tokens.push(vocab.image_token(code));
                }
            }
        } else {
            tokens.push(lex.word(vocab, line.trim(), line_no)?);
        }
    }
    MixedSequence::parse(vocab, tokens, prefix_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..4900 {
            assert!(seen.insert(word_for(id)), "duplicate word for {id}");
        }
    }

    #[test]
    fn golden_rendering() {
        let v = Vocabulary::default();
        let img: Vec<TokenId> = (0..16).map(|i| v.image_token((i * 5) % 64)).collect();
        let seq = MixedSequence::builder(&v)
            .text(&[0, 1, 31])
            .image(&img)
            .text(&[7])
            .eos()
            .build()
            .unwrap();
        let golden = "\
text: baba beba meba
<break>
image 4x4:
  00 05 10 15
  20 25 30 35
  40 45 50 55
  60 01 06 11
<break>
text: diba
<eos>
";
        assert_eq!(detokenize_report(&seq, &v), golden);
        assert_eq!(tokenize_report(golden, &v).unwrap(), seq);
    }

    #[test]
    fn prefix_round_trip() {
        let v = Vocabulary::default();
        let tokens = vec![2, v.break_id(), 3, 4];
        let seq = MixedSequence::parse(&v, tokens, 2).unwrap();
        let text = detokenize_report(&seq, &v);
        assert!(text.starts_with("prefix: "));
        assert_eq!(tokenize_report(&text, &v).unwrap(), seq);
    }

    #[test]
    fn malformed_renderings_are_rejected() {
        let v = Vocabulary::default();
        assert!(tokenize_report("text: zzzz", &v).is_err());
        assert!(tokenize_report("image 2x2:\n 1 2\n 3 4", &v).is_err());
        assert!(tokenize_report("<break>\nimage 4x4:\n 1 2 3 4\n", &v).is_err());
    }
}
