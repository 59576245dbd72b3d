//! Line-delimited dataset files.
//!
//! Line 1 is a [`DatasetHeader`]; each following line is one record
//! `{"tokens": [...], "prefix_len": n, "spans": [...]}`.

use super::{DataError, MixedSequence, Span, TokenId, Vocabulary};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATASET_FORMAT: &str = "jam-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInfo {
    pub kind: String,
    pub seed: u64,
    pub world_seed: u64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub vocab: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
}

impl DatasetHeader {
    pub fn new(vocab: Vocabulary, generator: Option<GeneratorInfo>) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: DATASET_FORMAT_VERSION,
            vocab,
            generator,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<TokenId>,
    prefix_len: usize,
    spans: Vec<Span>,
}

pub fn write_dataset<W: Write>(mut w: W, header: &DatasetHeader, seqs: &[MixedSequence]) -> Result<(), DataError> {
    let to_err = |e: serde_json::Error| DataError::Format(e.to_string());
    serde_json::to_writer(&mut w, header).map_err(to_err)?;
    w.write_all(b"\n")?;
    for s in seqs {
        let rec = Record {
            tokens: s.tokens().to_vec(),
            prefix_len: s.prefix_len(),
            spans: s.spans().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(to_err)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<(DatasetHeader, Vec<MixedSequence>), DataError> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| DataError::Format("empty dataset file".into()))??;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| DataError::Format(format!("header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(DataError::Format(format!("not a dataset file: {:?}", header.format)));
    }
    if header.version != DATASET_FORMAT_VERSION {
        return Err(DataError::Format(format!(
            "unsupported dataset version {} (expected {DATASET_FORMAT_VERSION})",
            header.version
        )));
    }
    header.vocab.validate()?;
    let mut seqs = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| DataError::Format(format!("record {}: {e}", i + 1)))?;
        let seq = MixedSequence::parse(&header.vocab, rec.tokens, rec.prefix_len)?;
        seq.check_spans(&header.vocab, &rec.spans)?;
        seqs.push(seq);
    }
    Ok((header, seqs))
}
