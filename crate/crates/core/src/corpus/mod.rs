//! Corpus ingestion, subword vocabulary, tokenization, and dataset splits.

pub mod tokenize;
pub mod vocab;

pub use tokenize::{pre_tokenize, tokenize, TokenSequence};
pub use vocab::{train_vocab, Vocab};

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab target size {target} cannot hold {needed} reserved and single-character pieces")]
    TargetTooSmall { target: usize, needed: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid vocab file: {0}")]
    VocabFile(String),
}

/// One message-reply training instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MRPair {
    pub message: String,
    pub reply: String,
}

impl MRPair {
    pub fn new(message: impl Into<String>, reply: impl Into<String>) -> Self {
        MRPair { message: message.into(), reply: reply.into() }
    }
}

/// Streaming reader over a line-delimited corpus file.
///
/// Records with an empty message or reply (after trimming) are skipped and
/// counted; malformed lines are hard errors naming the line number.
pub struct CorpusReader<R: BufRead> {
    lines: std::io::Lines<R>,
    line_no: usize,
    yielded: usize,
    skipped: usize,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        Ok(CorpusReader { lines: BufReader::new(file).lines(), line_no: 0, yielded: 0, skipped: 0 })
    }
}

impl<R: BufRead> CorpusReader<R> {
    pub fn from_reader(reader: R) -> Self {
        CorpusReader { lines: reader.lines(), line_no: 0, yielded: 0, skipped: 0 }
    }

    /// Records yielded so far.
    pub fn yielded(&self) -> usize {
        self.yielded
    }

    /// Records skipped so far because a field was empty.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<MRPair, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(CorpusError::Io(e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let pair: MRPair = match serde_json::from_str(&line) {
                Ok(p) => p,
                Err(e) => {
                    return Some(Err(CorpusError::MalformedLine {
                        line: self.line_no,
                        detail: e.to_string(),
                    }))
                }
            };
            if pair.message.trim().is_empty() || pair.reply.trim().is_empty() {
                self.skipped += 1;
                continue;
            }
            self.yielded += 1;
            return Some(Ok(pair));
        }
    }
}

/// Eagerly loads a corpus file, returning records in file order plus the
/// skipped-record count.
pub fn load_corpus(path: &Path) -> Result<(Vec<MRPair>, usize), CorpusError> {
    let mut reader = CorpusReader::open(path)?;
    let mut pairs = Vec::new();
    for item in &mut reader {
        pairs.push(item?);
    }
    Ok((pairs, reader.skipped))
}

pub fn save_corpus(path: &Path, pairs: &[MRPair]) -> Result<(), CorpusError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut out, p).map_err(|e| CorpusError::MalformedLine {
            line: 0,
            detail: e.to_string(),
        })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Disjoint train/validation/test split, deterministic under `seed`.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<MRPair>,
    pub validation: Vec<MRPair>,
    pub test: Vec<MRPair>,
    pub seed: u64,
    pub sample_fraction: f64,
}

/// Carves validation and test first so every sample fraction shares the same
/// eval sets, then takes a prefix of the shuffled remainder: fractions nest.
pub fn split_dataset(
    corpus: &[MRPair],
    val_count: usize,
    test_count: usize,
    sample_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    if val_count + test_count >= corpus.len() {
        return Err(CorpusError::InvalidSplit(format!(
            "val {val_count} + test {test_count} leaves no training data in {} pairs",
            corpus.len()
        )));
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(CorpusError::InvalidSplit(format!(
            "sample_fraction {sample_fraction} outside (0, 1]"
        )));
    }
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let validation = indices[..val_count].iter().map(|&i| corpus[i].clone()).collect();
    let test = indices[val_count..val_count + test_count].iter().map(|&i| corpus[i].clone()).collect();
    let rest = &indices[val_count + test_count..];
    let take = ((rest.len() as f64) * sample_fraction).round() as usize;
    let train = rest[..take].iter().map(|&i| corpus[i].clone()).collect();

    Ok(DatasetSplit { train, validation, test, seed, sample_fraction })
}
