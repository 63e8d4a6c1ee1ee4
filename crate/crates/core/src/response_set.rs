//! The fixed candidate response set: frequency-thresholded, n-gram filtered
//! corpus replies with normalized log-frequency LM scores and a cached
//! response-encoder output matrix.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::tokenize::piece_count;
use crate::corpus::{pre_tokenize, tokenize, Vocab};
use crate::matching::MatchingModel;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ResponseSetError {
    #[error("min_freq must be >= 1")]
    BadMinFreq,
    #[error("no responses survive the frequency threshold and blocklist")]
    EmptySet,
    #[error("blocklist entry {0:?} is empty or longer than 3 tokens")]
    BadBlocklistEntry(String),
    #[error("response {text:?} needs {needed} positions, cache allows {allowed}")]
    EntryTooLong { text: String, needed: usize, allowed: usize },
    #[error("encoding cache was built from checkpoint {cache}, model is {model}")]
    StaleCache { cache: String, model: String },
    #[error("encoding cache was built for a different response set")]
    SetMismatch,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("file format: {0}")]
    Format(String),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
}

/// Lowercase n-grams (1 to 3 tokens) that disqualify a response.
#[derive(Debug, Clone, Default)]
pub struct Blocklist {
    ngrams: BTreeSet<Vec<String>>,
}

impl Blocklist {
    pub fn empty() -> Self {
        Blocklist::default()
    }

    pub fn new<I, S>(items: I) -> Result<Self, ResponseSetError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut ngrams = BTreeSet::new();
        for item in items {
            let raw = item.as_ref().trim();
            if raw.is_empty() {
                continue;
            }
            let tokens: Vec<String> = pre_tokenize(raw);
            if tokens.is_empty() || tokens.len() > 3 {
                return Err(ResponseSetError::BadBlocklistEntry(raw.to_string()));
            }
            ngrams.insert(tokens);
        }
        Ok(Blocklist { ngrams })
    }

    /// One n-gram per line.
    pub fn load(path: &Path) -> Result<Self, ResponseSetError> {
        let body = std::fs::read_to_string(path)?;
        Blocklist::new(body.lines())
    }

    pub fn len(&self) -> usize {
        self.ngrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ngrams.is_empty()
    }

    /// True if any blocked n-gram occurs as a contiguous token run.
    pub fn blocks(&self, tokens: &[String]) -> bool {
        self.ngrams.iter().any(|ng| tokens.windows(ng.len()).any(|w| w == ng.as_slice()))
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for ng in &self.ngrams {
            hasher.update(ng.join(" ").as_bytes());
            hasher.update(b"\n");
        }
        hex(hasher)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEntry {
    pub text: String,
    pub frequency: u64,
    pub lm_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_hash: String,
    pub min_freq: u64,
    pub blocklist_hash: String,
}

/// Curated reply candidates, unique by normalized text, frequency-descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub provenance: Provenance,
    entries: Vec<ResponseEntry>,
}

impl ResponseSet {
    pub fn entries(&self) -> &[ResponseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.provenance.corpus_hash.as_bytes());
        hasher.update(self.provenance.min_freq.to_le_bytes());
        hasher.update(self.provenance.blocklist_hash.as_bytes());
        for e in &self.entries {
            hasher.update(e.text.as_bytes());
            hasher.update(e.frequency.to_le_bytes());
            hasher.update(e.lm_score.to_le_bytes());
        }
        hex(hasher)
    }

    pub fn save(&self, path: &Path) -> Result<(), ResponseSetError> {
        let body = serde_json::to_string_pretty(self).map_err(|e| ResponseSetError::Format(e.to_string()))?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ResponseSetError> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(|e| ResponseSetError::Format(e.to_string()))
    }
}

fn hex(hasher: Sha256) -> String {
    let mut out = String::new();
    for b in hasher.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Counts normalized replies, drops those under `min_freq` or containing a
/// blocked n-gram, and scores survivors with `log(freq) / log(max_freq)`
/// (1.0 for the most frequent; 1.0 everywhere when all frequencies tie).
pub fn build_response_set<'a, I>(
    replies: I,
    min_freq: u64,
    blocklist: &Blocklist,
) -> Result<ResponseSet, ResponseSetError>
where
    I: IntoIterator<Item = &'a str>,
{
    if min_freq == 0 {
        return Err(ResponseSetError::BadMinFreq);
    }
    let mut corpus_hasher = Sha256::new();
    let mut counts: HashMap<String, u64> = HashMap::new();
    for reply in replies {
        let norm = normalize(reply);
        if norm.is_empty() {
            continue;
        }
        corpus_hasher.update(norm.as_bytes());
        corpus_hasher.update(b"\n");
        *counts.entry(norm).or_insert(0) += 1;
    }
    let mut survivors: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|(text, freq)| *freq >= min_freq && !blocklist.blocks(&pre_tokenize(text)))
        .collect();
    if survivors.is_empty() {
        return Err(ResponseSetError::EmptySet);
    }
    survivors.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let max_freq = survivors[0].1;
    let entries = survivors
        .into_iter()
        .map(|(text, frequency)| {
            let lm_score = if max_freq == 1 {
                1.0
            } else {
                (frequency as f64).ln() / (max_freq as f64).ln()
            };
            ResponseEntry { text, frequency, lm_score }
        })
        .collect();
    Ok(ResponseSet {
        provenance: Provenance {
            corpus_hash: hex(corpus_hasher),
            min_freq,
            blocklist_hash: blocklist.fingerprint(),
        },
        entries,
    })
}

/// Cached response-encoder CLS vectors, row i matching entry i, keyed to the
/// checkpoint and response set that produced them.
#[derive(Debug, Clone)]
pub struct ResponseCache<E: Scalar> {
    pub vectors: Tensor<E>,
    pub checkpoint_fingerprint: String,
    pub set_fingerprint: String,
    pub max_len: usize,
}

impl<E: Scalar> ResponseCache<E> {
    /// Fails if this cache was built from different weights or a different
    /// response set than the ones presented.
    pub fn validate(
        &self,
        model: &MatchingModel<E>,
        set: &ResponseSet,
    ) -> Result<(), ResponseSetError> {
        let model_fp = model.weights_fingerprint();
        if self.checkpoint_fingerprint != model_fp {
            return Err(ResponseSetError::StaleCache {
                cache: self.checkpoint_fingerprint.clone(),
                model: model_fp.to_string(),
            });
        }
        if self.set_fingerprint != set.fingerprint() {
            return Err(ResponseSetError::SetMismatch);
        }
        Ok(())
    }
}

/// Pre-computes the response-set encodings with the model's response
/// encoder. Entries that do not fit `max_len` positions are an error.
pub fn encode_response_set<E: Scalar>(
    model: &MatchingModel<E>,
    vocab: &Vocab,
    set: &ResponseSet,
    max_len: usize,
    batch_size: usize,
) -> Result<ResponseCache<E>, ResponseSetError> {
    if set.is_empty() {
        return Err(ResponseSetError::EmptySet);
    }
    let positions = model.rsp_weights().config().max_positions;
    let allowed = max_len.min(positions);
    for entry in set.entries() {
        let needed = piece_count(vocab, &entry.text) + 2;
        if needed > allowed {
            return Err(ResponseSetError::EntryTooLong {
                text: entry.text.clone(),
                needed,
                allowed,
            });
        }
    }
    let sequences: Vec<_> =
        set.entries().iter().map(|e| tokenize(vocab, &e.text, allowed)).collect();
    let hidden = model.rsp_weights().config().hidden;
    let mut vectors = Tensor::zeros(set.len(), hidden);
    for (chunk_idx, chunk) in sequences.chunks(batch_size.max(1)).enumerate() {
        let cls = model.encode_responses(chunk)?;
        let base = chunk_idx * batch_size.max(1);
        for row in 0..chunk.len() {
            for col in 0..hidden {
                vectors.set(base + row, col, cls.get(row, col));
            }
        }
    }
    Ok(ResponseCache {
        vectors,
        checkpoint_fingerprint: model.weights_fingerprint().to_string(),
        set_fingerprint: set.fingerprint(),
        max_len: allowed,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"RKRC";

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    checkpoint_fingerprint: String,
    set_fingerprint: String,
    rows: usize,
    cols: usize,
    max_len: usize,
}

/// Binary cache file: magic, header, then a 32-bit row-major matrix.
pub fn save_cache<E: Scalar>(cache: &ResponseCache<E>, path: &Path) -> Result<(), ResponseSetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    let header = CacheHeader {
        checkpoint_fingerprint: cache.checkpoint_fingerprint.clone(),
        set_fingerprint: cache.set_fingerprint.clone(),
        rows: cache.vectors.rows(),
        cols: cache.vectors.cols(),
        max_len: cache.max_len,
    };
    let header = serde_json::to_vec(&header).map_err(|e| ResponseSetError::Format(e.to_string()))?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&cache.vectors.cast::<f32>().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_cache<E: Scalar>(path: &Path) -> Result<ResponseCache<E>, ResponseSetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(ResponseSetError::Format("bad cache magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: CacheHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| ResponseSetError::Format(e.to_string()))?;
    let mut payload = vec![0u8; header.rows * header.cols * 4];
    r.read_exact(&mut payload)?;
    let matrix = Tensor::<f32>::from_le_bytes(header.rows, header.cols, &payload)
        .ok_or_else(|| ResponseSetError::Format("cache payload size".into()))?;
    Ok(ResponseCache {
        vectors: matrix.cast(),
        checkpoint_fingerprint: header.checkpoint_fingerprint,
        set_fingerprint: header.set_fingerprint,
        max_len: header.max_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::train_vocab;
    use crate::encoder::{build_encoder, EncoderConfig, FreezeSpec, Init};

    #[test]
    fn frequency_threshold_and_log_scores() {
        // {"ok" x8, "thanks!" x4, "sure" x1}, min_freq 2
        let mut replies = vec!["ok"; 8];
        replies.extend(vec!["thanks!"; 4]);
        replies.push("sure");
        let set = build_response_set(replies.iter().copied(), 2, &Blocklist::empty()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.entries()[0].text, "ok");
        assert_eq!(set.entries()[0].lm_score, 1.0);
        assert_eq!(set.entries()[1].text, "thanks!");
        let expected = 4f64.ln() / 8f64.ln(); // 0.6667
        assert!((set.entries()[1].lm_score - expected).abs() < 1e-12);
        assert!((expected - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn blocklist_excludes_regardless_of_frequency() {
        let mut replies = vec!["thanks!"; 10];
        replies.extend(vec!["ok"; 2]);
        let blocklist = Blocklist::new(["thanks"]).unwrap();
        let set = build_response_set(replies.iter().copied(), 2, &blocklist).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.entries()[0].text, "ok");
    }

    #[test]
    fn equal_frequencies_all_score_one() {
        let replies = ["yes", "no", "maybe"];
        let set = build_response_set(replies.iter().copied(), 1, &Blocklist::empty()).unwrap();
        assert!(set.entries().iter().all(|e| e.lm_score == 1.0));
    }

    #[test]
    fn normalization_dedups_and_collapses_whitespace() {
        let replies = ["Sounds  Good", "sounds good", "SOUNDS GOOD"];
        let set = build_response_set(replies.iter().copied(), 1, &Blocklist::empty()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.entries()[0].text, "sounds good");
        assert_eq!(set.entries()[0].frequency, 3);
    }

    #[test]
    fn zero_survivors_is_an_error() {
        let err = build_response_set(["rare"], 2, &Blocklist::empty()).unwrap_err();
        assert!(matches!(err, ResponseSetError::EmptySet));
    }

    #[test]
    fn lm_score_order_follows_frequency_order() {
        let mut replies = Vec::new();
        for (text, n) in [("a", 9), ("b", 7), ("c", 7), ("d", 2)] {
            replies.extend(std::iter::repeat(text).take(n));
        }
        let set = build_response_set(replies.iter().copied(), 1, &Blocklist::empty()).unwrap();
        for pair in set.entries().windows(2) {
            assert!(pair[0].frequency >= pair[1].frequency);
            assert!(pair[0].lm_score >= pair[1].lm_score);
        }
        assert_eq!(set.entries()[0].lm_score, 1.0);
    }

    #[test]
    fn set_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.json");
        let set = build_response_set(["ok", "ok", "fine"], 1, &Blocklist::empty()).unwrap();
        set.save(&path).unwrap();
        let back = ResponseSet::load(&path).unwrap();
        assert_eq!(set, back);
        assert_eq!(set.fingerprint(), back.fingerprint());
    }

    fn toy_model(seed: u64) -> (MatchingModel<f64>, Vocab) {
        let vocab = train_vocab(["ok thanks sounds good see you then"], 64).unwrap();
        let cfg = EncoderConfig::new(1, 8, 2, 16, vocab.len(), 24).unwrap();
        let msg = build_encoder(&cfg, Init::Random { seed }).unwrap();
        let rsp = build_encoder(&cfg, Init::Random { seed: seed + 1 }).unwrap();
        (MatchingModel::new(msg, rsp, FreezeSpec::none()).unwrap(), vocab)
    }

    #[test]
    fn encoding_cache_is_deterministic_and_provenance_bound() {
        let (model, vocab) = toy_model(4);
        let set = build_response_set(["ok", "ok", "thanks", "thanks", "sounds good"], 1, &Blocklist::empty())
            .unwrap();
        let a = encode_response_set(&model, &vocab, &set, 20, 2).unwrap();
        let b = encode_response_set(&model, &vocab, &set, 20, 2).unwrap();
        assert!(a.vectors.bit_eq(&b.vectors));
        a.validate(&model, &set).unwrap();

        // different weights -> stale
        let (other, _) = toy_model(40);
        assert!(matches!(
            a.validate(&other, &set),
            Err(ResponseSetError::StaleCache { .. })
        ));
    }

    #[test]
    fn oversized_entry_is_named() {
        let (model, vocab) = toy_model(4);
        let long = "ok thanks sounds good see you then ok thanks sounds good";
        let set = build_response_set([long], 1, &Blocklist::empty()).unwrap();
        match encode_response_set(&model, &vocab, &set, 8, 4) {
            Err(ResponseSetError::EntryTooLong { text, .. }) => assert_eq!(text, long),
            other => panic!("expected EntryTooLong, got {other:?}"),
        }
    }

    #[test]
    fn cache_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let (model, vocab) = toy_model(8);
        let set = build_response_set(["ok", "thanks"], 1, &Blocklist::empty()).unwrap();
        let cache = encode_response_set(&model, &vocab, &set, 20, 4).unwrap();
        save_cache(&cache, &path).unwrap();
        let back: ResponseCache<f64> = load_cache(&path).unwrap();
        assert_eq!(back.checkpoint_fingerprint, cache.checkpoint_fingerprint);
        assert_eq!(back.set_fingerprint, cache.set_fingerprint);
        assert_eq!(back.vectors.shape(), cache.vectors.shape());
    }
}
