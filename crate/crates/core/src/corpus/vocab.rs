//! Wordpiece-format subword vocabulary and its pair-merge trainer.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::tokenize::pre_tokenize;
use super::CorpusError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Continuation-piece marker for non-word-initial subwords.
pub const CONTINUATION: &str = "##";

/// Ordered subword pieces with dense ids; ids 0-4 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocab from learned pieces (reserved tokens are prepended).
    pub fn from_pieces<I, S>(learned: I) -> Result<Vocab, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut pieces: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        pieces.extend(learned.into_iter().map(Into::into));
        let mut ids = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(CorpusError::VocabFile("empty piece".into()));
            }
            if ids.insert(p.clone(), i as u32).is_some() {
                return Err(CorpusError::VocabFile(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Vocab { pieces, ids })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.ids.contains_key(piece)
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(|s| s.as_str())
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Hex SHA-256 over all pieces, newline-joined. Identifies the vocab in
    /// checkpoint headers.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in &self.pieces {
            hasher.update(p.as_bytes());
            hasher.update(b"\n");
        }
        let mut out = String::new();
        for b in hasher.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }

    /// One piece per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut body = String::new();
        for p in &self.pieces {
            body.push_str(p);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, CorpusError> {
        let body = std::fs::read_to_string(path)?;
        let lines: Vec<&str> = body.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(CorpusError::VocabFile("fewer lines than reserved tokens".into()));
        }
        for (i, expected) in RESERVED.iter().enumerate() {
            if lines[i] != *expected {
                return Err(CorpusError::VocabFile(format!(
                    "line {i} must be {expected}, found {:?}",
                    lines[i]
                )));
            }
        }
        Vocab::from_pieces(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }
}

/// Trains a wordpiece-format vocabulary by iterative pair merging.
///
/// Words are lowercased and punctuation-split, seeded with every observed
/// single character (word-initial and `##`-continuation forms), then the most
/// frequent adjacent symbol pair is merged until `target_size` is reached or
/// no pair repeats. Guarantees `len() <= target_size` and that `[UNK]` is
/// only ever needed for characters unseen in training.
pub fn train_vocab<'a, I>(corpus: I, target_size: usize) -> Result<Vocab, CorpusError>
where
    I: IntoIterator<Item = &'a str>,
{
    // Word frequencies after the same pre-tokenization used at inference.
    let mut word_freq: HashMap<Vec<char>, u64> = HashMap::new();
    for text in corpus {
        for word in pre_tokenize(text) {
            *word_freq.entry(word.chars().collect()).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }

    // Symbol sequences: first char bare, the rest continuation-marked.
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .into_iter()
        .map(|(chars, freq)| {
            let symbols = chars
                .iter()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                .collect();
            (symbols, freq)
        })
        .collect();
    words.sort(); // deterministic merge accounting regardless of hash order

    let mut alphabet: Vec<String> = words
        .iter()
        .flat_map(|(symbols, _)| symbols.iter().cloned())
        .collect::<std::collections::BTreeSet<String>>()
        .into_iter()
        .collect();
    alphabet.sort();

    let needed = RESERVED.len() + alphabet.len().max(1);
    if target_size < needed {
        return Err(CorpusError::TargetTooSmall { target: target_size, needed });
    }

    let mut learned: Vec<String> = alphabet;
    let mut known: std::collections::BTreeSet<String> = learned.iter().cloned().collect();

    while RESERVED.len() + learned.len() < target_size {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += freq;
            }
        }
        // Highest count wins; ties break to the lexicographically smallest pair.
        let best = pair_counts
            .into_iter()
            .filter(|(_, c)| *c >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let ((left, right), _) = match best {
            Some(p) => p,
            None => break,
        };
        let merged = merge_symbols(&left, &right);
        if !known.insert(merged.clone()) {
            break;
        }
        learned.push(merged.clone());
        for (symbols, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
    }

    Vocab::from_pieces(learned)
}

fn merge_symbols(left: &str, right: &str) -> String {
    let right_core = right.strip_prefix(CONTINUATION).unwrap_or(right);
    format!("{left}{right_core}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::from_pieces(["a"]).unwrap();
        assert_eq!(v.id_of("[PAD]"), Some(PAD));
        assert_eq!(v.id_of("[UNK]"), Some(UNK));
        assert_eq!(v.id_of("[CLS]"), Some(CLS));
        assert_eq!(v.id_of("[SEP]"), Some(SEP));
        assert_eq!(v.id_of("[MASK]"), Some(MASK));
        assert_eq!(v.id_of("a"), Some(5));
    }

    #[test]
    fn merge_loop_on_tiny_corpus() {
        // "aa aa ab": chars a, ##a, ##b; the (a, ##a) pair dominates.
        let v = train_vocab(["aa aa ab"], 16).unwrap();
        assert!(v.contains("a"));
        assert!(v.contains("##a"));
        assert!(v.contains("##b"));
        assert!(v.contains("aa"), "most frequent pair must be merged: {:?}", v.pieces());
        assert!(v.len() <= 16);
    }

    #[test]
    fn target_size_must_fit_reserved_and_alphabet() {
        let err = train_vocab(["aa aa ab"], 5).unwrap_err();
        assert!(matches!(err, CorpusError::TargetTooSmall { .. }));
    }

    #[test]
    fn training_is_uncased() {
        let upper = train_vocab(["AA AA AB"], 16).unwrap();
        let lower = train_vocab(["aa aa ab"], 16).unwrap();
        assert_eq!(upper.pieces(), lower.pieces());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(train_vocab(["   "], 16), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn vocab_size_never_exceeds_target() {
        // alphabet {a, ##a, b, ##b} plus reserved = 9; room for one merge
        let v = train_vocab(["aaa bbb aaa bbb aaa"], 10).unwrap();
        assert!(v.len() <= 10, "{} pieces", v.len());
        let wide = train_vocab(["aaa bbb aaa bbb aaa"], 64).unwrap();
        assert!(wide.len() <= 64);
        assert!(wide.contains("aaa"), "{:?}", wide.pieces());
    }

    #[test]
    fn save_load_round_trip(){
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = train_vocab(["hello world hello"], 24).unwrap();
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(v, back);
        assert_eq!(v.fingerprint(), back.fingerprint());
    }

    #[test]
    fn load_rejects_wrong_reserved_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "[PAD]\n[UNK]\n[CLS]\n[WRONG]\n[MASK]\na\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }
}
