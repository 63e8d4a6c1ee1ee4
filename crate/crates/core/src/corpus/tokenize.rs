//! Greedy longest-match wordpiece tokenization.

use super::vocab::{Vocab, CLS, CONTINUATION, PAD, SEP, UNK};

/// Lowercases and splits text into words, breaking punctuation (any
/// non-alphanumeric character) into single-character words.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Fixed-length id sequence: `[CLS] pieces... [SEP]` plus tail padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Count of non-pad positions.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }
}

/// Pure function: lowercase, whitespace/punctuation split, greedy
/// longest-match subword segmentation, `[CLS]`/`[SEP]` framing, prefix
/// truncation, tail padding to exactly `max_len`.
///
/// Words with any unmatchable span map to a single `[UNK]`.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> TokenSequence {
    assert!(max_len >= 3, "max_len must leave room for [CLS], one piece, [SEP]");
    let mut pieces: Vec<u32> = Vec::new();
    for word in pre_tokenize(text) {
        segment_word(vocab, &word, &mut pieces);
        if pieces.len() >= max_len - 2 {
            break;
        }
    }
    pieces.truncate(max_len - 2);

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(&pieces);
    ids.push(SEP);
    let active = ids.len();
    ids.resize(max_len, PAD);
    let attention_mask = (0..max_len).map(|i| i < active).collect();
    TokenSequence { ids, attention_mask }
}

/// Number of subword pieces `text` segments into, without truncation or
/// special tokens.
pub fn piece_count(vocab: &Vocab, text: &str) -> usize {
    let mut pieces = Vec::new();
    for word in pre_tokenize(text) {
        segment_word(vocab, &word, &mut pieces);
    }
    pieces.len()
}

fn segment_word(vocab: &Vocab, word: &str, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    let mut found: Vec<u32> = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        let mut end = chars.len();
        while end > start {
            let mut candidate = String::new();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id_of(&candidate) {
                matched = Some((id, end));
                break;
            }
            end -= 1;
        }
        match matched {
            Some((id, consumed)) => {
                found.push(id);
                start = consumed;
            }
            None => {
                out.push(UNK);
                return;
            }
        }
    }
    out.extend_from_slice(&found);
}
