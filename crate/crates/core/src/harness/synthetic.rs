//! Synthetic message-reply corpus with latent topics: learnable matching
//! signal (topic words predict the reply family) over confusable filler.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpus::MRPair;

const SYLLABLES: [&str; 20] = [
    "ba", "den", "for", "gam", "hul", "jat", "kel", "mon", "nir", "pol", "ras", "sut", "tev",
    "vor", "wex", "zam", "lor", "mit", "qua", "bin",
];

/// Marker syllable reserved for the generic (out-of-domain) word universe.
const GENERIC_SYLLABLE: &str = "xu";

const FILLER: [&str; 18] = [
    "please", "can", "you", "the", "for", "about", "update", "on", "need", "send", "me", "a",
    "quick", "note", "this", "week", "today", "thanks",
];

const GREETINGS: [&str; 4] = ["hi", "hello", "hey", ""];
const CLOSERS: [&str; 3] = ["thanks", "asap", ""];

pub const REPLY_TEMPLATES_PER_TOPIC: usize = 6;
pub const MESSAGE_TEMPLATES_PER_TOPIC: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    /// Latent topic count K.
    pub topics: usize,
    /// Pairs to generate.
    pub pair_count: usize,
    /// Probability that a pair's reply is drawn from a different topic.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec { topics: 12, pair_count: 50_000, noise: 0.1, seed: 17 }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.topics < 2 {
            return Err(HarnessError::BadSpec("at least 2 topics required".into()));
        }
        if self.pair_count < self.topics {
            return Err(HarnessError::BadSpec("need at least one pair per topic".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(HarnessError::BadSpec(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

/// Which topic produced each side of a generated pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairTopics {
    pub message_topic: usize,
    pub reply_topic: usize,
}

struct TopicWords {
    /// w0 is shared with the next topic (confusable evidence); w1..w3 are
    /// unique to the topic.
    words: Vec<[String; 4]>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, generic: bool) -> String {
    let n = rng.gen_range(2..=3);
    let mut w = String::new();
    for i in 0..n {
        // the marker syllable never arises from the base inventory, keeping
        // the generic universe disjoint from domain words
        if generic && i == 1 {
            w.push_str(GENERIC_SYLLABLE);
        }
        w.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
    }
    w
}

fn topic_words(topics: usize, seed: u64, generic: bool) -> TopicWords {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746F_7069);
    let mut used = std::collections::HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng, generic);
        if used.insert(w.clone()) {
            return w;
        }
    };
    // w0 is shared between topic pairs (2k, 2k+1): ambiguous evidence that
    // forces the model to read the unique words w1..w3 as well
    let uniques: Vec<[String; 3]> =
        (0..topics).map(|_| [fresh(&mut rng), fresh(&mut rng), fresh(&mut rng)]).collect();
    let shared: Vec<String> = (0..topics.div_ceil(2)).map(|_| fresh(&mut rng)).collect();
    let words = (0..topics)
        .map(|k| {
            [
                shared[k / 2].clone(),
                uniques[k][0].clone(),
                uniques[k][1].clone(),
                uniques[k][2].clone(),
            ]
        })
        .collect();
    TopicWords { words }
}

fn message_text(rng: &mut ChaCha8Rng, w: &[String; 4], template: usize) -> String {
    let greeting = GREETINGS[rng.gen_range(0..GREETINGS.len())];
    let closer = CLOSERS[rng.gen_range(0..CLOSERS.len())];
    let filler = FILLER[rng.gen_range(0..FILLER.len())];
    let core = match template {
        0 => format!("please send the {} {} update", w[0], w[1]),
        1 => format!("can you check the {} {} for this week", w[1], w[2]),
        2 => format!("need a quick note about the {} {}", w[0], w[2]),
        3 => format!("{} {} status today", w[2], w[0]),
        _ => format!("question about the {} {} {filler}", w[1], w[3]),
    };
    [greeting, &core, closer].iter().filter(|s| !s.is_empty()).cloned().collect::<Vec<_>>().join(" ")
}

fn reply_text(w: &[String; 4], template: usize) -> String {
    match template {
        0 => format!("the {} {} is ready", w[0], w[1]),
        1 => format!("i will send the {} update today", w[1]),
        2 => format!("{} {} looks fine", w[1], w[2]),
        3 => format!("let me check the {} first", w[2]),
        4 => format!("the {} is done thanks", w[3]),
        _ => format!("will update the {} {} tomorrow", w[1], w[3]),
    }
}

/// Generates the corpus along with each pair's latent topics.
pub fn generate_corpus_with_topics(
    spec: &SyntheticCorpusSpec,
) -> Result<(Vec<MRPair>, Vec<PairTopics>), HarnessError> {
    spec.validate()?;
    let words = topic_words(spec.topics, spec.seed, false);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7061_6972);
    let mut pairs = Vec::with_capacity(spec.pair_count);
    let mut topics = Vec::with_capacity(spec.pair_count);
    for _ in 0..spec.pair_count {
        let message_topic = rng.gen_range(0..spec.topics);
        let reply_topic = if rng.gen::<f64>() < spec.noise {
            // draw a different topic uniformly
            let offset = rng.gen_range(1..spec.topics);
            (message_topic + offset) % spec.topics
        } else {
            message_topic
        };
        let msg_template = rng.gen_range(0..MESSAGE_TEMPLATES_PER_TOPIC);
        let rsp_template = rng.gen_range(0..REPLY_TEMPLATES_PER_TOPIC);
        let message = message_text(&mut rng, &words.words[message_topic], msg_template);
        let reply = reply_text(&words.words[reply_topic], rsp_template);
        pairs.push(MRPair::new(message, reply));
        topics.push(PairTopics { message_topic, reply_topic });
    }
    Ok((pairs, topics))
}

/// Deterministic synthetic corpus per the spec.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<MRPair>, HarnessError> {
    Ok(generate_corpus_with_topics(spec)?.0)
}

/// Unlabeled text for masked-LM pretraining. `domain` text shares the
/// corpus's topic-word universe (a fresh sample stream); generic text uses a
/// disjoint pseudo-word universe over the same filler and templates.
pub fn generate_pretraining_texts(
    spec: &SyntheticCorpusSpec,
    count: usize,
    domain: bool,
    stream_seed: u64,
) -> Result<Vec<String>, HarnessError> {
    spec.validate()?;
    let words = if domain {
        topic_words(spec.topics, spec.seed, false)
    } else {
        topic_words(spec.topics, spec.seed ^ 0x6765_6E65, true)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed ^ 0x7074_7874);
    let mut texts = Vec::with_capacity(count);
    for _ in 0..count {
        let topic = rng.gen_range(0..spec.topics);
        let w = &words.words[topic];
        if rng.gen::<bool>() {
            let template = rng.gen_range(0..MESSAGE_TEMPLATES_PER_TOPIC);
            texts.push(message_text(&mut rng, w, template));
        } else {
            let template = rng.gen_range(0..REPLY_TEMPLATES_PER_TOPIC);
            texts.push(reply_text(w, template));
        }
    }
    Ok(texts)
}

/// A shuffled slice of distinct reply strings, handy for blocklists.
pub fn distinct_replies(pairs: &[MRPair]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    for p in pairs {
        seen.insert(p.reply.clone());
    }
    seen.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_corpus_aligns_topics() {
        let spec = SyntheticCorpusSpec { topics: 4, pair_count: 400, noise: 0.0, seed: 5 };
        let (_, topics) = generate_corpus_with_topics(&spec).unwrap();
        assert_eq!(topics.len(), 400);
        assert!(topics.iter().all(|t| t.message_topic == t.reply_topic));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticCorpusSpec { topics: 6, pair_count: 500, noise: 0.2, seed: 9 };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&SyntheticCorpusSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_rate_concentrates() {
        let spec = SyntheticCorpusSpec { topics: 8, pair_count: 10_000, noise: 0.2, seed: 3 };
        let (_, topics) = generate_corpus_with_topics(&spec).unwrap();
        let mismatched =
            topics.iter().filter(|t| t.message_topic != t.reply_topic).count() as f64;
        let fraction = mismatched / topics.len() as f64;
        assert!((fraction - 0.2).abs() < 0.02, "mismatch fraction {fraction}");
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(SyntheticCorpusSpec { topics: 1, pair_count: 100, noise: 0.0, seed: 0 }
            .validate()
            .is_err());
        assert!(SyntheticCorpusSpec { topics: 4, pair_count: 2, noise: 0.0, seed: 0 }
            .validate()
            .is_err());
        assert!(SyntheticCorpusSpec { topics: 4, pair_count: 100, noise: 1.5, seed: 0 }
            .validate()
            .is_err());
    }

    #[test]
    fn replies_are_template_instances_with_bounded_variety() {
        let spec = SyntheticCorpusSpec { topics: 5, pair_count: 5_000, noise: 0.1, seed: 7 };
        let pairs = generate_corpus(&spec).unwrap();
        let distinct = distinct_replies(&pairs);
        assert_eq!(distinct.len(), 5 * REPLY_TEMPLATES_PER_TOPIC);
        for p in &pairs {
            assert!(!p.message.trim().is_empty());
            assert!(!p.reply.trim().is_empty());
        }
    }

    #[test]
    fn generic_words_are_disjoint_from_domain_words() {
        let spec = SyntheticCorpusSpec { topics: 6, pair_count: 100, noise: 0.0, seed: 21 };
        let domain = generate_pretraining_texts(&spec, 300, true, 1).unwrap();
        let generic = generate_pretraining_texts(&spec, 300, false, 1).unwrap();
        let filler: std::collections::HashSet<&str> = FILLER
            .iter()
            .copied()
            .chain(GREETINGS)
            .chain(CLOSERS)
            .chain([
                "i", "will", "is", "ready", "looks", "fine", "let", "check", "first", "done",
                "tomorrow", "question", "status",
            ])
            .collect();
        let content = |texts: &[String]| -> std::collections::HashSet<String> {
            texts
                .iter()
                .flat_map(|t| t.split_whitespace().map(|w| w.to_string()).collect::<Vec<_>>())
                .filter(|w| !filler.contains(w.as_str()))
                .collect()
        };
        let d = content(&domain);
        let g = content(&generic);
        assert!(!d.is_empty() && !g.is_empty());
        assert!(d.is_disjoint(&g), "overlap: {:?}", d.intersection(&g).collect::<Vec<_>>());
    }

    #[test]
    fn domain_pretraining_text_shares_the_corpus_vocabulary() {
        let spec = SyntheticCorpusSpec { topics: 6, pair_count: 500, noise: 0.0, seed: 21 };
        let pairs = generate_corpus(&spec).unwrap();
        let corpus_words: std::collections::HashSet<String> = pairs
            .iter()
            .flat_map(|p| {
                p.message
                    .split_whitespace()
                    .chain(p.reply.split_whitespace())
                    .map(String::from)
                    .collect::<Vec<_>>()
            })
            .collect();
        let domain = generate_pretraining_texts(&spec, 500, true, 99).unwrap();
        let domain_words: std::collections::HashSet<String> =
            domain.iter().flat_map(|t| t.split_whitespace().map(String::from)).collect();
        let novel: Vec<&String> = domain_words.difference(&corpus_words).collect();
        assert!(novel.is_empty(), "domain text invented words: {novel:?}");
    }
}
