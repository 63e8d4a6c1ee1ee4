//! Online-path inference: blend matching scores with the LM bias, cluster
//! candidates lexically, and emit up to three diverse suggestions.

use std::collections::HashSet;

use thiserror::Error;

use crate::corpus::{pre_tokenize, tokenize, MRPair, Vocab};
use crate::eval::{w_rouge_instance, EvalInstance, WRougeWeights};
use crate::matching::MatchingModel;
use crate::response_set::{ResponseCache, ResponseSet, ResponseSetError};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum RankError {
    #[error(transparent)]
    Cache(#[from] ResponseSetError),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error("empty response set")]
    EmptySet,
    #[error("empty alpha grid")]
    EmptyGrid,
    #[error("clusters were computed for a different response set ({got} entries, set has {want})")]
    ClusterMismatch { got: usize, want: usize },
}

/// One scored candidate. `final_score = match_score + alpha * lm_score`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub index: usize,
    pub text: String,
    pub match_score: f64,
    pub lm_score: f64,
    pub final_score: f64,
    pub cluster_id: usize,
}

/// Up to three suggestions with pairwise-distinct cluster ids, ordered by
/// final score descending. `shortfall` marks sets with fewer clusters
/// than requested suggestions.
#[derive(Debug, Clone, PartialEq)]
pub struct SuggestionBlock {
    pub candidates: Vec<RankedCandidate>,
    pub shortfall: bool,
}

impl SuggestionBlock {
    pub fn texts(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.text.clone()).collect()
    }
}

/// Shipped default stopword list for lexical clustering (overridable).
pub fn default_stopwords() -> HashSet<String> {
    include_str!("../data/stopwords.txt")
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

fn content_words(text: &str, stopwords: &HashSet<String>) -> HashSet<String> {
    pre_tokenize(text)
        .into_iter()
        .filter(|t| t.chars().all(char::is_alphanumeric))
        .filter(|t| !stopwords.contains(t))
        .collect()
}

fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Leader clustering over content-word sets, scanned in entry order
/// (frequency-descending): an entry joins the first cluster whose leader is
/// at Jaccard similarity >= `tau`, else founds a new cluster.
pub fn cluster_responses(
    set: &ResponseSet,
    tau: f64,
    stopwords: &HashSet<String>,
) -> Vec<usize> {
    let mut leaders: Vec<HashSet<String>> = Vec::new();
    let mut ids = Vec::with_capacity(set.len());
    for entry in set.entries() {
        let words = content_words(&entry.text, stopwords);
        let joined = leaders.iter().position(|leader| jaccard(leader, &words) >= tau);
        match joined {
            Some(cluster) => ids.push(cluster),
            None => {
                leaders.push(words);
                ids.push(leaders.len() - 1);
            }
        }
    }
    ids
}

fn rank_with_vector(
    msg_vec: &[f64],
    set: &ResponseSet,
    cache_rows: &[Vec<f64>],
    clusters: &[usize],
    alpha: f64,
) -> Vec<RankedCandidate> {
    let mut out: Vec<RankedCandidate> = set
        .entries()
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let match_score: f64 =
                msg_vec.iter().zip(&cache_rows[index]).map(|(a, b)| a * b).sum();
            RankedCandidate {
                index,
                text: entry.text.clone(),
                match_score,
                lm_score: entry.lm_score,
                final_score: match_score + alpha * entry.lm_score,
                cluster_id: clusters[index],
            }
        })
        .collect();
    // descending by final score; ties break to the lower entry index
    out.sort_by(|a, b| {
        b.final_score
            .partial_cmp(&a.final_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.index.cmp(&b.index))
    });
    out
}

fn cache_rows_f64<E: Scalar>(cache: &ResponseCache<E>) -> Vec<Vec<f64>> {
    (0..cache.vectors.rows())
        .map(|r| cache.vectors.row(r).iter().map(|v| v.to_f64()).collect())
        .collect()
}

/// Scores every response for a message. The response encoder is never
/// invoked; match scores are dot products against the cache.
pub fn rank<E: Scalar>(
    model: &MatchingModel<E>,
    vocab: &Vocab,
    message: &str,
    set: &ResponseSet,
    cache: &ResponseCache<E>,
    clusters: &[usize],
    alpha: f64,
) -> Result<Vec<RankedCandidate>, RankError> {
    if set.is_empty() {
        return Err(RankError::EmptySet);
    }
    cache.validate(model, set)?;
    if clusters.len() != set.len() {
        return Err(RankError::ClusterMismatch { got: clusters.len(), want: set.len() });
    }
    let seq = tokenize(vocab, message, cache.max_len);
    let cls = model.encode_messages(&[seq])?;
    let msg_vec: Vec<f64> = cls.row(0).iter().map(|v| v.to_f64()).collect();
    Ok(rank_with_vector(&msg_vec, set, &cache_rows_f64(cache), clusters, alpha))
}

fn block_from_ranked(ranked: &[RankedCandidate]) -> SuggestionBlock {
    let mut used = HashSet::new();
    let mut candidates = Vec::new();
    for c in ranked {
        if used.insert(c.cluster_id) {
            candidates.push(c.clone());
            if candidates.len() == 3 {
                break;
            }
        }
    }
    let shortfall = candidates.len() < 3;
    SuggestionBlock { candidates, shortfall }
}

/// Walks the ranked list, greedily taking the best candidate from each
/// not-yet-used cluster until three are chosen or the list is exhausted.
pub fn suggest<E: Scalar>(
    model: &MatchingModel<E>,
    vocab: &Vocab,
    message: &str,
    set: &ResponseSet,
    cache: &ResponseCache<E>,
    clusters: &[usize],
    alpha: f64,
) -> Result<SuggestionBlock, RankError> {
    let ranked = rank(model, vocab, message, set, cache, clusters, alpha)?;
    Ok(block_from_ranked(&ranked))
}

/// Grid-searches the bias weight, maximizing mean w-Rouge of suggestion
/// blocks over a validation slice. Ties (and duplicated grid values)
/// resolve to the smallest alpha.
#[allow(clippy::too_many_arguments)]
pub fn tune_alpha<E: Scalar>(
    model: &MatchingModel<E>,
    vocab: &Vocab,
    validation: &[MRPair],
    set: &ResponseSet,
    cache: &ResponseCache<E>,
    clusters: &[usize],
    grid: &[f64],
    weights: &WRougeWeights,
) -> Result<f64, RankError> {
    if grid.is_empty() {
        return Err(RankError::EmptyGrid);
    }
    if set.is_empty() {
        return Err(RankError::EmptySet);
    }
    cache.validate(model, set)?;
    let mut alphas: Vec<f64> = grid.to_vec();
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    alphas.dedup();

    // encode each validation message once, reuse across the grid
    let rows = cache_rows_f64(cache);
    let msg_vecs: Vec<Vec<f64>> = validation
        .iter()
        .map(|pair| {
            let seq = tokenize(vocab, &pair.message, cache.max_len);
            let cls = model.encode_messages(&[seq])?;
            Ok::<_, RankError>(cls.row(0).iter().map(|v| v.to_f64()).collect())
        })
        .collect::<Result<_, _>>()?;

    let mut best = (f64::NEG_INFINITY, 0.0);
    for &alpha in &alphas {
        let mut total = 0.0;
        for (pair, msg_vec) in validation.iter().zip(&msg_vecs) {
            let ranked = rank_with_vector(msg_vec, set, &rows, clusters, alpha);
            let block = block_from_ranked(&ranked);
            let instance = EvalInstance::new(pair.reply.clone(), block.texts());
            total += w_rouge_instance(&instance, weights);
        }
        let mean = total / validation.len().max(1) as f64;
        if mean > best.0 {
            best = (mean, alpha);
        }
    }
    Ok(best.1)
}
