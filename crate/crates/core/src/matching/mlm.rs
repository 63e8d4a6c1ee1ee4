//! Toy masked-LM pretraining: the stand-in initialization source for
//! pretrained and domain-adapted encoders.
//!
//! 15% of maskable positions are selected; of those 80% become `[MASK]`,
//! 10% a random learned piece, 10% stay unchanged. The prediction head ties
//! to the token embedding table with a learned output bias.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::corpus::{tokenize, vocab, TokenSequence, Vocab};
use crate::encoder::{build_encoder, forward_hidden, EncoderConfig, EncoderVars, EncoderWeights, Init};
use crate::tensor::{adam_step, AdamState, FreezeMask, Graph, LrSchedule, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct MlmConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub schedule: LrSchedule,
    pub mask_prob: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            batch_size: 32,
            max_len: 16,
            schedule: LrSchedule { base: 5e-4, warmup_steps: 50, gamma: 0.999 },
            mask_prob: 0.15,
        }
    }
}

/// Tallies of masking decisions, for distribution checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskStats {
    pub candidates: u64,
    pub to_mask: u64,
    pub to_random: u64,
    pub kept: u64,
}

impl MaskStats {
    pub fn selected(&self) -> u64 {
        self.to_mask + self.to_random + self.kept
    }
}

/// Applies the masking policy to one sequence. Returns the corrupted ids and
/// `(position, original id)` prediction targets.
pub fn mask_tokens(
    rng: &mut ChaCha8Rng,
    seq: &TokenSequence,
    vocab_len: u32,
    mask_prob: f64,
    stats: &mut MaskStats,
) -> (Vec<u32>, Vec<(usize, u32)>) {
    let mut ids = seq.ids.clone();
    let mut targets = Vec::new();
    for (pos, &id) in seq.ids.iter().enumerate() {
        if !seq.attention_mask[pos] || id == vocab::CLS || id == vocab::SEP || id == vocab::PAD {
            continue;
        }
        stats.candidates += 1;
        if rng.gen::<f64>() >= mask_prob {
            continue;
        }
        targets.push((pos, id));
        let roll: f64 = rng.gen();
        if roll < 0.8 {
            ids[pos] = vocab::MASK;
            stats.to_mask += 1;
        } else if roll < 0.9 {
            ids[pos] = rng.gen_range(vocab::MASK + 1..vocab_len.max(vocab::MASK + 2));
            stats.to_random += 1;
        } else {
            stats.kept += 1;
        }
    }
    (ids, targets)
}

/// Trains masked-token prediction from a random init and returns the encoder
/// weights for use as a `FromWeights` source. `steps == 0` returns the
/// random init unchanged.
pub fn pretrain_mlm<E: Scalar>(
    config: &EncoderConfig,
    vocab: &Vocab,
    texts: &[String],
    steps: usize,
    seed: u64,
    mlm_cfg: &MlmConfig,
) -> Result<EncoderWeights<E>, TrainError> {
    let weights = build_encoder::<E>(config, Init::Random { seed })?;
    if steps == 0 {
        return Ok(weights);
    }
    let sequences: Vec<TokenSequence> = texts
        .iter()
        .filter(|t| !t.trim().is_empty())
        .map(|t| tokenize(vocab, t, mlm_cfg.max_len))
        .collect();
    if sequences.is_empty() {
        return Err(TrainError::EmptyData("pretraining corpus"));
    }

    let mut params: BTreeMap<String, Tensor<E>> =
        weights.tensors().iter().map(|(k, t)| (k.clone(), t.clone())).collect();
    params.insert("mlm.bias".to_string(), Tensor::zeros(1, config.vocab_size));

    let mut adam = AdamState::<E>::new(mlm_cfg.schedule.clone());
    let mask = FreezeMask::none();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6D6C_6D70);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut stats = MaskStats::default();

    let mut done = 0usize;
    let mut empty_draws = 0usize;
    while done < steps {
        let mut batch = Vec::with_capacity(mlm_cfg.batch_size);
        for _ in 0..mlm_cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&sequences[order[cursor]]);
            cursor += 1;
        }
        let t = batch[0].len();
        let mut corrupted = Vec::with_capacity(batch.len());
        let mut rows = Vec::new();
        let mut target_ids = Vec::new();
        for (i, seq) in batch.iter().enumerate() {
            let (ids, targets) =
                mask_tokens(&mut rng, seq, vocab.len() as u32, mlm_cfg.mask_prob, &mut stats);
            for (pos, original) in targets {
                rows.push((i * t + pos) as u32);
                target_ids.push(original);
            }
            corrupted.push(TokenSequence { ids, attention_mask: seq.attention_mask.clone() });
        }
        if rows.is_empty() {
            empty_draws += 1;
            if empty_draws > 1000 {
                return Err(TrainError::EmptyData("maskable positions"));
            }
            continue;
        }
        empty_draws = 0;

        let mut g = Graph::new();
        let mut vars = BTreeMap::new();
        for (key, tensor) in &params {
            vars.insert(key.clone(), g.leaf(tensor.clone(), true));
        }
        let enc_vars = EncoderVars::from_map(
            vars.iter()
                .filter(|(k, _)| k.as_str() != "mlm.bias")
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        );
        let hidden = forward_hidden(&mut g, &enc_vars, config, &corrupted)?;
        let picked = g.gather_rows(hidden, &rows)?;
        let logits = g.matmul_t(picked, false, vars["emb.tok"], true)?;
        let logits = g.add_row_broadcast(logits, vars["mlm.bias"])?;
        let loss = g.softmax_cross_entropy(logits, &target_ids)?;
        let mut grads = g.backward(loss)?;
        let mut grad_map = BTreeMap::new();
        for (key, var) in &vars {
            if let Some(grad) = grads.take(*var) {
                grad_map.insert(key.clone(), grad);
            }
        }
        adam_step(&mut adam, &mut params, &grad_map, &mask)?;
        done += 1;
    }

    params.remove("mlm.bias");
    Ok(EncoderWeights::from_tensors(config.clone(), params)?)
}

/// Mean masked-prediction loss on held-out text under a fixed masking seed.
/// The output bias is taken as zero, so comparisons across checkpoints of
/// the same architecture are apples-to-apples.
pub fn mlm_eval_loss<E: Scalar>(
    weights: &EncoderWeights<E>,
    vocab: &Vocab,
    texts: &[String],
    seed: u64,
    mlm_cfg: &MlmConfig,
) -> Result<f64, TrainError> {
    let config = weights.config().clone();
    let sequences: Vec<TokenSequence> = texts
        .iter()
        .filter(|t| !t.trim().is_empty())
        .map(|t| tokenize(vocab, t, mlm_cfg.max_len))
        .collect();
    if sequences.is_empty() {
        return Err(TrainError::EmptyData("evaluation corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = MaskStats::default();
    let mut total = 0.0;
    let mut rows_seen = 0usize;
    for chunk in sequences.chunks(mlm_cfg.batch_size) {
        let t = chunk[0].len();
        let mut corrupted = Vec::with_capacity(chunk.len());
        let mut rows = Vec::new();
        let mut target_ids = Vec::new();
        for (i, seq) in chunk.iter().enumerate() {
            let (ids, targets) =
                mask_tokens(&mut rng, seq, vocab.len() as u32, mlm_cfg.mask_prob, &mut stats);
            for (pos, original) in targets {
                rows.push((i * t + pos) as u32);
                target_ids.push(original);
            }
            corrupted.push(TokenSequence { ids, attention_mask: seq.attention_mask.clone() });
        }
        if rows.is_empty() {
            continue;
        }
        let mut g = Graph::no_grad();
        let enc_vars = EncoderVars::register(&mut g, weights, &|_| false);
        let tok = enc_vars.var("emb.tok");
        let hidden = forward_hidden(&mut g, &enc_vars, &config, &corrupted)?;
        let picked = g.gather_rows(hidden, &rows)?;
        let logits = g.matmul_t(picked, false, tok, true)?;
        let loss = g.softmax_cross_entropy(logits, &target_ids)?;
        total += g.value(loss).item().to_f64() * rows.len() as f64;
        rows_seen += rows.len();
    }
    if rows_seen == 0 {
        return Err(TrainError::EmptyData("maskable positions"));
    }
    Ok(total / rows_seen as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::train_vocab;

    fn fixture_texts() -> Vec<String> {
        let topics = [
            ("invoice", "billing", "payment"),
            ("deploy", "server", "release"),
            ("meeting", "schedule", "agenda"),
            ("holiday", "travel", "booking"),
        ];
        let mut texts = Vec::new();
        for i in 0..120 {
            let (a, b, c) = topics[i % topics.len()];
            texts.push(format!("please review the {a} for the {b} and confirm the {c}"));
            texts.push(format!("the {b} {c} looks fine thanks"));
        }
        texts
    }

    #[test]
    fn masking_split_matches_policy_over_many_positions() {
        let texts = fixture_texts();
        let vocab = train_vocab(texts.iter().map(|s| s.as_str()), 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut stats = MaskStats::default();
        let seqs: Vec<TokenSequence> =
            texts.iter().map(|t| tokenize(&vocab, t, 16)).collect();
        while stats.candidates < 1_000_000 {
            for seq in &seqs {
                let (_, _) = mask_tokens(&mut rng, seq, vocab.len() as u32, 0.15, &mut stats);
            }
        }
        let n = stats.candidates as f64;
        let selected = stats.selected() as f64 / n;
        let masked = stats.to_mask as f64 / n;
        let randomized = stats.to_random as f64 / n;
        let kept = stats.kept as f64 / n;
        assert!((selected - 0.15).abs() < 0.01, "selected {selected}");
        assert!((masked - 0.12).abs() < 0.01, "masked {masked}");
        assert!((randomized - 0.015).abs() < 0.01, "randomized {randomized}");
        assert!((kept - 0.015).abs() < 0.01, "kept {kept}");
    }

    #[test]
    fn masked_positions_swap_to_mask_token() {
        let texts = fixture_texts();
        let vocab = train_vocab(texts.iter().map(|s| s.as_str()), 200).unwrap();
        let seq = tokenize(&vocab, &texts[0], 16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut stats = MaskStats::default();
        for _ in 0..50 {
            let (ids, targets) = mask_tokens(&mut rng, &seq, vocab.len() as u32, 0.5, &mut stats);
            assert_eq!(ids.len(), seq.ids.len());
            for (pos, original) in &targets {
                assert_eq!(seq.ids[*pos], *original);
                assert_ne!(*original, vocab::CLS);
                assert_ne!(*original, vocab::SEP);
            }
            // unselected positions are untouched
            let changed: Vec<usize> =
                (0..ids.len()).filter(|&i| ids[i] != seq.ids[i]).collect();
            for pos in changed {
                assert!(targets.iter().any(|(p, _)| *p == pos));
            }
        }
    }

    #[test]
    fn zero_steps_returns_the_random_init() {
        let cfg = EncoderConfig::new(1, 8, 2, 16, 64, 16).unwrap();
        let vocab = train_vocab(["alpha beta"], 64).unwrap();
        let w = pretrain_mlm::<f64>(&cfg, &vocab, &["alpha beta".into()], 0, 3, &MlmConfig::default())
            .unwrap();
        let reference = build_encoder::<f64>(&cfg, Init::Random { seed: 3 }).unwrap();
        for (key, t) in w.tensors() {
            assert!(t.bit_eq(reference.get(key)), "{key}");
        }
    }

    #[test]
    fn training_reduces_held_out_masked_loss() {
        let texts = fixture_texts();
        let vocab = train_vocab(texts.iter().map(|s| s.as_str()), 120).unwrap();
        let cfg = EncoderConfig::new(1, 8, 2, 16, vocab.len(), 16).unwrap();
        let (train, held): (Vec<_>, Vec<_>) =
            texts.iter().enumerate().partition(|(i, _)| i % 5 != 0);
        let train: Vec<String> = train.into_iter().map(|(_, t)| t.clone()).collect();
        let held: Vec<String> = held.into_iter().map(|(_, t)| t.clone()).collect();
        let mlm_cfg = MlmConfig {
            batch_size: 16,
            max_len: 16,
            schedule: LrSchedule { base: 2e-3, warmup_steps: 5, gamma: 1.0 },
            mask_prob: 0.15,
        };
        let init = build_encoder::<f64>(&cfg, Init::Random { seed: 5 }).unwrap();
        let trained = pretrain_mlm::<f64>(&cfg, &vocab, &train, 60, 5, &mlm_cfg).unwrap();
        let before = mlm_eval_loss(&init, &vocab, &held, 99, &mlm_cfg).unwrap();
        let after = mlm_eval_loss(&trained, &vocab, &held, 99, &mlm_cfg).unwrap();
        assert!(after < before, "mlm loss went {before} -> {after}");
    }
}
