//! Bi-encoder matching model: symmetric in-batch-negative loss, the training
//! loop with best-checkpoint selection and wall-clock accounting, and
//! checkpoint persistence.

pub mod checkpoint;
pub mod mlm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use mlm::{mlm_eval_loss, pretrain_mlm, MaskStats, MlmConfig};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{tokenize, DatasetSplit, MRPair, Vocab};
use crate::encoder::{forward_cls, EncoderError, EncoderVars, EncoderWeights, FreezeSpec};
use crate::tensor::{
    adam_step, AdamState, FreezeMask, Graph, LrSchedule, Scalar, Tensor, TensorError, Var,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: validation loss is not finite")]
    Diverged { epoch: usize, report: TrainReport },
    #[error("empty {0} set")]
    EmptyData(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Two unshared encoders plus the freeze configuration in force.
#[derive(Debug)]
pub struct MatchingModel<E: Scalar> {
    msg: EncoderWeights<E>,
    rsp: EncoderWeights<E>,
    freeze: FreezeSpec,
    msg_encode_calls: AtomicU64,
    rsp_encode_calls: AtomicU64,
    fingerprint: OnceLock<String>,
}

impl<E: Scalar> Clone for MatchingModel<E> {
    fn clone(&self) -> Self {
        MatchingModel {
            msg: self.msg.clone(),
            rsp: self.rsp.clone(),
            freeze: self.freeze.clone(),
            msg_encode_calls: AtomicU64::new(0),
            rsp_encode_calls: AtomicU64::new(0),
            fingerprint: OnceLock::new(),
        }
    }
}

impl<E: Scalar> MatchingModel<E> {
    pub fn new(
        msg: EncoderWeights<E>,
        rsp: EncoderWeights<E>,
        freeze: FreezeSpec,
    ) -> Result<Self, EncoderError> {
        freeze.validate(msg.config(), rsp.config())?;
        Ok(MatchingModel {
            msg,
            rsp,
            freeze,
            msg_encode_calls: AtomicU64::new(0),
            rsp_encode_calls: AtomicU64::new(0),
            fingerprint: OnceLock::new(),
        })
    }

    pub fn msg_weights(&self) -> &EncoderWeights<E> {
        &self.msg
    }

    pub fn rsp_weights(&self) -> &EncoderWeights<E> {
        &self.rsp
    }

    pub fn freeze(&self) -> &FreezeSpec {
        &self.freeze
    }

    /// All weights as one `msg.`/`rsp.`-prefixed map.
    pub fn flat_params(&self) -> BTreeMap<String, Tensor<E>> {
        let mut out = BTreeMap::new();
        for (k, t) in self.msg.tensors() {
            out.insert(format!("msg.{k}"), t.clone());
        }
        for (k, t) in self.rsp.tensors() {
            out.insert(format!("rsp.{k}"), t.clone());
        }
        out
    }

    /// Rebuilds a model from a prefixed parameter map.
    pub fn from_flat_params(
        msg_cfg: &crate::encoder::EncoderConfig,
        rsp_cfg: &crate::encoder::EncoderConfig,
        freeze: FreezeSpec,
        params: &BTreeMap<String, Tensor<E>>,
    ) -> Result<Self, EncoderError> {
        let mut msg = BTreeMap::new();
        let mut rsp = BTreeMap::new();
        for (k, t) in params {
            if let Some(bare) = k.strip_prefix("msg.") {
                msg.insert(bare.to_string(), t.clone());
            } else if let Some(bare) = k.strip_prefix("rsp.") {
                rsp.insert(bare.to_string(), t.clone());
            } else {
                return Err(EncoderError::OrphanKey(k.clone()));
            }
        }
        let msg = EncoderWeights::from_tensors(msg_cfg.clone(), msg)?;
        let rsp = EncoderWeights::from_tensors(rsp_cfg.clone(), rsp)?;
        MatchingModel::new(msg, rsp, freeze)
    }

    /// Encodes messages with the message-side encoder (counted).
    pub fn encode_messages(
        &self,
        batch: &[crate::corpus::TokenSequence],
    ) -> Result<Tensor<E>, EncoderError> {
        self.msg_encode_calls.fetch_add(1, Ordering::Relaxed);
        crate::encoder::encode(&self.msg, batch)
    }

    /// Encodes candidate responses with the response-side encoder (counted).
    pub fn encode_responses(
        &self,
        batch: &[crate::corpus::TokenSequence],
    ) -> Result<Tensor<E>, EncoderError> {
        self.rsp_encode_calls.fetch_add(1, Ordering::Relaxed);
        crate::encoder::encode(&self.rsp, batch)
    }

    pub fn msg_encode_calls(&self) -> u64 {
        self.msg_encode_calls.load(Ordering::Relaxed)
    }

    pub fn rsp_encode_calls(&self) -> u64 {
        self.rsp_encode_calls.load(Ordering::Relaxed)
    }

    /// SHA-256 over all weights as 32-bit payloads, cached after first use.
    /// Identifies the checkpoint a response-encoding cache was built from.
    pub fn weights_fingerprint(&self) -> &str {
        self.fingerprint.get_or_init(|| {
            checkpoint::fingerprint_tensors(
                self.flat_params().iter().map(|(k, t)| (k.clone(), t.cast::<f32>())),
            )
        })
    }
}

/// Pre-tokenized message/reply sides of a pair list.
#[derive(Debug, Clone)]
pub struct TokenizedPairs {
    pub msgs: Vec<crate::corpus::TokenSequence>,
    pub rsps: Vec<crate::corpus::TokenSequence>,
}

impl TokenizedPairs {
    pub fn from_pairs(vocab: &Vocab, pairs: &[MRPair], max_len: usize) -> Self {
        TokenizedPairs {
            msgs: pairs.iter().map(|p| tokenize(vocab, &p.message, max_len)).collect(),
            rsps: pairs.iter().map(|p| tokenize(vocab, &p.reply, max_len)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.msgs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 20,
            batch_size: 32,
            accumulation_steps: 1,
            schedule: LrSchedule::default(),
            seed: 0,
            max_len: 32,
            temperature: 1.0,
        }
    }
}

/// Per-epoch and summary numbers for one training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub epoch_val_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub best_epoch: usize,
    pub wall_clock_to_best: f64,
    pub total_wall_clock: f64,
    pub total_params: u64,
    pub trainable_params: u64,
}

pub struct TrainOutcome<E: Scalar> {
    pub model: MatchingModel<E>,
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Symmetric in-batch-negative cross-entropy over raw dot products.
///
/// `S = M R^T`; the loss is the mean of row-wise and column-wise
/// cross-entropy against the diagonal, so every off-diagonal entry is a
/// negative for both directions.
pub fn symmetric_loss_graph<E: Scalar>(
    g: &mut Graph<E>,
    msg_vecs: Var,
    rsp_vecs: Var,
    temperature: f64,
) -> Result<Var, TensorError> {
    let (n, h) = g.value(msg_vecs).shape();
    let (nr, hr) = g.value(rsp_vecs).shape();
    if n != nr || h != hr {
        return Err(TensorError::ShapeMismatch {
            op: "symmetric_loss",
            detail: format!("{n}x{h} against {nr}x{hr}"),
        });
    }
    if n == 0 {
        return Err(TensorError::Invalid { op: "symmetric_loss", detail: "empty batch".into() });
    }
    let mut scores = g.matmul_t(msg_vecs, false, rsp_vecs, true)?;
    if temperature != 1.0 {
        scores = g.scale(scores, E::from_f64(1.0 / temperature))?;
    }
    let scores_t = g.transpose(scores)?;
    let ls_rows = g.log_softmax(scores)?;
    let ls_cols = g.log_softmax(scores_t)?;
    let mut eye = Tensor::<E>::zeros(n, n);
    for i in 0..n {
        eye.set(i, i, E::ONE);
    }
    let eye = g.constant(eye);
    let diag_rows = g.mul(eye, ls_rows)?;
    let diag_rows = g.reduce_sum(diag_rows)?;
    let diag_cols = g.mul(eye, ls_cols)?;
    let diag_cols = g.reduce_sum(diag_cols)?;
    let total = g.add(diag_rows, diag_cols)?;
    g.scale(total, E::from_f64(-0.5 / n as f64))
}

/// Loss value for plain CLS matrices (aligned rows are positives).
pub fn symmetric_loss<E: Scalar>(
    msg_vecs: &Tensor<E>,
    rsp_vecs: &Tensor<E>,
) -> Result<f64, TensorError> {
    if !msg_vecs.all_finite() || !rsp_vecs.all_finite() {
        return Err(TensorError::NonFinite { op: "symmetric_loss" });
    }
    let mut g = Graph::no_grad();
    let m = g.constant(msg_vecs.clone());
    let r = g.constant(rsp_vecs.clone());
    let loss = symmetric_loss_graph(&mut g, m, r, 1.0)?;
    Ok(g.value(loss).item().to_f64())
}

fn register_side<E: Scalar>(
    g: &mut Graph<E>,
    params: &BTreeMap<String, Tensor<E>>,
    prefix: &str,
    mask: &FreezeMask,
) -> EncoderVars {
    let mut vars = BTreeMap::new();
    let dot = format!("{prefix}.");
    for (key, tensor) in params.range(dot.clone()..format!("{prefix}/")) {
        if let Some(bare) = key.strip_prefix(&dot) {
            let trainable = !mask.is_frozen(key);
            vars.insert(bare.to_string(), g.leaf(tensor.clone(), trainable));
        }
    }
    EncoderVars::from_map(vars)
}

struct BatchLoss<E: Scalar> {
    loss: f64,
    grads: Option<BTreeMap<String, Tensor<E>>>,
}

#[allow(clippy::too_many_arguments)]
fn batch_forward_backward<E: Scalar>(
    params: &BTreeMap<String, Tensor<E>>,
    msg_cfg: &crate::encoder::EncoderConfig,
    rsp_cfg: &crate::encoder::EncoderConfig,
    mask: &FreezeMask,
    msgs: &[crate::corpus::TokenSequence],
    rsps: &[crate::corpus::TokenSequence],
    temperature: f64,
    with_grads: bool,
) -> Result<BatchLoss<E>, TrainError> {
    let mut g = if with_grads { Graph::new() } else { Graph::no_grad() };
    let msg_vars = register_side(&mut g, params, "msg", mask);
    let rsp_vars = register_side(&mut g, params, "rsp", mask);
    let m = forward_cls(&mut g, &msg_vars, msg_cfg, msgs)?;
    let r = forward_cls(&mut g, &rsp_vars, rsp_cfg, rsps)?;
    let loss = symmetric_loss_graph(&mut g, m, r, temperature)?;
    let loss_value = g.value(loss).item().to_f64();
    if !with_grads {
        return Ok(BatchLoss { loss: loss_value, grads: None });
    }
    let leaf_vars: Vec<(String, Var)> = msg_vars
        .iter()
        .map(|(k, v)| (format!("msg.{k}"), *v))
        .chain(rsp_vars.iter().map(|(k, v)| (format!("rsp.{k}"), *v)))
        .collect();
    let mut grads = g.backward(loss)?;
    let mut out = BTreeMap::new();
    for (key, var) in leaf_vars {
        if mask.is_frozen(&key) {
            continue;
        }
        if let Some(grad) = grads.take(var) {
            out.insert(key, grad);
        }
    }
    Ok(BatchLoss { loss: loss_value, grads: Some(out) })
}

fn validation_loss<E: Scalar>(
    params: &BTreeMap<String, Tensor<E>>,
    msg_cfg: &crate::encoder::EncoderConfig,
    rsp_cfg: &crate::encoder::EncoderConfig,
    mask: &FreezeMask,
    data: &TokenizedPairs,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..data.len()).step_by(cfg.batch_size) {
        let end = (start + cfg.batch_size).min(data.len());
        let out = batch_forward_backward(
            params,
            msg_cfg,
            rsp_cfg,
            mask,
            &data.msgs[start..end],
            &data.rsps[start..end],
            cfg.temperature,
            false,
        )?;
        total += out.loss * (end - start) as f64;
        count += end - start;
    }
    Ok(total / count as f64)
}

/// Trains to the best validation checkpoint.
///
/// Per epoch: seeded shuffle, micro-batches with in-batch negatives,
/// gradient accumulation, one Adam step per group with the freeze mask, then
/// a validation pass. Returns the best (not last) checkpoint. The wall
/// clock starts after tokenization and includes validation passes.
pub fn train_tokenized<E: Scalar>(
    model: MatchingModel<E>,
    train_data: &TokenizedPairs,
    val_data: &TokenizedPairs,
    vocab_fingerprint: &str,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<E>, TrainError> {
    if train_data.is_empty() {
        return Err(TrainError::EmptyData("train"));
    }
    if val_data.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    let msg_cfg = model.msg_weights().config().clone();
    let rsp_cfg = model.rsp_weights().config().clone();
    let freeze = model.freeze().clone();
    let mask = FreezeMask::from_keys(freeze.frozen_keys(&msg_cfg, &rsp_cfg));
    let (total_params, trainable_params) =
        crate::encoder::count_params(&msg_cfg, &rsp_cfg, Some(&freeze));
    let fully_frozen = trainable_params == 0;

    let mut params = model.flat_params();
    let mut adam = AdamState::<E>::new(cfg.schedule.clone());

    let mut epoch_val_losses = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor<E>>, f64)> = None;

    let started = Instant::now();
    for epoch in 0..cfg.max_epochs {
        let epoch_started = Instant::now();
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        if !fully_frozen {
            let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            for group in batches.chunks(cfg.accumulation_steps.max(1)) {
                let mut merged: BTreeMap<String, Tensor<E>> = BTreeMap::new();
                for batch_idx in group {
                    let msgs: Vec<_> =
                        batch_idx.iter().map(|&i| train_data.msgs[i].clone()).collect();
                    let rsps: Vec<_> =
                        batch_idx.iter().map(|&i| train_data.rsps[i].clone()).collect();
                    let out = batch_forward_backward(
                        &params,
                        &msg_cfg,
                        &rsp_cfg,
                        &mask,
                        &msgs,
                        &rsps,
                        cfg.temperature,
                        true,
                    )?;
                    for (key, grad) in out.grads.expect("gradients requested") {
                        match merged.get_mut(&key) {
                            Some(acc) => acc.add_assign(&grad),
                            None => {
                                merged.insert(key, grad);
                            }
                        }
                    }
                }
                let scale = E::from_f64(1.0 / group.len() as f64);
                for grad in merged.values_mut() {
                    grad.scale_assign(scale);
                }
                adam_step(&mut adam, &mut params, &merged, &mask)?;
            }
        }

        let val = validation_loss(&params, &msg_cfg, &rsp_cfg, &mask, val_data, cfg)?;
        epoch_val_losses.push(val);
        epoch_seconds.push(epoch_started.elapsed().as_secs_f64());
        if !val.is_finite() {
            let report = TrainReport {
                epoch_val_losses: epoch_val_losses.clone(),
                epoch_seconds: epoch_seconds.clone(),
                best_epoch: best.as_ref().map(|(e, ..)| *e).unwrap_or(0),
                wall_clock_to_best: best.as_ref().map(|b| b.3).unwrap_or(0.0),
                total_wall_clock: started.elapsed().as_secs_f64(),
                total_params,
                trainable_params,
            };
            return Err(TrainError::Diverged { epoch, report });
        }
        let improved = best.as_ref().map(|(_, loss, ..)| val < *loss).unwrap_or(true);
        if improved {
            best = Some((epoch, val, params.clone(), started.elapsed().as_secs_f64()));
        }
    }

    let (best_epoch, best_loss, best_params, wall_clock_to_best) =
        best.expect("max_epochs >= 1 yields at least one epoch");
    let report = TrainReport {
        epoch_val_losses,
        epoch_seconds,
        best_epoch,
        wall_clock_to_best,
        total_wall_clock: started.elapsed().as_secs_f64(),
        total_params,
        trainable_params,
    };
    let header = CheckpointHeader {
        format_version: checkpoint::FORMAT_VERSION,
        msg_config: msg_cfg.clone(),
        rsp_config: rsp_cfg.clone(),
        freeze: freeze.clone(),
        vocab_fingerprint: vocab_fingerprint.to_string(),
        seed: cfg.seed,
        epoch: best_epoch,
        validation_loss: best_loss,
        wall_clock_seconds: wall_clock_to_best,
    };
    let weights = best_params.iter().map(|(k, t)| (k.clone(), t.cast::<f32>())).collect();
    let checkpoint = Checkpoint { header, weights };
    let model = MatchingModel::from_flat_params(&msg_cfg, &rsp_cfg, freeze, &best_params)?;
    Ok(TrainOutcome { model, checkpoint, report })
}

/// Tokenizes a split and trains; see [`train_tokenized`].
pub fn train<E: Scalar>(
    model: MatchingModel<E>,
    data: &DatasetSplit,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<E>, TrainError> {
    let train_data = TokenizedPairs::from_pairs(vocab, &data.train, cfg.max_len);
    let val_data = TokenizedPairs::from_pairs(vocab, &data.validation, cfg.max_len);
    train_tokenized(model, &train_data, &val_data, &vocab.fingerprint(), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_encoder, EncoderConfig, Init};

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig::new(2, 8, 2, 16, 32, 8).unwrap()
    }

    fn toy_model(seed: u64, freeze: FreezeSpec) -> MatchingModel<f64> {
        let cfg = toy_cfg();
        let msg = build_encoder(&cfg, Init::Random { seed }).unwrap();
        let rsp = build_encoder(&cfg, Init::Random { seed: seed + 1 }).unwrap();
        MatchingModel::new(msg, rsp, freeze).unwrap()
    }

    #[test]
    fn loss_of_single_pair_batch_is_zero() {
        let m = Tensor::<f64>::from_vec(1, 3, vec![0.3, -0.2, 0.9]);
        let r = Tensor::<f64>::from_vec(1, 3, vec![1.0, 0.5, -0.4]);
        let loss = symmetric_loss(&m, &r).unwrap();
        assert!(loss.abs() < 1e-15, "{loss}");
    }

    #[test]
    fn loss_of_zero_scores_is_ln_n() {
        // M = 0 forces S = 0: uniform softmax over 4 candidates
        let m = Tensor::<f64>::zeros(4, 5);
        let r = Tensor::<f64>::from_vec(4, 5, (0..20).map(|i| i as f64 * 0.1).collect());
        let loss = symmetric_loss(&m, &r).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn strong_diagonal_drives_loss_to_zero() {
        // S = 20 I via M = 20 I, R = I
        let n = 4;
        let mut m = Tensor::<f64>::zeros(n, n);
        let mut r = Tensor::<f64>::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 20.0);
            r.set(i, i, 1.0);
        }
        let loss = symmetric_loss(&m, &r).unwrap();
        assert!(loss < 1e-6, "{loss}");
        assert!(loss > 0.0);
    }

    #[test]
    fn loss_is_symmetric_and_permutation_invariant() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..6);
            let h = rng.gen_range(2..5);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                Tensor::<f64>::from_vec(n, h, (0..n * h).map(|_| rng.gen_range(-1.0..1.0)).collect())
            };
            let m = mk(&mut rng);
            let r = mk(&mut rng);
            let a = symmetric_loss(&m, &r).unwrap();
            let b = symmetric_loss(&r, &m).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0);

            // apply one row permutation to both sides
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..n).collect();
                p.rotate_left(1);
                p
            };
            let permute = |t: &Tensor<f64>| {
                let mut out = Tensor::<f64>::zeros(n, h);
                for (dst, &src) in perm.iter().enumerate() {
                    for j in 0..h {
                        out.set(dst, j, t.get(src, j));
                    }
                }
                out
            };
            let c = symmetric_loss(&permute(&m), &permute(&r)).unwrap();
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_rejects_empty_and_nan() {
        let m = Tensor::<f64>::zeros(0, 3);
        assert!(symmetric_loss(&m, &m).is_err());
        let bad = Tensor::<f64>::from_vec(1, 2, vec![f64::NAN, 0.0]);
        let ok = Tensor::<f64>::from_vec(1, 2, vec![0.0, 0.0]);
        assert!(matches!(
            symmetric_loss(&bad, &ok),
            Err(TensorError::NonFinite { op: "symmetric_loss" })
        ));
    }

    fn tiny_data(vocab_size: u32, n: usize, t: usize, seed: u64) -> TokenizedPairs {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng| {
            let active = rng.gen_range(3..=t);
            let mut ids = vec![2u32];
            for _ in 0..active - 2 {
                ids.push(rng.gen_range(5..vocab_size));
            }
            ids.push(3);
            ids.resize(t, 0);
            crate::corpus::TokenSequence {
                ids,
                attention_mask: (0..t).map(|i| i < active).collect(),
            }
        };
        TokenizedPairs {
            msgs: (0..n).map(|_| mk(&mut rng)).collect(),
            rsps: (0..n).map(|_| mk(&mut rng)).collect(),
        }
    }

    fn fast_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: 3,
            batch_size: 4,
            accumulation_steps: 2,
            schedule: LrSchedule { base: 1e-3, warmup_steps: 2, gamma: 0.999 },
            seed,
            max_len: 8,
            temperature: 1.0,
        }
    }

    #[test]
    fn fully_frozen_training_changes_nothing() {
        let model = toy_model(1, FreezeSpec::all());
        let before = model.flat_params();
        let data = tiny_data(32, 16, 8, 9);
        let val = tiny_data(32, 8, 8, 10);
        let out = train_tokenized(model, &data, &val, "vocabhash", &fast_cfg(5)).unwrap();
        for (key, tensor) in out.model.flat_params() {
            assert!(tensor.bit_eq(&before[&key]), "{key} changed");
        }
        let losses = &out.report.epoch_val_losses;
        for w in losses.windows(2) {
            assert_eq!(w[0], w[1], "validation loss should be constant");
        }
        assert_eq!(out.report.trainable_params, 0);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let data = tiny_data(32, 24, 8, 42);
        let val = tiny_data(32, 8, 8, 43);
        let run = || {
            let model = toy_model(7, FreezeSpec::none());
            train_tokenized(model, &data, &val, "vocabhash", &fast_cfg(11)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.report.epoch_val_losses, b.report.epoch_val_losses);
        for (key, tensor) in a.model.flat_params() {
            assert!(tensor.bit_eq(&b.model.flat_params()[&key]), "{key}");
        }
    }

    #[test]
    fn frozen_tensors_stay_bit_identical_through_training() {
        let spec = FreezeSpec::fm(1, 1);
        let model = toy_model(3, spec.clone());
        let frozen = spec.frozen_keys(model.msg_weights().config(), model.rsp_weights().config());
        let before = model.flat_params();
        let data = tiny_data(32, 24, 8, 4);
        let val = tiny_data(32, 8, 8, 5);
        let out = train_tokenized(model, &data, &val, "vocabhash", &fast_cfg(2)).unwrap();
        let after = out.model.flat_params();
        for key in &frozen {
            assert!(after[key].bit_eq(&before[key]), "{key} changed despite freeze");
        }
        // something trainable must have moved
        assert!(frozen.len() < after.len());
        let moved = after
            .iter()
            .filter(|(k, t)| !frozen.contains(*k) && !t.bit_eq(&before[*k]))
            .count();
        assert!(moved > 0);
    }

    #[test]
    fn best_checkpoint_has_min_validation_loss() {
        let model = toy_model(5, FreezeSpec::none());
        let data = tiny_data(32, 24, 8, 6);
        let val = tiny_data(32, 8, 8, 7);
        let out = train_tokenized(model, &data, &val, "vocabhash", &fast_cfg(3)).unwrap();
        let min = out
            .report
            .epoch_val_losses
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.report.epoch_val_losses[out.report.best_epoch], min);
        assert_eq!(out.checkpoint.header.validation_loss, min);
        assert!(out.report.wall_clock_to_best <= out.report.total_wall_clock);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let model = toy_model(1, FreezeSpec::none());
        let empty = TokenizedPairs { msgs: vec![], rsps: vec![] };
        let data = tiny_data(32, 4, 8, 1);
        assert!(matches!(
            train_tokenized(model.clone(), &empty, &data, "h", &fast_cfg(0)),
            Err(TrainError::EmptyData("train"))
        ));
        assert!(matches!(
            train_tokenized(model, &data, &empty, "h", &fast_cfg(0)),
            Err(TrainError::EmptyData("validation"))
        ));
    }
}
