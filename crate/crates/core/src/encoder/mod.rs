//! Transformer encoder with CLS pooling plus the compression machinery:
//! layer selection for dropping, freeze masks, and parameter counting.

pub mod compress;
pub mod forward;

pub use compress::{FreezeSpec, LayerSelection, SelectionStrategy};
pub use forward::{encode, forward_cls, forward_hidden, EncoderVars};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("weight source has {available} layers, {requested} requested")]
    NotEnoughLayers { available: usize, requested: usize },
    #[error("layer selection: {0}")]
    Selection(String),
    #[error("freeze spec: {0}")]
    Freeze(String),
    #[error("weight key {key}: expected shape {expected:?}, found {found:?}")]
    KeyShape { key: String, expected: (usize, usize), found: (usize, usize) },
    #[error("missing weight key {0}")]
    MissingKey(String),
    #[error("orphan weight key {0}")]
    OrphanKey(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Architecture hyperparameters. Segment ids are always 0 at runtime; the
/// table keeps two rows so BERT-base parameter counts line up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
}

fn default_segments() -> usize {
    2
}

impl EncoderConfig {
    pub fn new(
        num_layers: usize,
        hidden: usize,
        heads: usize,
        ff: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Result<Self, EncoderError> {
        let cfg = EncoderConfig {
            num_layers,
            hidden,
            heads,
            ff,
            vocab_size,
            max_positions,
            segments: default_segments(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.num_layers == 0 {
            return Err(EncoderError::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 || self.ff == 0 || self.segments == 0 {
            return Err(EncoderError::InvalidConfig("zero-sized dimension".into()));
        }
        Ok(())
    }

    /// BERT-base dims at a given layer count, used for paper-scale counting.
    pub fn bert_base(num_layers: usize) -> Self {
        EncoderConfig {
            num_layers,
            hidden: 768,
            heads: 12,
            ff: 3072,
            vocab_size: 30522,
            max_positions: 512,
            segments: 2,
        }
    }

    /// With a different layer count, all else equal.
    pub fn with_layers(&self, num_layers: usize) -> Self {
        EncoderConfig { num_layers, ..self.clone() }
    }

    /// The full weight-key schema with shapes, in key order.
    pub fn key_schema(&self) -> Vec<(String, (usize, usize))> {
        let h = self.hidden;
        let mut keys = vec![
            ("emb.tok".to_string(), (self.vocab_size, h)),
            ("emb.pos".to_string(), (self.max_positions, h)),
            ("emb.seg".to_string(), (self.segments, h)),
            ("emb.ln.g".to_string(), (1, h)),
            ("emb.ln.b".to_string(), (1, h)),
        ];
        for n in 0..self.num_layers {
            for part in ["q", "k", "v", "o"] {
                keys.push((format!("layer.{n}.attn.{part}.w"), (h, h)));
                keys.push((format!("layer.{n}.attn.{part}.b"), (1, h)));
            }
            keys.push((format!("layer.{n}.ln1.g"), (1, h)));
            keys.push((format!("layer.{n}.ln1.b"), (1, h)));
            keys.push((format!("layer.{n}.ff.w1"), (h, self.ff)));
            keys.push((format!("layer.{n}.ff.b1"), (1, self.ff)));
            keys.push((format!("layer.{n}.ff.w2"), (self.ff, h)));
            keys.push((format!("layer.{n}.ff.b2"), (1, h)));
            keys.push((format!("layer.{n}.ln2.g"), (1, h)));
            keys.push((format!("layer.{n}.ln2.b"), (1, h)));
        }
        keys
    }

    /// Keys of the embedding block.
    pub fn embedding_keys(&self) -> Vec<String> {
        ["emb.tok", "emb.pos", "emb.seg", "emb.ln.g", "emb.ln.b"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    /// Keys of one layer block.
    pub fn layer_keys(&self, n: usize) -> Vec<String> {
        self.key_schema()
            .into_iter()
            .map(|(k, _)| k)
            .filter(|k| k.starts_with(&format!("layer.{n}.")))
            .collect()
    }

    pub fn total_params(&self) -> u64 {
        self.key_schema().iter().map(|(_, (r, c))| (r * c) as u64).sum()
    }
}

/// Initialization source for [`build_encoder`].
pub enum Init<'a, E: Scalar> {
    /// Truncated normal (sigma 0.02, clipped at 2 sigma) for weights and
    /// embeddings; layer-norm gains 1, all biases 0.
    Random { seed: u64 },
    /// Copy the embedding block and the first `num_layers` layer blocks.
    FromWeights(&'a EncoderWeights<E>),
}

/// Named weight tensors matching the key schema of their config.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<E: Scalar> {
    config: EncoderConfig,
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> EncoderWeights<E> {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, key: &str) -> &Tensor<E> {
        &self.tensors[key]
    }

    pub fn get_mut(&mut self, key: &str) -> &mut Tensor<E> {
        self.tensors.get_mut(key).expect("key in schema")
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<E>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<E>> {
        &mut self.tensors
    }

    /// Rebuilds from raw tensors, verifying the key set is exactly the
    /// schema implied by `config` (no orphan keys, no missing keys).
    pub fn from_tensors(
        config: EncoderConfig,
        tensors: BTreeMap<String, Tensor<E>>,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        let schema: BTreeMap<String, (usize, usize)> = config.key_schema().into_iter().collect();
        for (key, shape) in &schema {
            match tensors.get(key) {
                None => return Err(EncoderError::MissingKey(key.clone())),
                Some(t) if t.shape() != *shape => {
                    return Err(EncoderError::KeyShape {
                        key: key.clone(),
                        expected: *shape,
                        found: t.shape(),
                    })
                }
                Some(_) => {}
            }
        }
        for key in tensors.keys() {
            if !schema.contains_key(key) {
                return Err(EncoderError::OrphanKey(key.clone()));
            }
        }
        Ok(EncoderWeights { config, tensors })
    }

    pub fn cast<T: Scalar>(&self) -> EncoderWeights<T> {
        EncoderWeights {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

fn truncated_normal<E: Scalar>(rng: &mut ChaCha8Rng, sigma: f64) -> E {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return E::from_f64(z * sigma);
        }
    }
}

/// Builds encoder weights per the config, from a seed or an existing source.
pub fn build_encoder<E: Scalar>(
    config: &EncoderConfig,
    init: Init<'_, E>,
) -> Result<EncoderWeights<E>, EncoderError> {
    config.validate()?;
    match init {
        Init::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tensors = BTreeMap::new();
            for (key, (rows, cols)) in config.key_schema() {
                let is_gain = key.ends_with("ln.g") || key.ends_with("ln1.g") || key.ends_with("ln2.g");
                let is_bias = key.ends_with(".b") || key.ends_with(".b1") || key.ends_with(".b2");
                let t = if is_gain {
                    Tensor::from_vec(rows, cols, vec![E::ONE; rows * cols])
                } else if is_bias {
                    Tensor::zeros(rows, cols)
                } else {
                    let data = (0..rows * cols).map(|_| truncated_normal(&mut rng, 0.02)).collect();
                    Tensor::from_vec(rows, cols, data)
                };
                tensors.insert(key, t);
            }
            Ok(EncoderWeights { config: config.clone(), tensors })
        }
        Init::FromWeights(source) => {
            if source.config.num_layers < config.num_layers {
                return Err(EncoderError::NotEnoughLayers {
                    available: source.config.num_layers,
                    requested: config.num_layers,
                });
            }
            let expected = EncoderConfig {
                num_layers: config.num_layers,
                ..source.config.clone()
            };
            if *config != expected {
                return Err(EncoderError::InvalidConfig(format!(
                    "config dims {config:?} do not match weight source dims"
                )));
            }
            let mut tensors = BTreeMap::new();
            for (key, _) in config.key_schema() {
                tensors.insert(key.clone(), source.tensors[&key].clone());
            }
            Ok(EncoderWeights { config: config.clone(), tensors })
        }
    }
}

/// Keeps the selected layer blocks of `source`, re-stacked contiguously in
/// their original relative order; the embedding block is copied unchanged.
pub fn select_layers<E: Scalar>(
    source: &EncoderWeights<E>,
    sel: &LayerSelection,
) -> Result<EncoderWeights<E>, EncoderError> {
    let indices = sel.resolve(source.config.num_layers)?;
    let config = source.config.with_layers(indices.len());
    let mut tensors = BTreeMap::new();
    for key in config.embedding_keys() {
        tensors.insert(key.clone(), source.tensors[&key].clone());
    }
    for (new_n, &old_n) in indices.iter().enumerate() {
        let old_prefix = format!("layer.{old_n}.");
        let new_prefix = format!("layer.{new_n}.");
        for key in source.config.layer_keys(old_n) {
            let suffix = key.strip_prefix(&old_prefix).expect("layer key prefix");
            tensors.insert(format!("{new_prefix}{suffix}"), source.tensors[&key].clone());
        }
    }
    EncoderWeights::from_tensors(config, tensors)
}

/// Total and trainable parameter counts for a message/response encoder pair.
pub fn count_params(
    msg_cfg: &EncoderConfig,
    rsp_cfg: &EncoderConfig,
    freeze: Option<&FreezeSpec>,
) -> (u64, u64) {
    let total = msg_cfg.total_params() + rsp_cfg.total_params();
    let trainable = match freeze {
        None => total,
        Some(spec) => {
            let frozen: u64 = spec
                .frozen_keys(msg_cfg, rsp_cfg)
                .iter()
                .map(|key| {
                    let (cfg, bare) = if let Some(k) = key.strip_prefix("msg.") {
                        (msg_cfg, k)
                    } else {
                        (rsp_cfg, key.strip_prefix("rsp.").expect("msg./rsp. prefix"))
                    };
                    cfg.key_schema()
                        .iter()
                        .find(|(k, _)| k == bare)
                        .map(|(_, (r, c))| (r * c) as u64)
                        .expect("frozen key in schema")
                })
                .sum();
            total - frozen
        }
    };
    (total, trainable)
}
