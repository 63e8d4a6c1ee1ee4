//! Checkpoint files: magic bytes, a JSON header, then named 32-bit tensors
//! in key order. Writes are atomic (temp file + rename).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::encoder::{EncoderConfig, EncoderWeights, FreezeSpec};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RKCP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub msg_config: EncoderConfig,
    pub rsp_config: EncoderConfig,
    pub freeze: FreezeSpec,
    pub vocab_fingerprint: String,
    pub seed: u64,
    pub epoch: usize,
    pub validation_loss: f64,
    pub wall_clock_seconds: f64,
}

/// All weights by `msg.`/`rsp.`-prefixed key, stored as 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    /// Restores a model at the checkpoint's weights, upcast to `E`.
    /// Shape or key mismatches name the offending key.
    pub fn restore<E: Scalar>(&self) -> Result<super::MatchingModel<E>, TrainError> {
        let params: BTreeMap<String, Tensor<E>> =
            self.weights.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        Ok(super::MatchingModel::from_flat_params(
            &self.header.msg_config,
            &self.header.rsp_config,
            self.header.freeze.clone(),
            &params,
        )?)
    }

    /// Restores only one side's encoder weights.
    pub fn restore_side<E: Scalar>(&self, prefix: &str) -> Result<EncoderWeights<E>, TrainError> {
        let cfg = match prefix {
            "msg" => &self.header.msg_config,
            "rsp" => &self.header.rsp_config,
            other => return Err(TrainError::Format(format!("unknown side {other}"))),
        };
        let dot = format!("{prefix}.");
        let tensors: BTreeMap<String, Tensor<E>> = self
            .weights
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&dot).map(|bare| (bare.to_string(), t.cast())))
            .collect();
        Ok(EncoderWeights::from_tensors(cfg.clone(), tensors)?)
    }

    /// SHA-256 over the weight payload; identifies this checkpoint for
    /// response-encoding cache provenance.
    pub fn weights_fingerprint(&self) -> String {
        fingerprint_tensors(self.weights.iter().map(|(k, t)| (k.clone(), t.clone())))
    }
}

pub(crate) fn fingerprint_tensors<I>(tensors: I) -> String
where
    I: Iterator<Item = (String, Tensor<f32>)>,
{
    let mut hasher = Sha256::new();
    for (key, t) in tensors {
        hasher.update(key.as_bytes());
        hasher.update((t.rows() as u32).to_le_bytes());
        hasher.update((t.cols() as u32).to_le_bytes());
        hasher.update(&t.to_le_bytes());
    }
    let mut out = String::new();
    for b in hasher.finalize() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&checkpoint.header)
            .map_err(|e| TrainError::Format(e.to_string()))?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(checkpoint.weights.len() as u32).to_le_bytes())?;
        for (key, tensor) in &checkpoint.weights {
            let key_bytes = key.as_bytes();
            w.write_all(&(key_bytes.len() as u16).to_le_bytes())?;
            w.write_all(key_bytes)?;
            w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
            w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
            w.write_all(&tensor.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(TrainError::Format(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| TrainError::Format(e.to_string()))?;

    let count = read_u32(&mut r)? as usize;
    let mut weights = BTreeMap::new();
    for _ in 0..count {
        let key_len = read_u16(&mut r)? as usize;
        let mut key_bytes = vec![0u8; key_len];
        r.read_exact(&mut key_bytes)?;
        let key = String::from_utf8(key_bytes).map_err(|e| TrainError::Format(e.to_string()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut payload = vec![0u8; rows * cols * 4];
        r.read_exact(&mut payload)?;
        let tensor = Tensor::<f32>::from_le_bytes(rows, cols, &payload)
            .ok_or_else(|| TrainError::Format(format!("bad payload for {key}")))?;
        weights.insert(key, tensor);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TrainError::Format("trailing bytes after last tensor".into()));
    }

    // The header must describe exactly the stored key set.
    let mut expected: Vec<String> = header
        .msg_config
        .key_schema()
        .into_iter()
        .map(|(k, _)| format!("msg.{k}"))
        .chain(header.rsp_config.key_schema().into_iter().map(|(k, _)| format!("rsp.{k}")))
        .collect();
    expected.sort();
    for key in &expected {
        if !weights.contains_key(key) {
            return Err(TrainError::Format(format!("missing tensor {key}")));
        }
    }
    for key in weights.keys() {
        if expected.binary_search(key).is_err() {
            return Err(TrainError::Format(format!("unexpected tensor {key}")));
        }
    }
    Ok(Checkpoint { header, weights })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, TrainError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
