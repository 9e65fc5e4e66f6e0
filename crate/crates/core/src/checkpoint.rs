//! Binary model checkpoints.
//!
//! Layout (all little-endian, 8 bytes per field):
//!
//! ```text
//! "DEE1"
//! N κ M K (u64)  σ (f64)  L (u64)  threshold lr wd (f64)  batch seed voting init (u64)
//! keys            N × M f64, row-major
//! per expert      W: K × M f64, row-major, then b: K f64
//! ```
//!
//! `voting` is 0 for similarity and 1 for literal; `init` is 0 for dual-root and 1 for uniform.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::ensemble::{Expert, ExpertEnsemble};
use crate::error::{DeeError, Result};
use crate::types::{ModelConfig, SinkhornInit, VotingMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DEE1";

fn voting_code(mode: VotingMode) -> u64 {
    match mode {
        VotingMode::Similarity => 0,
        VotingMode::Literal => 1,
    }
}

fn init_code(init: SinkhornInit) -> u64 {
    match init {
        SinkhornInit::DualRoot => 0,
        SinkhornInit::Uniform => 1,
    }
}

pub fn encode_checkpoint(model: &ExpertEnsemble) -> Vec<u8> {
    let cfg = &model.cfg;
    let mut out = Vec::with_capacity(4 + 13 * 8 + 8 * (model.key_param_count() + model.classifier_param_count()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let u = |v: u64, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    u(cfg.num_experts as u64, &mut out);
    u(cfg.num_neighbors as u64, &mut out);
    u(cfg.embedding_dim as u64, &mut out);
    u(cfg.num_classes as u64, &mut out);
    out.extend_from_slice(&cfg.kernel_width.to_le_bytes());
    u(cfg.bregman_iters as u64, &mut out);
    for v in [cfg.gamma_threshold, cfg.learning_rate, cfg.weight_decay] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    u(cfg.batch_size as u64, &mut out);
    u(cfg.seed, &mut out);
    u(voting_code(cfg.voting), &mut out);
    u(init_code(cfg.sinkhorn_init), &mut out);
    for v in model.keys.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for e in &model.experts {
        for v in e.weights.iter().chain(e.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Cursor<'_> {
    fn take8(&mut self, what: &str) -> Result<[u8; 8]> {
        let end = self.offset + 8;
        let chunk = self.bytes.get(self.offset..end).ok_or_else(|| {
            DeeError::format(
                self.offset as u64,
                format!("truncated while reading {what}: need 8 bytes, {} left", self.bytes.len() - self.offset),
            )
        })?;
        self.offset = end;
        Ok(chunk.try_into().expect("8 bytes"))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take8(what)?))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.offset as u64;
        usize::try_from(self.u64(what)?).map_err(|_| DeeError::format(at, format!("{what} does not fit in usize")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take8(what)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ExpertEnsemble> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DeeError::format(0, "missing DEE1 magic"));
    }
    let mut cur = Cursor { bytes, offset: 4 };
    let num_experts = cur.usize("N")?;
    let num_neighbors = cur.usize("κ")?;
    let embedding_dim = cur.usize("M")?;
    let num_classes = cur.usize("K")?;
    let kernel_width = cur.f64("σ")?;
    let bregman_iters = cur.usize("L")?;
    let gamma_threshold = cur.f64("threshold")?;
    let learning_rate = cur.f64("learning rate")?;
    let weight_decay = cur.f64("weight decay")?;
    let batch_size = cur.usize("batch size")?;
    let seed = cur.u64("seed")?;
    let at = cur.offset as u64;
    let voting = match cur.u64("voting mode")? {
        0 => VotingMode::Similarity,
        1 => VotingMode::Literal,
        other => return Err(DeeError::format(at, format!("unknown voting code {other}"))),
    };
    let at = cur.offset as u64;
    let sinkhorn_init = match cur.u64("sinkhorn init")? {
        0 => SinkhornInit::DualRoot,
        1 => SinkhornInit::Uniform,
        other => return Err(DeeError::format(at, format!("unknown init code {other}"))),
    };
    let cfg = ModelConfig {
        num_experts,
        num_neighbors,
        embedding_dim,
        num_classes,
        kernel_width,
        bregman_iters,
        gamma_threshold,
        learning_rate,
        weight_decay,
        batch_size,
        seed,
        voting,
        sinkhorn_init,
    };
    let (n, m, k) = (num_experts, embedding_dim, num_classes);
    let payload = n
        .checked_mul(m)
        .and_then(|keys| k.checked_mul(m + 1).and_then(|per| per.checked_mul(n)).map(|e| keys + e))
        .and_then(|count| count.checked_mul(8))
        .ok_or_else(|| DeeError::format(4, "declared dimensions overflow"))?;
    let expected = cur.offset + payload;
    if bytes.len() != expected {
        return Err(DeeError::format(
            cur.offset as u64,
            format!("expected {expected} bytes in total, found {}", bytes.len()),
        ));
    }
    let mut read = |count: usize, what: &str| -> Result<Vec<f64>> { (0..count).map(|_| cur.f64(what)).collect() };
    let keys = Array2::from_shape_vec((n, m), read(n * m, "keys")?).expect("shape");
    let mut experts = Vec::with_capacity(n);
    for _ in 0..n {
        let weights = Array2::from_shape_vec((k, m), read(k * m, "weights")?).expect("shape");
        let bias = Array1::from(read(k, "bias")?);
        experts.push(Expert { weights, bias });
    }
    ExpertEnsemble::from_parts(cfg, keys, experts)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ExpertEnsemble) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ExpertEnsemble> {
    decode_checkpoint(&fs::read(path)?)
}

/// Hex SHA-256 of the encoded checkpoint; equal fingerprints mean bit-identical parameters.
pub fn model_fingerprint(model: &ExpertEnsemble) -> String {
    hex::encode(Sha256::digest(encode_checkpoint(model)))
}
