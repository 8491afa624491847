//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor's values as little-endian scalars in header order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::autodiff::NdArray;
use crate::critic::Critic;
use crate::error::{Error, Result};
use crate::imageio::write_atomic;
use crate::local_net::GeneratorStack;
use crate::nn::Module;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"TCGANCKP";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const Z_REC: &str = "noise.z_rec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub scalar: String,
    pub config: TrainConfig,
    pub sizes: Vec<(usize, usize)>,
    pub stages: usize,
    pub trained: usize,
    pub sigmas: Vec<f64>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub stack: GeneratorStack<T>,
    pub critic: Critic<T>,
}

pub fn file_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tensors<'a, T: Scalar>(stack: &'a GeneratorStack<T>, critic: &'a Critic<T>) -> Vec<(String, &'a NdArray<T>, bool)> {
    let mut v: Vec<_> = stack
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, &p.value, p.trainable))
        .collect();
    v.push((Z_REC.to_string(), &stack.noise.z_rec, false));
    v.extend(
        critic
            .named_params()
            .into_iter()
            .map(|(n, p)| (format!("critic.{n}"), &p.value, p.trainable)),
    );
    v
}

/// Serializes the generator, critic and configuration.
pub fn encode<T: Scalar>(stack: &GeneratorStack<T>, critic: &Critic<T>, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let list = tensors(stack, critic);
    let mut payload = Vec::new();
    for (_, v, _) in &list {
        for x in v.iter() {
            x.write_le(&mut payload);
        }
    }
    let header = CheckpointHeader {
        scalar: T::NAME.to_string(),
        config: cfg.clone(),
        sizes: stack.sizes.clone(),
        stages: stack.stages(),
        trained: stack.trained,
        sigmas: stack.noise.sigmas.clone(),
        tensors: list
            .iter()
            .map(|(n, v, t)| TensorEntry {
                name: n.clone(),
                shape: v.shape().to_vec(),
                trainable: *t,
            })
            .collect(),
        payload_bytes: payload.len() as u64,
        payload_sha256: file_sha256(&payload),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically and returns the SHA-256 of the file contents.
pub fn save_checkpoint<T: Scalar>(
    stack: &GeneratorStack<T>,
    critic: &Critic<T>,
    cfg: &TrainConfig,
    path: &Path,
) -> Result<String> {
    let bytes = encode(stack, critic, cfg)?;
    write_atomic(path, &bytes)?;
    Ok(file_sha256(&bytes))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CheckpointCorrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointHeader, &'a [u8])> {
    if bytes.len() < PREFIX {
        return Err(corrupt(path, format!("file has only {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[PREFIX..];
    if hlen > body.len() {
        return Err(corrupt(path, "header extends past end of file"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(path, format!("header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() as u64 != header.payload_bytes {
        return Err(corrupt(
            path,
            format!("payload has {} bytes, header says {}", payload.len(), header.payload_bytes),
        ));
    }
    if file_sha256(payload) != header.payload_sha256 {
        return Err(corrupt(path, "payload digest mismatch"));
    }
    Ok((header, payload))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Header only, after verifying the file.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = read(path)?;
    Ok(split(&bytes, path)?.0)
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let (header, payload) = split(bytes, path)?;
    let width = match header.scalar.as_str() {
        "f32" => 4,
        "f64" => 8,
        s => return Err(corrupt(path, format!("unknown scalar type {s:?}"))),
    };
    let cfg = &header.config;
    if header.stages == 0 || header.stages > header.sizes.len() || header.sigmas.len() != header.stages {
        return Err(corrupt(path, "inconsistent stage counts"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stack = GeneratorStack::<T>::new(cfg.global_net(), header.sizes.clone(), &mut rng)
        .map_err(|e| corrupt(path, e.to_string()))?;
    for _ in 1..header.stages {
        stack.trained = stack.stages();
        stack.expand_stage()?;
    }
    let mut critic = Critic::<T>::new(cfg.critic(), &mut rng).map_err(|e| corrupt(path, e.to_string()))?;

    let expected: Vec<(String, Vec<usize>)> = tensors(&stack, &critic)
        .into_iter()
        .map(|(n, v, _)| (n, v.shape().to_vec()))
        .collect();
    let found: Vec<(String, Vec<usize>)> = header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    if expected != found {
        return Err(corrupt(path, "tensor table does not match the configured model"));
    }

    let mut chunks = payload.chunks_exact(width);
    let mut fill = |dst: &mut NdArray<T>| {
        for x in dst.iter_mut() {
            let c = chunks.next().expect("payload length checked against tensor table");
            *x = match width {
                4 => T::lit(f32::read_le(c) as f64),
                _ => T::lit(f64::read_le(c)),
            };
        }
    };
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if total * width != payload.len() {
        return Err(corrupt(path, "payload size does not match tensor table"));
    }
    let mut flags = header.tensors.iter().map(|t| t.trainable);
    for p in stack.params_mut() {
        fill(&mut p.value);
        p.trainable = flags.next().expect("table checked");
    }
    fill(&mut stack.noise.z_rec);
    flags.next();
    for p in critic.params_mut() {
        fill(&mut p.value);
        p.trainable = flags.next().expect("table checked");
    }
    stack.trained = header.trained;
    stack.noise.sigmas = header.sigmas.clone();
    Ok(Checkpoint { header, stack, critic })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{component_digests, Precision};

    fn model() -> (GeneratorStack<f32>, Critic<f32>, TrainConfig) {
        let cfg = TrainConfig {
            stages: 2,
            min_size: 12,
            latent: 8,
            tokens: 4,
            channels: 4,
            heads: 2,
            critic_width: 4,
            precision: Precision::F32,
            ..Default::default()
        };
        let sizes = cfg.schedule_for(12, 12).unwrap().sizes;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut stack = GeneratorStack::new(cfg.global_net(), sizes, &mut rng).unwrap();
        stack.trained = 1;
        stack.expand_stage().unwrap();
        stack.noise.sigmas[1] = 0.25;
        let critic = Critic::new(cfg.critic(), &mut rng).unwrap();
        (stack, critic, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (stack, critic, cfg) = model();
        let bytes = encode(&stack, &critic, &cfg).unwrap();
        let ck = decode::<f32>(&bytes, Path::new("mem")).unwrap();
        assert_eq!(component_digests(&stack, &critic), component_digests(&ck.stack, &ck.critic));
        assert_eq!(ck.stack.noise, stack.noise);
        assert_eq!(ck.stack.frozen_flags(), stack.frozen_flags());
        assert_eq!(ck.header.config, cfg);
        assert_eq!(encode(&ck.stack, &ck.critic, &cfg).unwrap(), bytes);
    }

    #[test]
    fn widening_to_f64_preserves_values() {
        let (stack, critic, cfg) = model();
        let bytes = encode(&stack, &critic, &cfg).unwrap();
        let ck = decode::<f64>(&bytes, Path::new("mem")).unwrap();
        let a = stack.reconstruct(2).unwrap();
        let b = ck.stack.reconstruct(2).unwrap();
        let worst = a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn truncation_and_tampering_are_corruption() {
        let (stack, critic, cfg) = model();
        let bytes = encode(&stack, &critic, &cfg).unwrap();
        for cut in [0, 10, 100, bytes.len() - 1] {
            assert!(matches!(
                decode::<f32>(&bytes[..cut], Path::new("t")),
                Err(Error::CheckpointCorrupt { .. })
            ));
        }
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(
            decode::<f32>(&flipped, Path::new("t")),
            Err(Error::CheckpointCorrupt { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let (stack, critic, cfg) = model();
        let mut bytes = encode(&stack, &critic, &cfg).unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode::<f32>(&bytes, Path::new("t")),
            Err(Error::CheckpointVersion { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn save_then_load_from_disk() {
        let (stack, critic, cfg) = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let digest = save_checkpoint(&stack, &critic, &cfg, &p).unwrap();
        assert_eq!(digest, file_sha256(&std::fs::read(&p).unwrap()));
        assert!(!dir.path().join("a.ckpt.tmp").exists());
        let ck = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(read_header(&p).unwrap(), ck.header);
    }
}
