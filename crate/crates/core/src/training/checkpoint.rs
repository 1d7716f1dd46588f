//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian): magic, format version (u32), header
//! JSON (u64 length + bytes), step (u64), parameter count (u32) and each
//! tensor, Adam step (u64) and each moment pair, rng count (u32) and each
//! state, then a SHA-256 digest of everything before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Tensor};
use crate::config::TrainConfig;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

use super::optim::Adam;

pub const MAGIC: &[u8; 8] = b"FCVAECKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Position of a ChaCha stream, enough to rebuild it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vocab: Vocabulary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    /// Completed optimizer steps.
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub rngs: Vec<(String, RngState)>,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_name(out, name);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(
            self.take(16)?.try_into().expect("16 bytes"),
        ))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.name()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Integrity(format!("tensor {name} too large")))?;
        let bytes = self.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Integrity(format!("tensor {name} too large")))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(e.to_string()))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_value(Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        })
        .expect("header serializes");
        let header = serde_json::to_string(&header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());

        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            put_tensor(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
        }
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        for (i, p) in self.params.iter().enumerate() {
            put_tensor(&mut out, &p.name, p.tensor.shape(), &self.adam.m[i]);
            put_tensor(&mut out, &p.name, p.tensor.shape(), &self.adam.v[i]);
        }
        out.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for (name, s) in &self.rngs {
            put_name(&mut out, name);
            out.extend_from_slice(&s.seed);
            out.extend_from_slice(&s.stream.to_le_bytes());
            out.extend_from_slice(&s.word_pos.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let (payload, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: payload,
            pos: 12,
        };
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
        let step = r.u64()?;

        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            params.add(&name, t)?;
        }
        let mut adam = Adam::new(
            &params,
            header.config.adam_beta1,
            header.config.adam_beta2,
            header.config.adam_eps,
        );
        adam.t = r.u64()?;
        for i in 0..n {
            let expected = params.by_id(i);
            for slot in 0..2 {
                let (name, t) = r.tensor()?;
                if name != expected.name || t.shape() != expected.tensor.shape() {
                    return Err(Error::Integrity(format!(
                        "optimizer moment {name} does not match parameter {}",
                        expected.name
                    )));
                }
                let target = if slot == 0 {
                    &mut adam.m[i]
                } else {
                    &mut adam.v[i]
                };
                *target = t.into_data();
            }
        }
        let n_rngs = r.u32()? as usize;
        let mut rngs = Vec::with_capacity(n_rngs);
        for _ in 0..n_rngs {
            let name = r.name()?;
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = r.u128()?;
            rngs.push((
                name,
                RngState {
                    seed,
                    stream,
                    word_pos,
                },
            ));
        }
        if r.pos != payload.len() {
            return Err(Error::Integrity("trailing bytes after rng states".into()));
        }
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            step,
            params,
            adam,
            rngs,
        })
    }

    pub fn rng(&self, name: &str) -> Option<ChaCha8Rng> {
        self.rngs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.restore())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
