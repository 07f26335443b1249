//! Binary checkpoints.
//!
//! ```text
//! "CWSS" | u32 version | u64 body length | body | u64 CRC-64/XZ of all preceding bytes
//! body  = u32 header length | header (JSON) | u32 block count | blocks
//! block = u32 name length | name | u32 rank | u64 extents… | f32 data…
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ArchitectureConfig, CapsNetParams};
use crate::tensor::Tensor;
use crate::training::{Adam, TrainState};

pub const MAGIC: &[u8; 4] = b"CWSS";
pub const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const PREFIX: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: CapsNetParams,
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: ArchitectureConfig,
    training: Option<TrainingHeader>,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    epoch: usize,
    alpha: f32,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend((e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

/// Serialized bytes of a checkpoint.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    let header = Header {
        architecture: p.arch.clone(),
        training: ckpt.state.as_ref().map(|s| TrainingHeader {
            epoch: s.epoch,
            alpha: s.alpha,
            adam: s.adam.as_ref().map(|a| AdamHeader {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            }),
        }),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let named = p.named_blocks();
    let mut blocks: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), *t)).collect();
    if let Some(adam) = ckpt.state.as_ref().and_then(|s| s.adam.as_ref()) {
        for (i, (n, _)) in named.iter().enumerate() {
            blocks.push((format!("adam.m.{}", n), &adam.m[i]));
        }
        for (i, (n, _)) in named.iter().enumerate() {
            blocks.push((format!("adam.v.{}", n), &adam.v[i]));
        }
    }
    let mut body = Vec::new();
    body.extend((header.len() as u32).to_le_bytes());
    body.extend(&header);
    body.extend((blocks.len() as u32).to_le_bytes());
    for (n, t) in &blocks {
        put_block(&mut body, n, t);
    }
    let mut out = Vec::with_capacity(PREFIX + body.len() + 8);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((body.len() as u64).to_le_bytes());
    out.extend(body);
    let crc = CRC64.checksum(&out);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(CheckpointError::Malformed(format!("{} runs past the body", what)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let n = self.u32("name length")? as usize;
        let name = String::from_utf8(self.take(n, "name")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("block name is not UTF-8".into()))?;
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("{}: rank {}", name, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("extent")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| CheckpointError::Malformed(format!("{}: shape {:?} too large", name, shape)))?;
        let raw = self.take(count * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
}

/// Parses and validates checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())).into());
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < PREFIX {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected = (body_len as u128) + PREFIX as u128 + 8;
    if (bytes.len() as u128) < expected {
        return Err(CheckpointError::Truncated(format!("{} of {} bytes", bytes.len(), expected)).into());
    }
    if (bytes.len() as u128) > expected {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() as u128 - expected)).into());
    }
    let end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[end..].try_into().expect("8 bytes"));
    let computed = CRC64.checksum(&bytes[..end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }
    let mut r = Reader {
        buf: &bytes[PREFIX..end],
        pos: 0,
    };
    let hlen = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| CheckpointError::Malformed(format!("header: {}", e)))?;
    let count = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        blocks.push(r.block()?);
    }
    if r.pos != r.buf.len() {
        return Err(CheckpointError::Malformed("unread bytes after the last block".into()).into());
    }
    assemble(header, blocks)
}

fn assemble(header: Header, blocks: Vec<(String, Tensor)>) -> Result<Checkpoint> {
    let mismatch = |m: String| Error::Checkpoint(CheckpointError::ArchitectureMismatch(m));
    // a zero-seeded template provides names and shapes
    let mut params = CapsNetParams::init(&header.architecture, 0).map_err(|e| mismatch(e.to_string()))?;
    let names: Vec<String> = params.named_blocks().into_iter().map(|(n, _)| n).collect();
    let mut blocks = blocks.into_iter();
    let mut next = |expected: &str, like: &Tensor| -> Result<Tensor> {
        let (name, t) = blocks
            .next()
            .ok_or_else(|| mismatch(format!("missing block {}", expected)))?;
        if name != expected || t.shape() != like.shape() {
            return Err(mismatch(format!(
                "expected {} {:?}, found {} {:?}",
                expected,
                like.shape(),
                name,
                t.shape()
            )));
        }
        Ok(t)
    };
    for (name, slot) in names.iter().zip(params.blocks_mut()) {
        *slot = next(name, slot)?;
    }
    let state = match header.training {
        None => None,
        Some(th) => {
            let adam = match th.adam {
                None => None,
                Some(ah) => {
                    let mut m = Vec::with_capacity(names.len());
                    let mut v = Vec::with_capacity(names.len());
                    for (name, (_, t)) in names.iter().zip(params.named_blocks()) {
                        m.push(next(&format!("adam.m.{}", name), t)?);
                    }
                    for (name, (_, t)) in names.iter().zip(params.named_blocks()) {
                        v.push(next(&format!("adam.v.{}", name), t)?);
                    }
                    Some(Adam {
                        beta1: ah.beta1,
                        beta2: ah.beta2,
                        eps: ah.eps,
                        step: ah.step,
                        m,
                        v,
                    })
                }
            };
            Some(TrainState {
                epoch: th.epoch,
                alpha: th.alpha,
                adam,
            })
        }
    };
    if let Some((name, _)) = blocks.next() {
        return Err(mismatch(format!("unexpected block {}", name)));
    }
    Ok(Checkpoint { params, state })
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_state: bool) -> Checkpoint {
        let params = CapsNetParams::init(&ArchitectureConfig::tiny(), 7).unwrap();
        let state = with_state.then(|| {
            let mut adam = Adam::new(&params);
            adam.step = 3;
            adam.m[0].data_mut()[0] = 0.25;
            TrainState {
                epoch: 2,
                alpha: 4.05e-4,
                adam: Some(adam),
            }
        });
        Checkpoint { params, state }
    }

    fn kind(e: Error) -> CheckpointError {
        match e {
            Error::Checkpoint(k) => k,
            other => panic!("unexpected error {}", other),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for with_state in [false, true] {
            let c = sample(with_state);
            let bytes = encode(&c).unwrap();
            let back = decode(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn damage_is_classified() {
        let bytes = encode(&sample(true)).unwrap();
        assert!(matches!(kind(decode(&[]).unwrap_err()), CheckpointError::Truncated(_)));
        assert!(matches!(
            kind(decode(&bytes[..bytes.len() - 100]).unwrap_err()),
            CheckpointError::Truncated(_)
        ));
        let mut flipped = bytes.clone();
        flipped[PREFIX + 40] ^= 0x01;
        assert!(matches!(
            kind(decode(&flipped).unwrap_err()),
            CheckpointError::ChecksumMismatch { .. }
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert_eq!(kind(decode(&magic).unwrap_err()), CheckpointError::BadMagic);
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            kind(decode(&version).unwrap_err()),
            CheckpointError::UnsupportedVersion { found: 9, .. }
        ));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cwss");
        let c = sample(false);
        save_checkpoint(&path, &c).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        assert!(!dir.path().join("m.cwss.tmp").exists());
    }
}
