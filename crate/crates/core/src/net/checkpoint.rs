//! Checkpoint files: network config, every stored tensor and optionally the
//! optimizer state.
//!
//! Layout (all integers little-endian, floats as LE `f32` bits):
//!
//! ```text
//! "STRC"  u32 version  [u8; 32] sha256 of the config JSON
//! u32 len  config JSON
//! u32 count  { u16 len  name  u64 n  f32 x n } x count
//! u8 has_optimizer
//!   u64 step  f64 lr  f64 beta1  f64 beta2  f64 epsilon
//!   u32 count  { u64 n  f32 m x n  f32 v x n } x count
//! ```

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{NetError, Network, NetworkConfig};
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"STRC\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("stored config digest does not match the stored config")]
    DigestMismatch,
    #[error("checkpoint config differs from the requested one: {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(net: &Network<f32>, optimizer: Option<&AdamState<f32>>) -> Vec<u8> {
    let config = net.config().to_canonical();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&Sha256::digest(config.as_bytes()));
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    let tensors = net.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, values) in tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        put_f32s(&mut buf, values);
    }
    match optimizer {
        None => buf.push(0),
        Some(adam) => {
            buf.push(1);
            buf.extend_from_slice(&adam.step.to_le_bytes());
            for h in [adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon] {
                buf.extend_from_slice(&h.to_le_bytes());
            }
            buf.extend_from_slice(&(adam.m.len() as u32).to_le_bytes());
            for (m, v) in adam.m.iter().zip(&adam.v) {
                buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
                put_f32s(&mut buf, m);
                put_f32s(&mut buf, v);
            }
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let rest = self.bytes.len() - self.pos;
        if n > rest {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: u64) -> Result<Vec<f32>, CheckpointError> {
        let bytes = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor of {n} elements")))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }
}

/// Decodes a checkpoint. With `expected`, the stored config must equal it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.array::<4>()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let digest = r.array::<32>()?;
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    if Sha256::digest(json).as_slice() != digest {
        return Err(CheckpointError::DigestMismatch);
    }
    let config: NetworkConfig =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    if let Some(want) = expected {
        if want != &config {
            let detail = if want.num_classes != config.num_classes {
                format!("{} classes stored, {} requested", config.num_classes, want.num_classes)
            } else {
                "architecture or seed differs".into()
            };
            return Err(CheckpointError::ConfigMismatch(detail));
        }
    }
    let mut network = Network::build(config)?;
    let count = r.u32()? as usize;
    let mut slots = network.named_tensors_mut();
    if count != slots.len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} tensors stored, the config defines {}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let len = r.u16()? as usize;
        let stored = r.take(len)?;
        if stored != name.as_bytes() {
            return Err(CheckpointError::Malformed(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(stored)
            )));
        }
        let n = r.u64()?;
        if n != slot.len() as u64 {
            return Err(CheckpointError::Malformed(format!("{name} has {n} values, expected {}", slot.len())));
        }
        **slot = r.f32s(n)?;
    }
    drop(slots);
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let hyper = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
            let count = r.u32()? as usize;
            let lengths: Vec<usize> = network.params_mut().iter().map(|p| p.value.len()).collect();
            if count != lengths.len() {
                return Err(CheckpointError::Malformed(format!(
                    "optimizer tracks {count} tensors, the network has {}",
                    lengths.len()
                )));
            }
            let mut adam = AdamState::new(&lengths, hyper[0]);
            (adam.step, adam.beta1, adam.beta2, adam.epsilon) = (step, hyper[1], hyper[2], hyper[3]);
            for (i, &want) in lengths.iter().enumerate() {
                let n = r.u64()?;
                if n != want as u64 {
                    return Err(CheckpointError::Malformed(format!(
                        "optimizer tensor {i} has {n} values, expected {want}"
                    )));
                }
                adam.m[i] = r.f32s(n)?;
                adam.v[i] = r.f32s(n)?;
            }
            Some(adam)
        }
        flag => return Err(CheckpointError::Malformed(format!("optimizer flag {flag}"))),
    };
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { network, optimizer })
}

pub fn save_checkpoint(
    net: &Network<f32>,
    optimizer: Option<&AdamState<f32>>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(net, optimizer))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&NetworkConfig>) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?, expected)
}

/// Hex sha256 of a checkpoint's bytes.
pub fn checkpoint_digest(net: &Network<f32>, optimizer: Option<&AdamState<f32>>) -> String {
    Sha256::digest(encode_checkpoint(net, optimizer))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
