//! `.staract` activation-clip files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "STAR"  u32 version  u32 k  u32 t  u32 h  u32 w  u16 subject  u16 class  u16 repetition
//! f32 x (k * t * h * w)   // (k, t, h, w) row-major
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::VideoSample;
use crate::tensor::{Shape4, Tensor4};

pub const CLIP_MAGIC: &[u8; 4] = b"STAR";
pub const CLIP_VERSION: u32 = 1;
pub const CLIP_EXTENSION: &str = "staract";
const HEADER_LEN: usize = 4 + 4 + 16 + 6;
// larger payloads are rejected before allocating
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, thiserror::Error)]
pub enum ClipFileError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"STAR\"")]
    BadMagic([u8; 4]),
    #[error("unsupported clip format version {0}")]
    Version(u32),
    #[error("declared dimensions {0:?} overflow the element limit")]
    DimensionOverflow([u32; 4]),
    #[error("truncated clip file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("clip file has {0} unexpected trailing bytes")]
    TrailingBytes(u64),
    #[error("clip contains non-finite values")]
    NonFinite,
}

pub fn encode_clip(sample: &VideoSample) -> Result<Vec<u8>, ClipFileError> {
    if !sample.clip.is_finite() {
        return Err(ClipFileError::NonFinite);
    }
    let s = sample.clip.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * s.len());
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in [s.c, s.t, s.h, s.w] {
        let d = u32::try_from(d).map_err(|_| ClipFileError::DimensionOverflow([u32::MAX; 4]))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&sample.subject.to_le_bytes());
    buf.extend_from_slice(&sample.action.to_le_bytes());
    buf.extend_from_slice(&sample.repetition.to_le_bytes());
    for v in sample.clip.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_clip(bytes: &[u8]) -> Result<VideoSample, ClipFileError> {
    let found = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(ClipFileError::Truncated {
            expected: HEADER_LEN as u64,
            found,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != CLIP_MAGIC {
        return Err(ClipFileError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(ClipFileError::Truncated {
            expected: HEADER_LEN as u64,
            found,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let version = u32_at(4);
    if version != CLIP_VERSION {
        return Err(ClipFileError::Version(version));
    }
    let dims = [u32_at(8), u32_at(12), u32_at(16), u32_at(20)];
    let elements = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or(ClipFileError::DimensionOverflow(dims))?;
    let expected = HEADER_LEN as u64 + 4 * elements;
    if found < expected {
        return Err(ClipFileError::Truncated { expected, found });
    }
    if found > expected {
        return Err(ClipFileError::TrailingBytes(found - expected));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let shape = Shape4::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize);
    Ok(VideoSample {
        clip: Tensor4::from_vec(shape, data).expect("length checked against header"),
        subject: u16_at(24),
        action: u16_at(26),
        repetition: u16_at(28),
    })
}

pub fn write_clip(path: impl AsRef<Path>, sample: &VideoSample) -> Result<(), ClipFileError> {
    let bytes = encode_clip(sample)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<VideoSample, ClipFileError> {
    decode_clip(&fs::read(path)?)
}

/// Reads only the header: `(shape, subject, class, repetition)`.
pub fn read_clip_header(path: impl AsRef<Path>) -> Result<(Shape4, u16, u16, u16), ClipFileError> {
    use std::io::Read;
    let mut f = fs::File::open(path)?;
    let mut head = [0u8; HEADER_LEN];
    let n = f.read(&mut head)?;
    if n >= 4 && &head[..4] != CLIP_MAGIC {
        return Err(ClipFileError::BadMagic(head[..4].try_into().unwrap()));
    }
    if n < HEADER_LEN {
        return Err(ClipFileError::Truncated {
            expected: HEADER_LEN as u64,
            found: n as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(head[o..o + 2].try_into().unwrap());
    if u32_at(4) != CLIP_VERSION {
        return Err(ClipFileError::Version(u32_at(4)));
    }
    let shape = Shape4::new(
        u32_at(8) as usize,
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
    );
    Ok((shape, u16_at(24), u16_at(26), u16_at(28)))
}
