//! `SKDF` feature files: magic, version 1, S, D (u32 LE), then S·D f32 LE
//! values row-major.

use std::path::Path;

use skd_core::features::FeatureSequence;

use crate::binio::{put_len, put_u32, read, write_atomic, Reader};
use crate::error::Result;

const MAGIC: &[u8; 4] = b"SKDF";
const VERSION: u32 = 1;

pub fn encode(features: &FeatureSequence) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * features.frames().len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_len(&mut out, features.num_frames())?;
    put_len(&mut out, features.dim())?;
    for v in features.frames() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(path: &Path, bytes: &[u8], id: &str) -> Result<FeatureSequence> {
    let mut r = Reader::new(path, bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let shape_at = r.pos();
    let s = r.u32("frame count")? as usize;
    let d = r.u32("dimension")? as usize;
    if s == 0 || d == 0 {
        return Err(r.error(shape_at, format!("shape {s}x{d}, expected both at least 1")));
    }
    let frames = r.f32s(s * d, "frames")?;
    r.finish()?;
    FeatureSequence::new(id, s, d, frames).map_err(|e| r.error(shape_at, e.to_string()))
}

pub fn write(path: &Path, features: &FeatureSequence) -> Result<()> {
    write_atomic(path, &encode(features)?)
}

pub fn read_features(path: &Path, id: &str) -> Result<FeatureSequence> {
    decode(path, &read(path)?, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::SkdError;

    fn p() -> &'static Path {
        Path::new("x.skdf")
    }

    #[test]
    fn round_trip_is_exact() {
        let f = FeatureSequence::new("a", 2, 3, vec![0.1, -2.5, 1e-30, 3.0, f32::MAX, -0.0]).unwrap();
        let back = decode(p(), &encode(&f).unwrap(), "a").unwrap();
        assert_eq!(back.frames().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   f.frames().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!((back.num_frames(), back.dim()), (2, 3));
    }

    #[test]
    fn minimal_file_is_valid() {
        let f = FeatureSequence::new("a", 1, 1, vec![4.0]).unwrap();
        let bytes = encode(&f).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode(p(), &bytes, "a").unwrap(), f);
    }

    #[test]
    fn truncation_names_byte_counts() {
        let f = FeatureSequence::new("a", 2, 2, vec![1.0; 4]).unwrap();
        let bytes = encode(&f).unwrap();
        let err = decode(p(), &bytes[..bytes.len() - 3], "a").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 16 bytes, 13 available"), "{msg}");
        assert!(matches!(err, SkdError::Format { offset: 16, .. }));
    }

    #[test]
    fn bad_header_is_rejected_with_offset() {
        let f = FeatureSequence::new("a", 1, 1, vec![4.0]).unwrap();
        let mut bytes = encode(&f).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(p(), &bytes, "a"), Err(SkdError::Format { offset: 0, .. })));
        let mut bytes = encode(&f).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode(p(), &bytes, "a"), Err(SkdError::Format { offset: 4, .. })));
        let mut bytes = encode(&f).unwrap();
        bytes[8] = 0;
        assert!(matches!(decode(p(), &bytes, "a"), Err(SkdError::Format { offset: 8, .. })));
    }
}
