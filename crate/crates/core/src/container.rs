//! Compressed-image file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MSIC" | version u8 | H0 u16 | W0 u16 | padded H u16 | padded W u16
//! | M u8 | C(1)..C(M) u8 | N u8 | K u8 | dropped u8 | model digest u64
//! | payload length u32 | payload bytes
//! ```
//!
//! The digest ties a stream to the model that produced it; decoding with a
//! different model is refused. Full byte-for-byte documentation lives in
//! docs/format.md.

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"MSIC";
pub const CONTAINER_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub original_height: u16,
    pub original_width: u16,
    pub padded_height: u16,
    pub padded_width: u16,
    pub channels: Vec<u8>,
    pub n_levels: u8,
    pub k_blocks: u8,
    pub dropped_blocks: u8,
    pub model_digest: u64,
    pub payload_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedImage {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Header {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONTAINER_VERSION {
            return Err(Error::format(format!("unsupported container version {}", self.version)));
        }
        if self.channels.is_empty() || self.channels.len() > 255 {
            return Err(Error::format("scale count out of range"));
        }
        if self.padded_height < self.original_height || self.padded_width < self.original_width {
            return Err(Error::format("padded dims smaller than original dims"));
        }
        if self.original_height == 0 || self.original_width == 0 {
            return Err(Error::format("zero image dims"));
        }
        if self.n_levels < 2 {
            return Err(Error::format("level count below 2"));
        }
        Ok(())
    }

    pub fn byte_len(&self) -> usize {
        4 + 1 + 2 * 4 + 1 + self.channels.len() + 1 + 1 + 1 + 8 + 4
    }
}

/// Serializes header followed by payload. The header's payload length must
/// already match the payload.
pub fn write_container(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    header.validate()?;
    if header.payload_len as usize != payload.len() {
        return Err(Error::format(format!(
            "header declares {} payload bytes but {} were provided",
            header.payload_len,
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(header.byte_len() + payload.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.push(header.version);
    out.extend_from_slice(&header.original_height.to_le_bytes());
    out.extend_from_slice(&header.original_width.to_le_bytes());
    out.extend_from_slice(&header.padded_height.to_le_bytes());
    out.extend_from_slice(&header.padded_width.to_le_bytes());
    out.push(header.channels.len() as u8);
    out.extend_from_slice(&header.channels);
    out.push(header.n_levels);
    out.push(header.k_blocks);
    out.push(header.dropped_blocks);
    out.extend_from_slice(&header.model_digest.to_le_bytes());
    out.extend_from_slice(&header.payload_len.to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt("container truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a container, rejecting malformed or truncated input without ever
/// reading past declared lengths.
pub fn read_container(bytes: &[u8]) -> Result<CompressedImage> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CONTAINER_MAGIC {
        return Err(Error::format("bad container magic"));
    }
    let version = c.u8()?;
    let original_height = c.u16()?;
    let original_width = c.u16()?;
    let padded_height = c.u16()?;
    let padded_width = c.u16()?;
    let m = c.u8()? as usize;
    let channels = c.take(m)?.to_vec();
    let n_levels = c.u8()?;
    let k_blocks = c.u8()?;
    let dropped_blocks = c.u8()?;
    let model_digest = c.u64()?;
    let payload_len = c.u32()?;
    let header = Header {
        version,
        original_height,
        original_width,
        padded_height,
        padded_width,
        channels,
        n_levels,
        k_blocks,
        dropped_blocks,
        model_digest,
        payload_len,
    };
    header.validate()?;
    let payload = c.take(payload_len as usize)?.to_vec();
    if c.pos != bytes.len() {
        return Err(Error::corrupt(format!(
            "{} trailing bytes after declared payload",
            bytes.len() - c.pos
        )));
    }
    Ok(CompressedImage { header, payload })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn toy_header(payload_len: u32) -> Header {
        Header {
            version: 1,
            original_height: 60,
            original_width: 61,
            padded_height: 64,
            padded_width: 64,
            channels: vec![1, 2, 4, 8],
            n_levels: 7,
            k_blocks: 4,
            dropped_blocks: 0,
            model_digest: 0x0123456789abcdef,
            payload_len,
        }
    }

    #[test]
    fn golden_empty_payload_bytes() {
        let bytes = write_container(&toy_header(0), &[]).unwrap();
        let expect: Vec<u8> = vec![
            b'M', b'S', b'I', b'C', // magic
            1,    // version
            60, 0, 61, 0, // original dims
            64, 0, 64, 0, // padded dims
            4, // M
            1, 2, 4, 8, // channels
            7, // N
            4, // K
            0, // dropped
            0xef, 0xcd, 0xab, 0x89, 0x67, 0x45, 0x23, 0x01, // digest LE
            0, 0, 0, 0, // payload length
        ];
        assert_eq!(bytes, expect);
    }

    #[test]
    fn round_trip() {
        let payload: Vec<u8> = (0..37).map(|v| (v * 11) as u8).collect();
        let bytes = write_container(&toy_header(37), &payload).unwrap();
        let back = read_container(&bytes).unwrap();
        assert_eq!(back.header, toy_header(37));
        assert_eq!(back.payload, payload);
    }

    #[test]
    fn payload_length_mismatch_refused() {
        assert!(write_container(&toy_header(5), &[1, 2, 3]).is_err());
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let bytes = write_container(&toy_header(3), &[9, 9, 9]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&bad), Err(Error::Format(_))));
        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(read_container(truncated), Err(Error::Corrupt(_))));
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(read_container(&extended).is_err());
    }

    #[test]
    fn fuzz_never_panics() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for _ in 0..100_000 {
            let len = rng.gen_range(0..64);
            let mut bytes = vec![0u8; len];
            rng.fill(&mut bytes[..]);
            // Bias some cases toward a valid prefix to reach deeper paths.
            if len >= 4 && rng.gen_bool(0.3) {
                bytes[..4].copy_from_slice(CONTAINER_MAGIC);
                if len >= 5 {
                    bytes[4] = 1;
                }
            }
            let _ = read_container(&bytes);
        }
    }
}
