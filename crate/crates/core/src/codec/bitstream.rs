//! The `NIC1` container: a fixed 15-byte big-endian header followed by the
//! arithmetic-coded payload.
//!
//! ```text
//! offset size field
//!      0    4 magic "NIC1"
//!      4    1 version
//!      5    2 original width  (u16 BE)
//!      7    2 original height (u16 BE)
//!      9    1 code channels
//!     10    1 log2 of the spatial down-sampling factor (3)
//!     11    4 payload length  (u32 BE)
//!     15    n payload
//! ```

use crate::error::{Error, Result};
use crate::model::DOWNSAMPLE_LOG2;

pub const MAGIC: [u8; 4] = *b"NIC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub orig_width: u16,
    pub orig_height: u16,
    pub code_channels: u8,
    pub downsample_log2: u8,
}

impl Header {
    pub fn new(orig_width: u16, orig_height: u16, code_channels: u8) -> Self {
        Header {
            version: VERSION,
            orig_width,
            orig_height,
            code_channels,
            downsample_log2: DOWNSAMPLE_LOG2,
        }
    }

    fn factor(&self) -> usize {
        1 << self.downsample_log2
    }

    /// Latent height, `ceil(orig_height / 8)`.
    pub fn latent_height(&self) -> usize {
        (self.orig_height as usize).div_ceil(self.factor())
    }

    /// Latent width, `ceil(orig_width / 8)`.
    pub fn latent_width(&self) -> usize {
        (self.orig_width as usize).div_ceil(self.factor())
    }

    pub fn latent_bits(&self) -> usize {
        self.code_channels as usize * self.latent_height() * self.latent_width()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    /// Bits per pixel of the whole stream, header included.
    pub fn bpp(&self) -> f64 {
        8.0 * self.byte_len() as f64 / (self.header.orig_width as f64 * self.header.orig_height as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(h.version);
        out.extend_from_slice(&h.orig_width.to_be_bytes());
        out.extend_from_slice(&h.orig_height.to_be_bytes());
        out.push(h.code_channels);
        out.push(h.downsample_log2);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses a stream; bytes past `payload_len` are ignored.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedStream);
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedStream);
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(Error::VersionMismatch {
                what: "bitstream",
                found: version,
                expected: VERSION,
            });
        }
        let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let header = Header {
            version,
            orig_width: be16(5),
            orig_height: be16(7),
            code_channels: bytes[9],
            downsample_log2: bytes[10],
        };
        if header.downsample_log2 != DOWNSAMPLE_LOG2 {
            return Err(Error::Incompatible(format!(
                "down-sampling log2 {} (expected {DOWNSAMPLE_LOG2})",
                header.downsample_log2
            )));
        }
        if header.orig_width == 0 || header.orig_height == 0 {
            return Err(Error::Incompatible("zero image dimension in header".into()));
        }
        let payload_len = u32::from_be_bytes(bytes[11..15].try_into().expect("4 bytes")) as usize;
        let payload = bytes
            .get(HEADER_LEN..HEADER_LEN + payload_len)
            .ok_or(Error::TruncatedStream)?
            .to_vec();
        Ok(Bitstream { header, payload })
    }
}
