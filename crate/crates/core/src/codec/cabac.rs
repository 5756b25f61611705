//! Context-adaptive binary arithmetic coding of binary latent codes.
//!
//! Bits are scanned channel-major, then row-major. Each bit is coded with a
//! range coder (32-bit range, byte-wise renormalization with carry
//! propagation) under an adaptive Krichevsky-Trofimov estimate selected by
//! `(channel, left neighbour, top neighbour)`.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

const PROB_BITS: u32 = 16;
const PROB_ONE: u64 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

/// A binarized latent: `channels * height * width` bits, each 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    bits: Vec<u8>,
}

impl CodeTensor {
    pub fn new(channels: usize, height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != channels * height * width {
            return Err(Error::InvalidShape {
                op: "code tensor",
                reason: format!(
                    "{channels}x{height}x{width} code needs {} bits, got {}",
                    channels * height * width,
                    bits.len()
                ),
            });
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::InvalidShape {
                op: "code tensor",
                reason: format!("value {} at index {pos} is not binary", bits[pos]),
            });
        }
        Ok(CodeTensor { channels, height, width, bits })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        CodeTensor {
            channels,
            height,
            width,
            bits: vec![0; channels * height * width],
        }
    }

    /// From a `[1, C, h, w]` tensor whose values are exactly 0 or 1.
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::InvalidShape {
                op: "code tensor",
                reason: format!("expected a [1, C, h, w] code, got {s:?}"),
            });
        }
        let mut bits = Vec::with_capacity(t.len());
        for (i, &v) in t.data().iter().enumerate() {
            bits.push(if v == T::zero() {
                0
            } else if v == T::one() {
                1
            } else {
                return Err(Error::InvalidShape {
                    op: "code tensor",
                    reason: format!("value {v} at index {i} is not binary"),
                });
            });
        }
        Ok(CodeTensor { channels: s[1], height: s[2], width: s[3], bits })
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.channels, self.height, self.width],
            self.bits.iter().map(|&b| T::of(b as f64)).collect(),
        )
        .expect("length checked at construction")
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Fraction of ones.
    pub fn activation_rate(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.bits.iter().map(|&b| b as usize).sum::<usize>() as f64 / self.bits.len() as f64
    }

    fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.bits[(c * self.height + y) * self.width + x]
    }

    fn neighbours(&self, c: usize, y: usize, x: usize) -> (u8, u8) {
        let left = if x > 0 { self.get(c, y, x - 1) } else { 0 };
        let top = if y > 0 { self.get(c, y - 1, x) } else { 0 };
        (left, top)
    }
}

pub fn context_index(channel: usize, left_bit: u8, top_bit: u8) -> usize {
    channel * 4 + 2 * left_bit as usize + top_bit as usize
}

/// Adaptive per-context bit counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextModel {
    counts: Vec<[u32; 2]>,
}

impl ContextModel {
    pub fn new(channels: usize) -> Self {
        ContextModel {
            counts: vec![[0, 0]; 4 * channels],
        }
    }

    pub fn counts(&self) -> &[[u32; 2]] {
        &self.counts
    }

    /// Krichevsky-Trofimov estimate `(n1 + 1/2) / (n0 + n1 + 1)`.
    pub fn p1(&self, ctx: usize) -> f64 {
        let [n0, n1] = self.counts[ctx];
        (n1 as f64 + 0.5) / (n0 as f64 + n1 as f64 + 1.0)
    }

    /// Probability of a zero bit in units of 2^-16, kept inside (0, 1).
    fn p0_fixed(&self, ctx: usize) -> u32 {
        let [n0, n1] = self.counts[ctx];
        let num = (2 * n0 as u64 + 1) << PROB_BITS;
        let den = 2 * (n0 as u64 + n1 as u64 + 1);
        (num / den).clamp(1, PROB_ONE - 1) as u32
    }

    fn update(&mut self, ctx: usize, bit: u8) {
        let c = &mut self.counts[ctx][bit as usize];
        *c = c.saturating_add(1);
    }
}

struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn encode(&mut self, bit: u8, p0: u32) {
        let bound = (self.range >> PROB_BITS) * p0;
        if bit == 0 {
            self.range = bound;
        } else {
            self.low += bound as u64;
            self.range -= bound;
        }
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or(Error::TruncatedStream)?;
        self.pos += 1;
        Ok(b)
    }

    fn decode(&mut self, p0: u32) -> Result<u8> {
        let bound = (self.range >> PROB_BITS) * p0;
        let bit = if self.code < bound {
            self.range = bound;
            0
        } else {
            self.code -= bound;
            self.range -= bound;
            1
        };
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(bit)
    }
}

/// Encodes `code` and returns the payload with the final context state.
pub fn encode_with_model(code: &CodeTensor) -> (Vec<u8>, ContextModel) {
    let mut model = ContextModel::new(code.channels);
    let mut enc = RangeEncoder::new();
    for c in 0..code.channels {
        for y in 0..code.height {
            for x in 0..code.width {
                let (left, top) = code.neighbours(c, y, x);
                let ctx = context_index(c, left, top);
                let bit = code.get(c, y, x);
                enc.encode(bit, model.p0_fixed(ctx));
                model.update(ctx, bit);
            }
        }
    }
    (enc.finish(), model)
}

pub fn cabac_encode(code: &CodeTensor) -> Vec<u8> {
    encode_with_model(code).0
}

/// Decodes a `channels x height x width` code and returns the final context state.
pub fn decode_with_model(
    payload: &[u8],
    channels: usize,
    height: usize,
    width: usize,
) -> Result<(CodeTensor, ContextModel)> {
    let mut model = ContextModel::new(channels);
    let mut dec = RangeDecoder::new(payload)?;
    let mut code = CodeTensor::zeros(channels, height, width);
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let (left, top) = code.neighbours(c, y, x);
                let ctx = context_index(c, left, top);
                let bit = dec.decode(model.p0_fixed(ctx))?;
                model.update(ctx, bit);
                code.bits[(c * height + y) * width + x] = bit;
            }
        }
    }
    Ok((code, model))
}

pub fn cabac_decode(payload: &[u8], channels: usize, height: usize, width: usize) -> Result<CodeTensor> {
    Ok(decode_with_model(payload, channels, height, width)?.0)
}
