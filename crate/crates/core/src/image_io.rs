//! 8-bit RGB images: binary PPM (P6) and PNG files, conversion to and from
//! `[3, H, W]` tensors in [0, 1], and the planar crop/pad/flip helpers used by
//! the data pipeline and the codec.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::InvalidShape {
                op: "image",
                reason: format!("{width}x{height} RGB needs {} bytes, got {}", 3 * width * height, pixels.len()),
            });
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Planar `[3, H, W]` tensor with values `byte / 255`.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let scale = T::of(1.0 / 255.0);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            T::of(self.pixels[3 * p + c] as f64) * scale
        })
    }

    /// Quantizes a `[3, H, W]` or `[1, 3, H, W]` tensor: `round(x * 255)` clamped to [0, 255].
    pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [3, h, w] | [1, 3, h, w] => (*h, *w),
            _ => {
                return Err(Error::InvalidShape {
                    op: "image",
                    reason: format!("expected a [3, H, W] tensor, got {s:?}"),
                })
            }
        };
        let data = t.data();
        let mut pixels = vec![0u8; 3 * h * w];
        for (i, px) in pixels.iter_mut().enumerate() {
            let (p, c) = (i / 3, i % 3);
            *px = quantize(data[c * h * w + p].as_f64());
        }
        Ok(RgbImage { width: w, height: h, pixels })
    }
}

/// `round(x * 255)` clamped to [0, 255]; NaN maps to 0.
pub fn quantize(x: f64) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct PpmHeader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PpmHeader<'_> {
    fn malformed(offset: usize, reason: impl Into<String>) -> Error {
        Error::Malformed {
            format: "PPM",
            offset,
            reason: reason.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn field(&mut self, name: &str) -> Result<(usize, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Self::malformed(start, format!("expected {name}")));
        }
        let value = std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Self::malformed(start, format!("{name} out of range")))?;
        Ok((value, start))
    }
}

/// Parses a binary PPM with maxval 255. Header comments are accepted.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if !bytes.starts_with(b"P6") {
        return Err(PpmHeader::malformed(0, "missing P6 magic"));
    }
    let mut hdr = PpmHeader { bytes, pos: 2 };
    let (width, at) = hdr.field("width")?;
    if width == 0 {
        return Err(PpmHeader::malformed(at, "zero width"));
    }
    let (height, at) = hdr.field("height")?;
    if height == 0 {
        return Err(PpmHeader::malformed(at, "zero height"));
    }
    let (maxval, at) = hdr.field("maxval")?;
    if maxval != 255 {
        return Err(PpmHeader::malformed(at, format!("maxval {maxval} unsupported (only 255)")));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PpmHeader::malformed(hdr.pos, "expected whitespace before pixel data"));
    }
    let data = &bytes[hdr.pos + 1..];
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| PpmHeader::malformed(at, "dimensions too large"))?;
    if data.len() < expected {
        return Err(Error::TruncatedPixels {
            format: "PPM",
            expected,
            actual: data.len(),
        });
    }
    RgbImage::new(width, height, data[..expected].to_vec())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let w = u32::try_from(img.width).map_err(|_| Error::Png("width too large".into()))?;
    let h = u32::try_from(img.height).map_err(|_| Error::Png("height too large".into()))?;
    let mut enc = png::Encoder::new(&mut out, w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&img.pixels).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(out)
}

/// Decodes any PNG to 8-bit RGB: alpha dropped, gray expanded, 16-bit stripped.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let png_err = |e: png::DecodingError| Error::Png(e.to_string());
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Png("palette was not expanded".into())),
    };
    let mut pixels = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..][..w * channels];
        for px in row.chunks_exact(channels) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
    }
    RgbImage::new(w, h, pixels)
}

fn is_png_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a PPM or PNG file, sniffing the format from its magic bytes.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

/// Writes PNG for a `.png` extension and binary PPM otherwise.
pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = if is_png_path(path) { encode_png(img)? } else { encode_ppm(img) };
    fs::write(path, bytes)?;
    Ok(())
}

/// Files with a `.ppm`, `.pnm` or `.png` extension directly inside `dir`,
/// sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("ppm" | "pnm" | "png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Index into `[0, n)` mirrored about the edges without repeating them.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads a `[C, H, W]` tensor.
pub fn pad_reflect<T: Float>(t: &Tensor<T>, top: usize, bottom: usize, left: usize, right: usize) -> Tensor<T> {
    let [c, h, w] = planar_dims(t);
    let (nh, nw) = (h + top + bottom, w + left + right);
    let data = t.data();
    Tensor::from_fn(&[c, nh, nw], |i| {
        let (ch, y, x) = (i / (nh * nw), (i / nw) % nh, i % nw);
        let sy = reflect_index(y as isize - top as isize, h);
        let sx = reflect_index(x as isize - left as isize, w);
        data[(ch * h + sy) * w + sx]
    })
}

/// Reflect-pads the bottom and right edges up to multiples of `m`.
pub fn pad_to_multiple<T: Float>(t: &Tensor<T>, m: usize) -> Tensor<T> {
    let [_, h, w] = planar_dims(t);
    pad_reflect(t, 0, h.next_multiple_of(m) - h, 0, w.next_multiple_of(m) - w)
}

/// The `[C, h, w]` window of a `[C, H, W]` tensor at `(y, x)`.
pub fn crop<T: Float>(t: &Tensor<T>, y: usize, x: usize, h: usize, w: usize) -> Tensor<T> {
    let [c, sh, sw] = planar_dims(t);
    assert!(y + h <= sh && x + w <= sw, "crop window out of bounds");
    let data = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, yy, xx) = (i / (h * w), (i / w) % h, i % w);
        data[(ch * sh + y + yy) * sw + x + xx]
    })
}

/// Mirrors every row of a `[.., W]` tensor in place.
pub fn flip_horizontal<T: Float>(t: &mut Tensor<T>) {
    let w = *t.shape().last().expect("non-scalar tensor");
    if w > 0 {
        t.data_mut().chunks_exact_mut(w).for_each(<[T]>::reverse);
    }
}

fn planar_dims<T: Float>(t: &Tensor<T>) -> [usize; 3] {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => [c, h, w],
        ref s => panic!("expected a [C, H, W] tensor, got {s:?}"),
    }
}
