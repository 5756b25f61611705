//! Binary model checkpoints (`NAEW`) and optimizer-state sidecars (`NAES`).
//!
//! ```text
//! "NAEW" | version u8 | enc_channels 3xu32 | code_channels u32
//!        | dec_channels 3xu32 | stride_kernel u32 | leaky_slope f32 bits u32
//!        | init_seed u64 | tensor count u32
//!        | per tensor: rank u32, extents rank x u32, data f32...
//! ```
//!
//! All integers and floats are little-endian. Tensors appear in canonical
//! layer order, weight before bias.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AutoencoderParams, Layer, ModelConfig};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"NAEW";
pub const STATE_MAGIC: [u8; 4] = *b"NAES";
pub const VERSION: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn count(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("extent fits in u32"));
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.count(t.shape().len());
        for &d in t.shape() {
            self.count(d);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            format: self.format,
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.malformed(format!("need {n} more bytes, file ends")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn header(&mut self, magic: [u8; 4], what: &'static str) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let version = self.take(1)?[0];
        if version != VERSION {
            return Err(Error::VersionMismatch {
                what,
                found: version,
                expected: VERSION,
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn tensor(&mut self, expected: &[usize]) -> Result<Tensor<f32>> {
        let at = self.pos;
        let rank = self.usize()?;
        if rank > 8 {
            return Err(self.malformed(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        if shape != expected {
            return Err(Error::Malformed {
                format: self.format,
                offset: at,
                reason: format!("tensor shape {shape:?} does not match the configuration ({expected:?})"),
            });
        }
        let data = self.f32s(shape.iter().product())?;
        Tensor::new(shape, data)
    }
}

/// Serializes model parameters.
pub fn to_bytes(params: &AutoencoderParams<f32>) -> Vec<u8> {
    let c = &params.config;
    let mut w = Writer(MODEL_MAGIC.to_vec());
    w.0.push(VERSION);
    for &d in &c.enc_channels {
        w.count(d);
    }
    w.count(c.code_channels);
    for &d in &c.dec_channels {
        w.count(d);
    }
    w.count(c.stride_kernel);
    w.u32((c.leaky_slope as f32).to_bits());
    w.u64(params.init_seed);
    w.count(2 * params.layers.len());
    for l in &params.layers {
        w.tensor(&l.weight);
        w.tensor(&l.bias);
    }
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<AutoencoderParams<f32>> {
    let mut r = Reader { bytes, pos: 0, format: "checkpoint" };
    r.header(MODEL_MAGIC, "checkpoint")?;
    let enc_channels = [r.usize()?, r.usize()?, r.usize()?];
    let code_channels = r.usize()?;
    let dec_channels = [r.usize()?, r.usize()?, r.usize()?];
    let stride_kernel = r.usize()?;
    // shortest decimal form, so that e.g. 0.2 comes back as 0.2 and not 0.2000000029
    let leaky_slope: f64 = f32::from_bits(r.u32()?).to_string().parse().expect("float literal");
    let config = ModelConfig {
        enc_channels,
        code_channels,
        dec_channels,
        leaky_slope,
        stride_kernel,
    };
    config.validate().map_err(|e| r.malformed(e.to_string()))?;
    let init_seed = r.u64()?;
    let specs = config.layer_specs();
    let count = r.usize()?;
    if count != 2 * specs.len() {
        return Err(r.malformed(format!("{count} tensors, configuration needs {}", 2 * specs.len())));
    }
    let layers = specs
        .into_iter()
        .map(|spec| {
            let weight = r.tensor(&spec.weight_shape())?;
            let bias = r.tensor(&[spec.out_channels])?;
            Ok(Layer { spec, weight, bias })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AutoencoderParams { config, init_seed, layers })
}

pub fn save(path: &Path, params: &AutoencoderParams<f32>) -> Result<()> {
    write_atomic(path, &to_bytes(params))
}

pub fn load(path: &Path) -> Result<AutoencoderParams<f32>> {
    from_bytes(&fs::read(path)?)
}

/// Optimizer state needed to resume training after `epochs_done` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub epochs_done: usize,
    pub adam_t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl TrainingState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(STATE_MAGIC.to_vec());
        w.0.push(VERSION);
        w.count(self.epochs_done);
        w.u64(self.adam_t);
        w.count(self.m.len());
        for buf in self.m.iter().chain(&self.v) {
            w.tensor(&Tensor::new(vec![buf.len()], buf.clone()).expect("rank-1 tensor"));
        }
        w.0
    }

    /// Parses a state whose moment buffers must match `lengths`.
    pub fn from_bytes(bytes: &[u8], lengths: &[usize]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, format: "training state" };
        r.header(STATE_MAGIC, "training state")?;
        let epochs_done = r.usize()?;
        let adam_t = r.u64()?;
        let count = r.usize()?;
        if count != lengths.len() {
            return Err(r.malformed(format!("{count} moment buffers, model has {}", lengths.len())));
        }
        let mut read_all = || -> Result<Vec<Vec<f32>>> {
            lengths.iter().map(|&n| Ok(r.tensor(&[n])?.into_data())).collect()
        };
        let m = read_all()?;
        let v = read_all()?;
        Ok(TrainingState { epochs_done, adam_t, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, lengths: &[usize]) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, lengths)
    }
}

/// Sidecar path for the training state that belongs to `checkpoint`.
pub fn state_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".state");
    checkpoint.with_file_name(name)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
