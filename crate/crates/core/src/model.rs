//! Convolutional autoencoder: three downsampling blocks plus a 1x1 sigmoid
//! projection on the encoder side, mirrored with transposed convolutions on
//! the decoder side. Every block is followed by a bottleneck residual block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Total spatial down-sampling factor of the encoder (three stride-2 stages).
pub const DOWNSAMPLE: usize = 8;
pub const DOWNSAMPLE_LOG2: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_channels: [usize; 3],
    pub code_channels: usize,
    pub dec_channels: [usize; 3],
    pub leaky_slope: f64,
    /// Kernel size of the strided convolutions and transposed convolutions.
    pub stride_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::production()
    }
}

impl ModelConfig {
    pub fn production() -> Self {
        ModelConfig {
            enc_channels: [64, 128, 192],
            code_channels: 16,
            dec_channels: [192, 128, 64],
            leaky_slope: 0.2,
            stride_kernel: 4,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            enc_channels: [16, 32, 48],
            code_channels: 8,
            dec_channels: [48, 32, 16],
            leaky_slope: 0.2,
            stride_kernel: 4,
        }
    }

    /// Smallest useful configuration; used for gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            enc_channels: [8, 8, 8],
            code_channels: 4,
            dec_channels: [8, 8, 8],
            leaky_slope: 0.2,
            stride_kernel: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .enc_channels
            .iter()
            .chain(&self.dec_channels)
            .chain(std::iter::once(&self.code_channels));
        for &c in all {
            if c < 4 || c % 4 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "channel count {c} must be a positive multiple of 4"
                )));
            }
        }
        if self.stride_kernel < 2 || !self.stride_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "stride_kernel {} must be even and at least 2",
                self.stride_kernel
            )));
        }
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "leaky_slope {} must be finite and non-negative",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Padding that makes a stride-2 convolution halve extents exactly.
    pub fn stride_padding(&self) -> usize {
        (self.stride_kernel - 2) / 2
    }

    /// Canonical layer order shared by initialization, forward passes and checkpoints.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let k = self.stride_kernel;
        let pad = self.stride_padding();
        let mut specs = Vec::new();
        let push_res = |specs: &mut Vec<LayerSpec>, prefix: &str, c: usize, part: Partition| {
            let q = c / 4;
            for (i, (cin, cout, kk, p)) in [(c, q, 1, 0), (q, q, 3, 1), (q, c, 1, 0)].into_iter().enumerate() {
                specs.push(LayerSpec {
                    name: format!("{prefix}.res.{i}"),
                    part,
                    kind: LayerKind::Conv,
                    in_channels: cin,
                    out_channels: cout,
                    kernel: kk,
                    stride: 1,
                    padding: p,
                });
            }
        };

        let mut cin = 3;
        for (i, &c) in self.enc_channels.iter().enumerate() {
            specs.push(LayerSpec {
                name: format!("enc.{i}.down"),
                part: Partition::Encoder,
                kind: LayerKind::Conv,
                in_channels: cin,
                out_channels: c,
                kernel: k,
                stride: 2,
                padding: pad,
            });
            push_res(&mut specs, &format!("enc.{i}"), c, Partition::Encoder);
            cin = c;
        }
        specs.push(LayerSpec::pointwise("enc.proj", Partition::Encoder, cin, self.code_channels));

        let mut cin = self.code_channels;
        for (i, &c) in self.dec_channels.iter().enumerate() {
            specs.push(LayerSpec {
                name: format!("dec.{i}.up"),
                part: Partition::Decoder,
                kind: LayerKind::Deconv,
                in_channels: cin,
                out_channels: c,
                kernel: k,
                stride: 2,
                padding: pad,
            });
            push_res(&mut specs, &format!("dec.{i}"), c, Partition::Decoder);
            cin = c;
        }
        specs.push(LayerSpec::pointwise("dec.proj", Partition::Decoder, cin, 3));
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub part: Partition,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    fn pointwise(name: &str, part: Partition, cin: usize, cout: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            part,
            kind: LayerKind::Conv,
            in_channels: cin,
            out_channels: cout,
            kernel: 1,
            stride: 1,
            padding: 0,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv => vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            LayerKind::Deconv => vec![self.in_channels, self.out_channels, self.kernel, self.kernel],
        }
    }

    /// Variance gain of the initializer: 2 for convolutions fed by a leaky
    /// ReLU (residual branches), 1 for those fed by linear inputs.
    pub fn init_gain(&self) -> f64 {
        if self.name.contains(".res.") {
            2.0
        } else {
            1.0
        }
    }

    /// Standard deviation of the initial weights, `sqrt(gain / fan_in)`.
    pub fn init_std(&self) -> f64 {
        (self.init_gain() / self.fan_in()).sqrt()
    }

    /// Inputs contributing to one output value.
    pub fn fan_in(&self) -> f64 {
        let taps = (self.in_channels * self.kernel * self.kernel) as f64;
        match self.kind {
            LayerKind::Conv => taps,
            LayerKind::Deconv => taps / (self.stride * self.stride) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// All learnable tensors of the autoencoder in canonical layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderParams<T> {
    pub config: ModelConfig,
    pub init_seed: u64,
    pub layers: Vec<Layer<T>>,
}

/// Weights drawn from U(-a, a) with a = sqrt(3) * [`LayerSpec::init_std`];
/// biases start at zero.
pub fn init_params<T: Float>(config: &ModelConfig, seed: u64) -> Result<AutoencoderParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = config
        .layer_specs()
        .into_iter()
        .map(|spec| {
            let bound = 3f64.sqrt() * spec.init_std();
            let shape = spec.weight_shape();
            let weight = Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound)));
            let bias = Tensor::zeros(&[spec.out_channels]);
            Layer { spec, weight, bias }
        })
        .collect();
    Ok(AutoencoderParams {
        config: config.clone(),
        init_seed: seed,
        layers,
    })
}

impl<T: Float> AutoencoderParams<T> {
    pub fn cast<U: Float>(&self) -> AutoencoderParams<U> {
        AutoencoderParams {
            config: self.config.clone(),
            init_seed: self.init_seed,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weight and bias tensors of the selected partitions, in canonical order.
    pub fn tensors(&self, parts: &[Partition]) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .filter(|l| parts.contains(&l.spec.part))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self, parts: &[Partition]) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .filter(|l| parts.contains(&l.spec.part))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records every parameter on `tape`; partitions listed in `trainable`
    /// become gradient-tracked leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: &[Partition]) -> Bound {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                let grad = trainable.contains(&l.spec.part);
                (tape.leaf(l.weight.clone(), grad), tape.leaf(l.bias.clone(), grad))
            })
            .collect();
        Bound {
            vars,
            parts: self.layers.iter().map(|l| l.spec.part).collect(),
        }
    }

    /// Records only the encoder layers, as constants. This is the frozen
    /// feature extractor used by the cycle loss.
    pub fn bind_frozen_encoder(&self, tape: &mut Tape<T>) -> Bound {
        let (vars, parts) = self
            .layers
            .iter()
            .filter(|l| l.spec.part == Partition::Encoder)
            .map(|l| {
                (
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())),
                    l.spec.part,
                )
            })
            .unzip();
        Bound { vars, parts }
    }
}

/// Tape variables for each layer, in canonical order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<(Var, Var)>,
    parts: Vec<Partition>,
}

impl Bound {
    fn layers(&self, part: Partition) -> &[(Var, Var)] {
        let start = self.parts.iter().position(|&p| p == part).unwrap_or(self.parts.len());
        let len = self.parts[start..].iter().take_while(|&&p| p == part).count();
        &self.vars[start..start + len]
    }

    /// Gradients of every bound layer, in the same order as [`AutoencoderParams::tensors`].
    pub fn grads<T: Float>(&self, tape: &Tape<T>, parts: &[Partition]) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .zip(&self.parts)
            .filter(|(_, p)| parts.contains(p))
            .flat_map(|(&(w, b), _)| [w, b])
            .map(|v| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
            })
            .collect()
    }
}

/// `x + f(x)` with `f` = lrelu -> 1x1 (C/4) -> lrelu -> 3x3 (C/4) -> lrelu -> 1x1 (C).
pub fn residual_block<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    layers: &[(Var, Var)],
    slope: T,
) -> Result<Var> {
    let c = tape.shape(x).get(1).copied().unwrap_or(0);
    if c % 4 != 0 || c == 0 {
        return Err(Error::InvalidShape {
            op: "residual_block",
            reason: format!("channel count {c} is not a positive multiple of 4"),
        });
    }
    let mut h = x;
    for (&(w, b), pad) in layers.iter().zip([0, 1, 0]) {
        let a = tape.leaky_relu(h, slope);
        h = tape.conv2d(a, w, b, 1, pad)?;
    }
    tape.add(x, h)
}

fn check_image(shape: &[usize], op: &'static str) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::InvalidShape {
            op,
            reason: format!("expected an [N, 3, H, W] image, got {shape:?}"),
        });
    }
    if shape[2] == 0 || shape[3] == 0 || !shape[2].is_multiple_of(DOWNSAMPLE) || !shape[3].is_multiple_of(DOWNSAMPLE) {
        return Err(Error::InvalidShape {
            op,
            reason: format!(
                "image extents {}x{} must be positive multiples of {DOWNSAMPLE}",
                shape[2], shape[3]
            ),
        });
    }
    Ok(())
}

/// Pre-binarization code `c` in (0, 1), shape `[N, C, H/8, W/8]`.
pub fn encode_features<T: Float>(
    tape: &mut Tape<T>,
    image: Var,
    bound: &Bound,
    config: &ModelConfig,
) -> Result<Var> {
    check_image(tape.shape(image), "encode_features")?;
    let layers = bound.layers(Partition::Encoder);
    let slope = T::of(config.leaky_slope);
    let pad = config.stride_padding();
    let mut h = image;
    for block in layers[..12].chunks(4) {
        let (w, b) = block[0];
        h = tape.conv2d(h, w, b, 2, pad)?;
        h = residual_block(tape, h, &block[1..], slope)?;
    }
    let (w, b) = layers[12];
    let logits = tape.conv2d(h, w, b, 1, 0)?;
    Ok(tape.sigmoid(logits))
}

/// Reconstruction in (0, 1), shape `[N, 3, 8h, 8w]`.
pub fn decode<T: Float>(tape: &mut Tape<T>, code: Var, bound: &Bound, config: &ModelConfig) -> Result<Var> {
    let shape = tape.shape(code);
    if shape.len() != 4 || shape[1] != config.code_channels {
        return Err(Error::InvalidShape {
            op: "decode",
            reason: format!("expected [N, {}, h, w] code, got {shape:?}", config.code_channels),
        });
    }
    let layers = bound.layers(Partition::Decoder);
    let slope = T::of(config.leaky_slope);
    let pad = config.stride_padding();
    let mut h = code;
    for block in layers[..12].chunks(4) {
        let (w, b) = block[0];
        h = tape.conv2d_transpose(h, w, b, 2, pad)?;
        h = residual_block(tape, h, &block[1..], slope)?;
    }
    let (w, b) = layers[12];
    let logits = tape.conv2d(h, w, b, 1, 0)?;
    Ok(tape.sigmoid(logits))
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub code_pre: Var,
    pub code_bin: Var,
    pub recon: Var,
}

/// Encoder, straight-through binarization, decoder.
pub fn forward_train<T: Float>(
    tape: &mut Tape<T>,
    image: Var,
    bound: &Bound,
    config: &ModelConfig,
) -> Result<Forward> {
    let code_pre = encode_features(tape, image, bound, config)?;
    let code_bin = tape.ste_round(code_pre);
    let recon = decode(tape, code_bin, bound, config)?;
    Ok(Forward { code_pre, code_bin, recon })
}

/// Same values as [`encode_features`], but the encoder weights enter the
/// graph as constants; gradients still flow to `image`.
pub fn encode_frozen<T: Float>(
    tape: &mut Tape<T>,
    image: Var,
    params: &AutoencoderParams<T>,
) -> Result<Var> {
    let frozen = params.bind_frozen_encoder(tape);
    encode_features(tape, image, &frozen, &params.config)
}

/// Runs the encoder without gradient tracking and binarizes the result.
pub fn encode_binary<T: Float>(params: &AutoencoderParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &[]);
    let x = tape.constant(image.clone());
    let c = encode_features(&mut tape, x, &bound, &params.config)?;
    let bin = tape.ste_round(c);
    Ok(tape.value(bin).clone())
}

/// Runs the decoder without gradient tracking.
pub fn decode_code<T: Float>(params: &AutoencoderParams<T>, code: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &[]);
    let c = tape.constant(code.clone());
    let r = decode(&mut tape, c, &bound, &params.config)?;
    Ok(tape.value(r).clone())
}
