//! Training objectives: the sparsity-driven compression objective, MSE,
//! MS-SSIM, the code-domain cycle loss, and their weighted combinations.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{encode_features, AutoencoderParams};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Guards both denominators of the compression objective.
pub const COMPRESSION_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// MSE + compression.
    MseOnly,
    /// MSE + MS-SSIM + compression.
    MseMsssim,
    /// MSE + MS-SSIM + cycle + compression.
    MseMsssimCycle,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::MseOnly => "mse",
            LossMode::MseMsssim => "mse_msssim",
            LossMode::MseMsssimCycle => "mse_msssim_cycle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" | "mse_only" => Some(LossMode::MseOnly),
            "mse_msssim" => Some(LossMode::MseMsssim),
            "mse_msssim_cycle" => Some(LossMode::MseMsssimCycle),
            _ => None,
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the squeezing term inside the compression objective.
    pub alpha: f64,
    /// Weight of the compression objective.
    pub gamma: f64,
    pub lambda_msssim: Option<f64>,
    pub lambda_cycle: Option<f64>,
    pub mode: LossMode,
}

pub const DEFAULT_ALPHA: f64 = 0.01;

impl LossConfig {
    pub fn mse_only() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            gamma: 1e-4,
            lambda_msssim: None,
            lambda_cycle: None,
            mode: LossMode::MseOnly,
        }
    }

    pub fn mse_msssim() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            gamma: 2.5e-4,
            lambda_msssim: Some(0.1),
            lambda_cycle: None,
            mode: LossMode::MseMsssim,
        }
    }

    pub fn mse_msssim_cycle() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            gamma: 3e-4,
            lambda_msssim: Some(0.1),
            lambda_cycle: Some(0.01),
            mode: LossMode::MseMsssimCycle,
        }
    }

    pub fn for_mode(mode: LossMode) -> Self {
        match mode {
            LossMode::MseOnly => Self::mse_only(),
            LossMode::MseMsssim => Self::mse_msssim(),
            LossMode::MseMsssimCycle => Self::mse_msssim_cycle(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mode = self.mode.name();
        let needs_msssim = self.mode != LossMode::MseOnly;
        let needs_cycle = self.mode == LossMode::MseMsssimCycle;
        if needs_msssim && self.lambda_msssim.is_none() {
            return Err(Error::MissingWeight { mode, weight: "lambda_msssim" });
        }
        if needs_cycle && self.lambda_cycle.is_none() {
            return Err(Error::MissingWeight { mode, weight: "lambda_cycle" });
        }
        let weights = [Some(self.alpha), Some(self.gamma), self.lambda_msssim, self.lambda_cycle];
        if weights.iter().flatten().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// L1/L2 ratio of a vector: 1 for one-hot vectors, sqrt(n) for constant ones.
pub fn sparsity_ratio(x: &[f64]) -> f64 {
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    let l2 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    l1 / l2.max(COMPRESSION_EPS)
}

/// `|x|_1 / |x|_2 + alpha * |x|_2^2 / |x|_1` per sample (leading axis), then
/// averaged over the batch. Denominators are floored at [`COMPRESSION_EPS`],
/// so the all-zero code maps to 0 and nonzero codes are unaffected.
pub fn compression_loss<T: Float>(tape: &mut Tape<T>, x: Var, alpha: f64) -> Result<Var> {
    let n = tape.shape(x).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidShape {
            op: "compression_loss",
            reason: format!("expected a batch-major tensor, got {:?}", tape.shape(x)),
        });
    }
    let eps = T::of(COMPRESSION_EPS);
    let mut total: Option<Var> = None;
    for i in 0..n {
        let xi = if n == 1 { x } else { tape.batch_item(x, i)? };
        let l1 = tape.l1_norm(xi);
        let l2 = tape.l2_norm(xi);
        let l2_eps = tape.clamp_min(l2, eps);
        let l1_eps = tape.clamp_min(l1, eps);
        let sparsity = tape.div(l1, l2_eps)?;
        let l2_sq = tape.square(l2);
        let squeeze = tape.div(l2_sq, l1_eps)?;
        let squeeze = tape.scale(squeeze, T::of(alpha));
        let term = tape.add(sparsity, squeeze)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("n > 0");
    Ok(tape.scale(total, T::one() / T::of(n as f64)))
}

/// Mean of squared differences over every element.
pub fn mse_loss<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Parameters of SSIM and its multi-scale extension.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_scales: usize,
    /// Per-scale exponents, finest first; sum to 1.
    pub scale_weights: Vec<f64>,
}

/// Published five-scale exponents; they sum to 1.0001 and are renormalized.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

impl Default for SsimParams {
    fn default() -> Self {
        let total: f64 = MS_SSIM_WEIGHTS.iter().sum();
        SsimParams {
            window_size: 11,
            sigma: 1.5,
            c1: 0.01f64.powi(2),
            c2: 0.03f64.powi(2),
            max_scales: 5,
            scale_weights: MS_SSIM_WEIGHTS.iter().map(|w| w / total).collect(),
        }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn gaussian_1d(&self) -> Vec<f64> {
        let half = (self.window_size as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    pub fn window(&self) -> Vec<f64> {
        let g = self.gaussian_1d();
        g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
    }

    /// Largest number of scales (at most `max_scales`) whose coarsest level
    /// still fits one window. Zero when even the full image is too small.
    pub fn scales_for(&self, h: usize, w: usize) -> usize {
        let (mut h, mut w) = (h, w);
        let mut s = 0;
        while s < self.max_scales && h >= self.window_size && w >= self.window_size {
            s += 1;
            h /= 2;
            w /= 2;
        }
        s
    }

    /// Exponents for the first `scales` levels, renormalized to sum to 1.
    pub fn weights_for(&self, scales: usize) -> Vec<f64> {
        let used = &self.scale_weights[..scales];
        let s: f64 = used.iter().sum();
        used.iter().map(|w| w / s).collect()
    }
}

fn gaussian_filter<T: Float>(tape: &mut Tape<T>, x: Var, kernels: (Var, Var), zero: Var) -> Result<Var> {
    let v = tape.conv2d(x, kernels.0, zero, 1, 0)?;
    tape.conv2d(v, kernels.1, zero, 1, 0)
}

/// SSIM and contrast-structure maps for single-channel stacks `[M, 1, H, W]`
/// (valid windows only).
pub fn ssim_map<T: Float>(tape: &mut Tape<T>, x: Var, y: Var, params: &SsimParams) -> Result<(Var, Var)> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::ShapeMismatch {
            op: "ssim_map",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(y).to_vec(),
        });
    }
    let g: Vec<T> = params.gaussian_1d().into_iter().map(T::of).collect();
    let k = params.window_size;
    let kv = tape.constant(Tensor::new(vec![1, 1, k, 1], g.clone())?);
    let kh = tape.constant(Tensor::new(vec![1, 1, 1, k], g)?);
    let zero = tape.constant(Tensor::zeros(&[1]));
    let filt = (kv, kh);

    let mu_x = gaussian_filter(tape, x, filt, zero)?;
    let mu_y = gaussian_filter(tape, y, filt, zero)?;
    let xx = tape.square(x);
    let yy = tape.square(y);
    let xy = tape.mul(x, y)?;
    let e_xx = gaussian_filter(tape, xx, filt, zero)?;
    let e_yy = gaussian_filter(tape, yy, filt, zero)?;
    let e_xy = gaussian_filter(tape, xy, filt, zero)?;

    let mu_xx = tape.square(mu_x);
    let mu_yy = tape.square(mu_y);
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let (c1, c2) = (T::of(params.c1), T::of(params.c2));
    let cs_num = tape.scale(cov, T::of(2.0));
    let cs_num = tape.add_scalar(cs_num, c2);
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.add_scalar(cs_den, c2);
    let cs = tape.div(cs_num, cs_den)?;

    let l_num = tape.scale(mu_xy, T::of(2.0));
    let l_num = tape.add_scalar(l_num, c1);
    let l_den = tape.add(mu_xx, mu_yy)?;
    let l_den = tape.add_scalar(l_den, c1);
    let lum = tape.div(l_num, l_den)?;
    let ssim = tape.mul(lum, cs)?;
    Ok((ssim, cs))
}

fn avg_pool2<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let k = tape.constant(Tensor::full(&[1, 1, 2, 2], T::of(0.25)));
    let zero = tape.constant(Tensor::zeros(&[1]));
    tape.conv2d(x, k, zero, 2, 0)
}

/// Mean of each of the `n` planes of an `[n, 1, h, w]` map, one scalar var per plane.
fn plane_means<T: Float>(tape: &mut Tape<T>, map: Var, n: usize) -> Result<Vec<Var>> {
    let len = tape.value(map).len();
    let r = tape.reshape(map, &[n, len / n])?;
    (0..n)
        .map(|i| {
            let item = if n == 1 { r } else { tape.batch_item(r, i)? };
            Ok(tape.mean(item))
        })
        .collect()
}

/// MS-SSIM of two `[N, C, H, W]` batches. Each channel of each image gets
/// its own product over scales; the result is the mean over channels and
/// images. Uses as many scales as fit (see [`SsimParams::scales_for`]).
pub fn ms_ssim<T: Float>(tape: &mut Tape<T>, a: Var, b: Var, params: &SsimParams) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape != tape.shape(b) || shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "ms_ssim",
            lhs: shape,
            rhs: tape.shape(b).to_vec(),
        });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let scales = params.scales_for(h, w);
    if scales == 0 {
        return Err(Error::InvalidShape {
            op: "ms_ssim",
            reason: format!("image {h}x{w} is smaller than the {} px window", params.window_size),
        });
    }
    if scales < params.max_scales {
        log::debug!("ms_ssim: {h}x{w} input supports {scales} of {} scales", params.max_scales);
    }
    let weights = params.weights_for(scales);

    let mut x = tape.reshape(a, &[n * c, 1, h, w])?;
    let mut y = tape.reshape(b, &[n * c, 1, h, w])?;
    let planes = n * c;
    let mut per_plane: Vec<Option<Var>> = vec![None; planes];
    for (s, &wt) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_map(tape, x, y, params)?;
        let coarsest = s + 1 == scales;
        let map = if coarsest { ssim } else { cs };
        for (i, m) in plane_means(tape, map, planes)?.into_iter().enumerate() {
            let clipped = tape.relu(m);
            let term = tape.powf(clipped, T::of(wt));
            per_plane[i] = Some(match per_plane[i] {
                Some(acc) => tape.mul(acc, term)?,
                None => term,
            });
        }
        if !coarsest {
            x = avg_pool2(tape, x)?;
            y = avg_pool2(tape, y)?;
        }
    }
    let mut total = per_plane[0].expect("at least one scale");
    for v in per_plane[1..].iter().flatten() {
        total = tape.add(total, *v)?;
    }
    Ok(tape.scale(total, T::one() / T::of(planes as f64)))
}

/// `(1 - ms_ssim) / 2`.
pub fn ms_ssim_loss<T: Float>(tape: &mut Tape<T>, a: Var, b: Var, params: &SsimParams) -> Result<Var> {
    let m = ms_ssim(tape, a, b, params)?;
    let neg = tape.scale(m, T::of(-0.5));
    Ok(tape.add_scalar(neg, T::of(0.5)))
}

/// MS-SSIM of two plain tensors without building gradients.
pub fn ms_ssim_value<T: Float>(a: &Tensor<T>, b: &Tensor<T>, params: &SsimParams) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = tape.constant(b.clone());
    let m = ms_ssim(&mut tape, x, y, params)?;
    Ok(tape.value(m).item().as_f64())
}

/// MSE between frozen-encoder features of the original and the reconstruction.
pub fn cycle_loss<T: Float>(
    tape: &mut Tape<T>,
    image: Var,
    recon: Var,
    params: &AutoencoderParams<T>,
) -> Result<Var> {
    let frozen = params.bind_frozen_encoder(tape);
    let f_orig = encode_features(tape, image, &frozen, &params.config)?;
    let f_recon = encode_features(tape, recon, &frozen, &params.config)?;
    mse_loss(tape, f_orig, f_recon)
}

/// Individual terms of a combined loss; absent terms are not part of the mode.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub msssim: Option<Var>,
    pub cycle: Option<Var>,
    pub compression: Var,
}

/// Scalar values of [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mse: f64,
    pub msssim: f64,
    pub cycle: f64,
    pub compression: f64,
    /// Everything except the compression term.
    pub task: f64,
}

impl LossTerms {
    pub fn values<T: Float>(&self, tape: &Tape<T>, cfg: &LossConfig) -> LossValues {
        let get = |v: Var| tape.value(v).item().as_f64();
        let mse = get(self.mse);
        let msssim = self.msssim.map(get).unwrap_or(0.0);
        let cycle = self.cycle.map(get).unwrap_or(0.0);
        let mut task = mse;
        if self.msssim.is_some() {
            task += cfg.lambda_msssim.unwrap_or(0.0) * msssim;
        }
        if self.cycle.is_some() {
            task += cfg.lambda_cycle.unwrap_or(0.0) * cycle;
        }
        LossValues {
            total: get(self.total),
            mse,
            msssim,
            cycle,
            compression: get(self.compression),
            task,
        }
    }
}

/// The weighted objective selected by `cfg.mode`; the compression term is
/// applied to the pre-binarization code.
pub fn combined_loss<T: Float>(
    tape: &mut Tape<T>,
    image: Var,
    recon: Var,
    code_pre: Var,
    cfg: &LossConfig,
    params: &AutoencoderParams<T>,
    ssim: &SsimParams,
) -> Result<LossTerms> {
    cfg.validate()?;
    let mse = mse_loss(tape, image, recon)?;
    let compression = compression_loss(tape, code_pre, cfg.alpha)?;
    let weighted_comp = tape.scale(compression, T::of(cfg.gamma));
    let mut total = tape.add(mse, weighted_comp)?;

    let mut msssim = None;
    let mut cycle = None;
    if cfg.mode != LossMode::MseOnly {
        let l = ms_ssim_loss(tape, image, recon, ssim)?;
        let wl = tape.scale(l, T::of(cfg.lambda_msssim.expect("validated")));
        total = tape.add(total, wl)?;
        msssim = Some(l);
    }
    if cfg.mode == LossMode::MseMsssimCycle {
        let l = cycle_loss(tape, image, recon, params)?;
        let wl = tape.scale(l, T::of(cfg.lambda_cycle.expect("validated")));
        total = tape.add(total, wl)?;
        cycle = Some(l);
    }
    Ok(LossTerms { total, mse, msssim, cycle, compression })
}
