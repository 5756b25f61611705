//! Optimization: the data pipeline (half-overlapping crops, horizontal
//! flips), Adam with step-halving learning rate, the epoch loop with
//! checkpointing and resume, and per-image encoder fine-tuning.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, TrainingState};
use crate::error::{Error, Result};
use crate::image_io::{self, crop as crop_window, pad_reflect};
use crate::losses::{combined_loss, LossConfig, LossValues, SsimParams};
use crate::model::{forward_train, init_params, AutoencoderParams, ModelConfig, Partition, DOWNSAMPLE};
use crate::tensor::{Float, Tape, Tensor};

const BOTH: [Partition; 2] = [Partition::Encoder, Partition::Decoder];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub halve_every: usize,
    pub stop_halving_after: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub crop_stride: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// The compression weight ramps linearly from 0 to `loss.gamma` over
    /// this many steps; 0 applies the full weight from the first step.
    pub gamma_warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            halve_every: 10,
            stop_halving_after: 50,
            epochs: 200,
            iters_per_epoch: 900,
            batch_size: 64,
            crop: 128,
            crop_stride: 64,
            seed: 0,
            loss: LossConfig::mse_only(),
            gamma_warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    /// Sizes that train the desk model in minutes on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 1e-3,
            halve_every: 10,
            stop_halving_after: 50,
            epochs: 10,
            iters_per_epoch: 200,
            batch_size: 8,
            crop: 64,
            crop_stride: 32,
            gamma_warmup_steps: 400,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        for (name, v) in [
            ("halve_every", self.halve_every),
            ("epochs", self.epochs),
            ("iters_per_epoch", self.iters_per_epoch),
            ("batch_size", self.batch_size),
            ("crop", self.crop),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.crop.is_multiple_of(DOWNSAMPLE) {
            return bad(format!("crop {} is not a multiple of {DOWNSAMPLE}", self.crop));
        }
        if self.crop_stride * 2 != self.crop {
            return bad(format!(
                "crop_stride {} must be half the crop size {}",
                self.crop_stride, self.crop
            ));
        }
        self.loss.validate()
    }
}

/// Compression weight in effect at global step `step`.
pub fn gamma_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.gamma_warmup_steps {
        cfg.loss.gamma
    } else {
        cfg.loss.gamma * step as f64 / cfg.gamma_warmup_steps as f64
    }
}

/// `lr0 / 2^min(floor(epoch / halve_every), stop_halving_after / halve_every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.halve_every).min(cfg.stop_halving_after / cfg.halve_every);
    cfg.lr0 / 2f64.powi(halvings as i32)
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Float> AdamState<T> {
    pub fn new(lengths: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<T>> = lengths.into_iter().map(|n| vec![T::zero(); n]).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_tensors(params: &[&Tensor<T>]) -> Self {
        Self::new(params.iter().map(|p| p.len()))
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![m.len()],
                    rhs: vec![p.len(), g.len()],
                });
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn positions(dim: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=dim - crop).step_by(stride).collect();
    if out.last() != Some(&(dim - crop)) {
        out.push(dim - crop);
    }
    out
}

/// `crop x crop` windows of a `[3, H, W]` image with top-left corners on a
/// `stride` grid, plus windows flush with the right and bottom edges.
/// Extents smaller than `crop` are first reflect-padded around the centre.
pub fn make_crops<T: Float>(image: &Tensor<T>, crop: usize, stride: usize) -> Vec<Tensor<T>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let padded;
    let img = if h < crop || w < crop {
        warn!("{w}x{h} image is smaller than the {crop}px crop; reflect-padding it");
        let (ph, pw) = (crop.saturating_sub(h), crop.saturating_sub(w));
        padded = pad_reflect(image, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2);
        &padded
    } else {
        image
    };
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::new();
    for y in positions(h, crop, stride) {
        for x in positions(w, crop, stride) {
            out.push(crop_window(img, y, x, crop, crop));
        }
    }
    out
}

/// Flips each sample of an `[N, C, H, W]` batch left-right with probability
/// `p`; returns the flip mask.
pub fn augment<T: Float, R: Rng>(batch: &mut Tensor<T>, rng: &mut R, p: f64) -> Vec<bool> {
    let n = batch.shape()[0];
    let w = batch.shape()[3];
    let per = batch.len() / n.max(1);
    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
    apply_flips(batch, &mask, per, w);
    mask
}

/// Flips the samples selected by `mask`.
pub fn flip_samples<T: Float>(batch: &mut Tensor<T>, mask: &[bool]) {
    let w = batch.shape()[3];
    let per = batch.len() / batch.shape()[0].max(1);
    apply_flips(batch, mask, per, w);
}

fn apply_flips<T: Float>(batch: &mut Tensor<T>, mask: &[bool], per: usize, w: usize) {
    if per == 0 || w == 0 {
        return;
    }
    for (sample, &flip) in batch.data_mut().chunks_exact_mut(per).zip(mask) {
        if flip {
            sample.chunks_exact_mut(w).for_each(<[T]>::reverse);
        }
    }
}

/// Draws `batch_size` crops uniformly with replacement and stacks them.
pub fn sample_batch<R: Rng>(crops: &[Tensor<f32>], batch_size: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let picked: Vec<Tensor<f32>> = (0..batch_size)
        .map(|_| {
            let c = &crops[rng.gen_range(0..crops.len())];
            let mut s = c.shape().to_vec();
            s.insert(0, 1);
            c.clone().reshape(&s)
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&picked)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: LossValues,
    /// Fraction of ones in the binarized code.
    pub activation_rate: f64,
}

/// Loss values and gradients of `params` selected by `trainable`.
fn loss_and_grads(
    params: &AutoencoderParams<f32>,
    batch: &Tensor<f32>,
    loss: &LossConfig,
    ssim: &SsimParams,
    trainable: &[Partition],
) -> Result<(StepStats, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, trainable);
    let x = tape.constant(batch.clone());
    let fwd = forward_train(&mut tape, x, &bound, &params.config)?;
    let terms = combined_loss(&mut tape, x, fwd.recon, fwd.code_pre, loss, params, ssim)?;
    let values = terms.values(&tape, loss);
    if !values.total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let code = tape.value(fwd.code_bin);
    let activation_rate = code.data().iter().map(|&b| b as f64).sum::<f64>() / code.len() as f64;
    let grads = if trainable.is_empty() {
        Vec::new()
    } else {
        tape.backward(terms.total)?;
        bound.grads(&tape, trainable)
    };
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    Ok((StepStats { loss: values, activation_rate }, grads))
}

/// Loss terms of `params` on one `[N, 3, H, W]` batch, without gradients.
pub fn image_loss(image: &Tensor<f32>, params: &AutoencoderParams<f32>, loss: &LossConfig) -> Result<StepStats> {
    Ok(loss_and_grads(params, image, loss, &SsimParams::default(), &[])?.0)
}

/// Model, optimizer state and objective for joint encoder-decoder training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: AutoencoderParams<f32>,
    pub adam: AdamState<f32>,
    pub loss: LossConfig,
    pub ssim: SsimParams,
}

impl Trainer {
    pub fn new(params: AutoencoderParams<f32>, loss: LossConfig) -> Self {
        let adam = AdamState::for_tensors(&params.tensors(&BOTH));
        Trainer {
            params,
            adam,
            loss,
            ssim: SsimParams::default(),
        }
    }

    /// One Adam step on `batch` (`[N, 3, H, W]`); returns the pre-update loss.
    pub fn step(&mut self, batch: &Tensor<f32>, lr: f64) -> Result<StepStats> {
        let loss = self.loss.clone();
        self.step_with(batch, lr, &loss)
    }

    fn step_with(&mut self, batch: &Tensor<f32>, lr: f64, loss: &LossConfig) -> Result<StepStats> {
        let (stats, grads) = loss_and_grads(&self.params, batch, loss, &self.ssim, &BOTH)?;
        self.adam.step(&mut self.params.tensors_mut(&BOTH), &grads, lr)?;
        Ok(stats)
    }

    /// Loss of the current parameters without updating them.
    pub fn evaluate(&self, batch: &Tensor<f32>) -> Result<StepStats> {
        Ok(loss_and_grads(&self.params, batch, &self.loss, &self.ssim, &[])?.0)
    }

    /// Runs one epoch of `cfg.iters_per_epoch` steps on randomly drawn crops
    /// under `cfg.loss` (with the compression warm-up applied); `on_step`
    /// sees every step's pre-update statistics. The sampling stream depends
    /// only on `(cfg.seed, epoch)`.
    pub fn run_epoch_with(
        &mut self,
        crops: &[Tensor<f32>],
        cfg: &TrainConfig,
        epoch: usize,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<EpochLog> {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let lr = lr_schedule(epoch, cfg);
        let mut loss = cfg.loss.clone();
        let mut sum = StepStats::default();
        for i in 0..cfg.iters_per_epoch {
            let mut batch = sample_batch(crops, cfg.batch_size, &mut rng)?;
            augment(&mut batch, &mut rng, 0.5);
            loss.gamma = gamma_schedule(epoch * cfg.iters_per_epoch + i, cfg);
            let s = self.step_with(&batch, lr, &loss)?;
            on_step(&s);
            let l = &mut sum.loss;
            l.total += s.loss.total;
            l.mse += s.loss.mse;
            l.msssim += s.loss.msssim;
            l.cycle += s.loss.cycle;
            l.compression += s.loss.compression;
            l.task += s.loss.task;
            sum.activation_rate += s.activation_rate;
        }
        let n = cfg.iters_per_epoch as f64;
        let mean = LossValues {
            total: sum.loss.total / n,
            mse: sum.loss.mse / n,
            msssim: sum.loss.msssim / n,
            cycle: sum.loss.cycle / n,
            compression: sum.loss.compression / n,
            task: sum.loss.task / n,
        };
        Ok(EpochLog {
            epoch,
            lr,
            loss: mean,
            activation_rate: sum.activation_rate / n,
        })
    }

    pub fn run_epoch(&mut self, crops: &[Tensor<f32>], cfg: &TrainConfig, epoch: usize) -> Result<EpochLog> {
        self.run_epoch_with(crops, cfg, epoch, |_| {})
    }

    pub fn training_state(&self, epochs_done: usize) -> TrainingState {
        TrainingState {
            epochs_done,
            adam_t: self.adam.t,
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        }
    }

    pub fn restore_state(&mut self, state: TrainingState) {
        self.adam.t = state.adam_t;
        self.adam.m = state.m;
        self.adam.v = state.v;
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Per-epoch means of the step losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossValues,
    pub activation_rate: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,total,mse,msssim,cycle,compression,activation_rate";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, l.total, l.mse, l.msssim, l.cycle, l.compression, self.activation_rate
        )
    }
}

/// Where [`train`] writes its outputs.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Continue from `checkpoint` and its state sidecar when both exist.
    pub resume: bool,
}

/// Loads every image in `dir` and cuts it into training crops.
pub fn load_crops(dir: &Path, crop: usize, stride: usize) -> Result<Vec<Tensor<f32>>> {
    let files = image_io::list_images(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no .ppm or .png images in {}", dir.display())));
    }
    let mut crops = Vec::new();
    for f in &files {
        let img = image_io::read_image(f)?;
        crops.extend(make_crops(&img.to_tensor::<f32>(), crop, stride));
    }
    info!("{} images, {} crops of {crop}px", files.len(), crops.len());
    Ok(crops)
}

/// Trains from scratch (or resumes), writing a checkpoint, its optimizer
/// state and one CSV log row after every epoch.
pub fn train(
    dataset_dir: &Path,
    cfg: &TrainConfig,
    model: &ModelConfig,
    out: &TrainOutputs,
) -> Result<(AutoencoderParams<f32>, Vec<EpochLog>)> {
    cfg.validate()?;
    model.validate()?;
    let crops = load_crops(dataset_dir, cfg.crop, cfg.crop_stride)?;

    let state_path = checkpoint::state_path(&out.checkpoint);
    let mut start = 0;
    let mut trainer;
    if out.resume && out.checkpoint.exists() && state_path.exists() {
        let params = checkpoint::load(&out.checkpoint)?;
        if &params.config != model {
            return Err(Error::Incompatible(format!(
                "checkpoint model {:?} differs from the configured model {model:?}",
                params.config
            )));
        }
        trainer = Trainer::new(params, cfg.loss.clone());
        let lengths: Vec<usize> = trainer.adam.m.iter().map(Vec::len).collect();
        let state = TrainingState::load(&state_path, &lengths)?;
        start = state.epochs_done;
        trainer.restore_state(state);
        info!("resuming after epoch {start}");
    } else {
        trainer = Trainer::new(init_params(model, cfg.seed)?, cfg.loss.clone());
        fs::write(&out.log, format!("{LOG_HEADER}\n"))?;
    }

    let mut logs = Vec::new();
    for epoch in start..cfg.epochs {
        let log = trainer.run_epoch(&crops, cfg, epoch)?;
        info!(
            "epoch {epoch}: lr {:.3e} loss {:.5} mse {:.5} act {:.3}",
            log.lr, log.loss.total, log.loss.mse, log.activation_rate
        );
        checkpoint::save(&out.checkpoint, &trainer.params)?;
        trainer.training_state(epoch + 1).save(&state_path)?;
        let mut f = OpenOptions::new().append(true).create(true).open(&out.log)?;
        writeln!(f, "{}", log.csv_row())?;
        logs.push(log);
    }
    Ok((trainer.params, logs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    /// Stop after this many consecutive steps without a new best.
    pub patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 100,
            lr: 1e-5,
            patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneTrace {
    /// `losses[k]` is the loss after `k` updates.
    pub losses: Vec<LossValues>,
    /// Index into `losses` of the encoder that was kept.
    pub best_step: usize,
}

impl FinetuneTrace {
    pub fn initial(&self) -> LossValues {
        self.losses[0]
    }

    pub fn best(&self) -> LossValues {
        self.losses[self.best_step]
    }
}

/// Fine-tunes only the encoder on one `[1, 3, H, W]` image under the full
/// objective of `loss`. The kept encoder minimizes the objective among the
/// visited ones whose task loss does not exceed the initial task loss, so
/// neither the objective nor the task loss ever gets worse.
pub fn post_train_encoder_opt(
    image: &Tensor<f32>,
    params: &mut AutoencoderParams<f32>,
    loss: &LossConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneTrace> {
    const ENC: [Partition; 1] = [Partition::Encoder];
    let ssim = SsimParams::default();
    let mut adam = AdamState::for_tensors(&params.tensors(&ENC));
    let mut best: Vec<Tensor<f32>> = params.tensors(&ENC).into_iter().cloned().collect();
    let mut losses: Vec<LossValues> = Vec::new();
    let mut best_step = 0;
    let mut stale = 0;
    for k in 0..=cfg.steps {
        let last = k == cfg.steps;
        let trainable: &[Partition] = if last { &[] } else { &ENC };
        let (stats, grads) = loss_and_grads(params, image, loss, &ssim, trainable)?;
        let v = stats.loss;
        losses.push(v);
        if k > 0 {
            let (b, first) = (losses[best_step], losses[0]);
            if v.total < b.total && v.task <= first.task {
                best_step = k;
                stale = 0;
                best = params.tensors(&ENC).into_iter().cloned().collect();
            } else {
                stale += 1;
            }
        }
        if last || stale >= cfg.patience {
            break;
        }
        adam.step(&mut params.tensors_mut(&ENC), &grads, cfg.lr)?;
    }
    for (p, b) in params.tensors_mut(&ENC).into_iter().zip(best) {
        *p = b;
    }
    Ok(FinetuneTrace { losses, best_step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_halves_then_stops() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 2e-4);
        assert_eq!(lr_schedule(9, &cfg), 2e-4);
        assert_eq!(lr_schedule(10, &cfg), 1e-4);
        assert_eq!(lr_schedule(120, &cfg), 6.25e-6);
        assert_eq!(lr_schedule(59, &cfg), lr_schedule(50, &cfg));
        for e in 0..300 {
            assert!(lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg));
        }
    }

    #[test]
    fn gamma_warmup_ramps_linearly() {
        let cfg = TrainConfig::desk();
        assert_eq!(gamma_schedule(0, &cfg), 0.0);
        assert!((gamma_schedule(200, &cfg) - 0.5e-4).abs() < 1e-18);
        assert_eq!(gamma_schedule(400, &cfg), 1e-4);
        assert_eq!(gamma_schedule(0, &TrainConfig::default()), 1e-4);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut adam = AdamState::<f64>::new([1]);
        adam.step(&mut [&mut p], &[vec![1.0]], 2e-4).unwrap();
        assert!((p.item() + 2e-4 / (1.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::<f32>::full(&[3], 0.5);
        let mut adam = AdamState::<f32>::new([3]);
        adam.m[0] = vec![0.1; 3];
        adam.v[0] = vec![0.01; 3];
        adam.step(&mut [&mut p], &[vec![0.0; 3]], 0.0).unwrap();
        assert_eq!(p.data(), &[0.5; 3]);
        assert!((adam.m[0][0] - 0.09).abs() < 1e-7);
        assert!(adam.step(&mut [&mut p], &[vec![0.0; 2]], 1e-3).is_err());
    }

    #[test]
    fn crop_counts() {
        let img = Tensor::<f32>::zeros(&[3, 512, 768]);
        let crops = make_crops(&img, 128, 64);
        assert_eq!(crops.len(), 77);
        assert!(crops.iter().all(|c| c.shape() == [3, 128, 128]));
        assert_eq!(make_crops(&Tensor::<f32>::zeros(&[3, 128, 128]), 128, 64).len(), 1);
    }

    #[test]
    fn trailing_crops_cover_edges() {
        let img = Tensor::<f32>::from_fn(&[3, 100, 70], |i| i as f32);
        let crops = make_crops(&img, 64, 32);
        // rows: 0, 32, 36; cols: 0, 6
        assert_eq!(crops.len(), 6);
        let last = crops.last().unwrap();
        assert_eq!(last.data()[last.len() - 1], img.data()[img.len() - 1]);
    }

    #[test]
    fn small_images_are_padded_to_one_crop() {
        let img = Tensor::<f32>::from_fn(&[3, 20, 30], |i| i as f32);
        let crops = make_crops(&img, 32, 16);
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].shape(), &[3, 32, 32]);
    }

    #[test]
    fn augment_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orig = Tensor::<f32>::from_fn(&[4, 3, 2, 5], |i| i as f32);
        let mut t = orig.clone();
        assert!(augment(&mut t, &mut rng, 0.0).iter().all(|&f| !f));
        assert_eq!(t, orig);
        let mask = augment(&mut t, &mut rng, 1.0);
        assert!(mask.iter().all(|&f| f));
        flip_samples(&mut t, &mask);
        assert_eq!(t, orig);
    }

    #[test]
    fn flip_rate_is_fair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tensor::<f32>::zeros(&[10_000, 1, 1, 2]);
        let flips = augment(&mut t, &mut rng, 0.5).iter().filter(|&&f| f).count();
        assert!((flips as f64 / 1e4 - 0.5).abs() < 0.02);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        let odd = TrainConfig { crop: 60, crop_stride: 30, ..TrainConfig::desk() };
        assert!(odd.validate().is_err());
        let overlap = TrainConfig { crop_stride: 16, ..TrainConfig::desk() };
        assert!(overlap.validate().is_err());
    }

    #[test]
    fn finetune_zero_steps_is_a_no_op() {
        let mut p = init_params::<f32>(&ModelConfig::toy(), 3).unwrap();
        let before = p.clone();
        let img = Tensor::<f32>::from_fn(&[1, 3, 16, 16], |i| (i % 7) as f32 / 7.0);
        let cfg = FinetuneConfig { steps: 0, ..FinetuneConfig::default() };
        let trace = post_train_encoder_opt(&img, &mut p, &LossConfig::mse_only(), &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(trace.losses.len(), 1);
    }

    #[test]
    fn finetune_freezes_the_decoder() {
        let mut p = init_params::<f32>(&ModelConfig::toy(), 4).unwrap();
        let dec_before: Vec<Tensor<f32>> = p.tensors(&[Partition::Decoder]).into_iter().cloned().collect();
        let img = Tensor::<f32>::from_fn(&[1, 3, 16, 16], |i| ((i * 13) % 17) as f32 / 17.0);
        let cfg = FinetuneConfig { steps: 5, lr: 1e-2, patience: 10 };
        let trace = post_train_encoder_opt(&img, &mut p, &LossConfig::mse_only(), &cfg).unwrap();
        let dec_after: Vec<&Tensor<f32>> = p.tensors(&[Partition::Decoder]);
        assert!(dec_before.iter().zip(dec_after).all(|(a, b)| a == b));
        assert!(trace.best().total <= trace.initial().total);
        assert!(trace.best().task <= trace.initial().task);
    }

    #[test]
    fn training_steps_are_reproducible() {
        let run = || {
            let mut t = Trainer::new(init_params(&ModelConfig::toy(), 9).unwrap(), LossConfig::mse_only());
            let crops = vec![Tensor::<f32>::from_fn(&[3, 16, 16], |i| (i % 5) as f32 / 5.0)];
            let cfg = TrainConfig {
                iters_per_epoch: 3,
                batch_size: 2,
                crop: 16,
                crop_stride: 8,
                ..TrainConfig::desk()
            };
            t.run_epoch(&crops, &cfg, 0).unwrap();
            t.params
        };
        assert_eq!(run(), run());
    }
}
