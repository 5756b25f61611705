//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Keys are applied in file order,
//! so `preset` and `mode` (which reset groups of fields to their defaults)
//! should come before the keys that refine them.
//!
//! ```text
//! preset = desk              # desk | full
//! enc_channels = 16,32,48
//! code_channels = 8
//! dec_channels = 48,32,16
//! leaky_slope = 0.2
//! stride_kernel = 4
//! mode = mse                 # mse | mse_msssim | mse_msssim_cycle
//! alpha = 0.01
//! gamma = 1e-4
//! lambda_msssim = 0.1
//! lambda_cycle = 0.01
//! lr0 = 1e-3
//! halve_every = 10
//! stop_halving_after = 50
//! epochs = 10
//! iters_per_epoch = 200
//! batch_size = 8
//! crop = 64
//! crop_stride = 32
//! gamma_warmup_steps = 400
//! seed = 0
//! finetune_steps = 100
//! finetune_lr = 1e-5
//! finetune_patience = 10
//! ```

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode};
use crate::model::ModelConfig;
use crate::trainer::{FinetuneConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            finetune: FinetuneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.finetune.lr.is_finite() && self.finetune.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("finetune_lr {} is invalid", self.finetune.lr)));
        }
        Ok(())
    }

    /// Parses and validates a configuration.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::ConfigLine { line: i + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "preset" => {
                *self = match value {
                    "desk" => RunConfig::desk(),
                    "full" => RunConfig::default(),
                    _ => return Err(format!("unknown preset `{value}` (expected desk or full)")),
                }
            }
            "enc_channels" => m.enc_channels = triple(value)?,
            "code_channels" => m.code_channels = num(value)?,
            "dec_channels" => m.dec_channels = triple(value)?,
            "leaky_slope" => m.leaky_slope = num(value)?,
            "stride_kernel" => m.stride_kernel = num(value)?,
            "mode" => {
                let mode = LossMode::parse(value).ok_or_else(|| format!("unknown loss mode `{value}`"))?;
                let alpha = t.loss.alpha;
                t.loss = LossConfig { alpha, ..LossConfig::for_mode(mode) };
            }
            "alpha" => t.loss.alpha = num(value)?,
            "gamma" => t.loss.gamma = num(value)?,
            "lambda_msssim" => t.loss.lambda_msssim = Some(num(value)?),
            "lambda_cycle" => t.loss.lambda_cycle = Some(num(value)?),
            "lr0" => t.lr0 = num(value)?,
            "halve_every" => t.halve_every = num(value)?,
            "stop_halving_after" => t.stop_halving_after = num(value)?,
            "epochs" => t.epochs = num(value)?,
            "iters_per_epoch" => t.iters_per_epoch = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "crop" => t.crop = num(value)?,
            "crop_stride" => t.crop_stride = num(value)?,
            "gamma_warmup_steps" => t.gamma_warmup_steps = num(value)?,
            "seed" => t.seed = num(value)?,
            "finetune_steps" => self.finetune.steps = num(value)?,
            "finetune_lr" => self.finetune.lr = num(value)?,
            "finetune_patience" => self.finetune.patience = num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Renders every field; `parse(to_text())` reproduces the configuration.
    pub fn to_text(&self) -> String {
        let (m, t, f) = (&self.model, &self.train, &self.finetune);
        let list = |v: &[usize; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("enc_channels", list(&m.enc_channels));
        kv("code_channels", m.code_channels.to_string());
        kv("dec_channels", list(&m.dec_channels));
        kv("leaky_slope", m.leaky_slope.to_string());
        kv("stride_kernel", m.stride_kernel.to_string());
        kv("mode", t.loss.mode.name().to_string());
        kv("alpha", t.loss.alpha.to_string());
        kv("gamma", t.loss.gamma.to_string());
        if let Some(l) = t.loss.lambda_msssim {
            kv("lambda_msssim", l.to_string());
        }
        if let Some(l) = t.loss.lambda_cycle {
            kv("lambda_cycle", l.to_string());
        }
        kv("lr0", t.lr0.to_string());
        kv("halve_every", t.halve_every.to_string());
        kv("stop_halving_after", t.stop_halving_after.to_string());
        kv("epochs", t.epochs.to_string());
        kv("iters_per_epoch", t.iters_per_epoch.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("crop", t.crop.to_string());
        kv("crop_stride", t.crop_stride.to_string());
        kv("gamma_warmup_steps", t.gamma_warmup_steps.to_string());
        kv("seed", t.seed.to_string());
        kv("finetune_steps", f.steps.to_string());
        kv("finetune_lr", f.lr.to_string());
        kv("finetune_patience", f.patience.to_string());
        s
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as a number"))
}

fn triple(v: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = v.split(',').map(|p| num(p.trim())).collect::<std::result::Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<usize>| format!("expected 3 comma-separated values, got {}", p.len()))
}
