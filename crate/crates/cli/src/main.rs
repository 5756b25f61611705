//! `nic`: train, run and inspect the learned image codec.
//!
//! Exit codes: 0 success, 1 other failures (I/O), 2 usage or configuration
//! errors, 3 malformed or incompatible files, 4 non-finite values.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use nic_core::checkpoint;
use nic_core::codec::{compress_image, decode_with_model, decompress_image, padded_input, Bitstream, Finetune};
use nic_core::config::RunConfig;
use nic_core::image_io::{list_images, read_image, write_image};
use nic_core::metrics::{evaluate_image, EvalReport};
use nic_core::model::AutoencoderParams;
use nic_core::trainer::{image_loss, train, TrainOutputs};

#[derive(Parser)]
#[command(name = "nic", version, about = "Learned lossy image codec with binary latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on every .ppm/.png image in a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path, rewritten after every epoch.
        #[arg(long)]
        out: PathBuf,
        /// CSV training log [default: <out>.csv]
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from `out` and its `.state` sidecar.
        #[arg(long)]
        resume: bool,
    },
    /// Compress one image into a .nic stream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fine-tune the encoder on this image before coding it.
        #[arg(long)]
        finetune: bool,
        /// Supplies the fine-tuning objective and schedule.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Reconstruct an image from a stream (.png output if the name says so, else PPM).
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress and reconstruct a directory and report PSNR, MS-SSIM and bpp.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        finetune: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-image results.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a stream's header and per-context bit statistics.
    Inspect {
        input: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::parse(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<AutoencoderParams<f32>> {
    checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn finetune_settings(enabled: bool, config: Option<&Path>) -> Result<Option<Finetune>> {
    if !enabled {
        return Ok(None);
    }
    let cfg = load_config(config)?;
    Ok(Some(Finetune {
        loss: cfg.train.loss,
        config: cfg.finetune,
    }))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            config,
            out,
            log,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let log = log.unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".csv");
                s.into()
            });
            let outputs = TrainOutputs {
                checkpoint: out.clone(),
                log: log.clone(),
                resume,
            };
            let (_, logs) = train(&data, &cfg.train, &cfg.model, &outputs)?;
            if let Some(last) = logs.last() {
                println!(
                    "epoch {}: loss {:.5} mse {:.5} activation {:.3}",
                    last.epoch, last.loss.total, last.loss.mse, last.activation_rate
                );
            }
            println!("checkpoint {} log {}", out.display(), log.display());
        }
        Command::Encode {
            model,
            input,
            out,
            finetune,
            config,
        } => {
            let params = load_model(&model)?;
            let img = read_image(&input).with_context(|| format!("reading {}", input.display()))?;
            let ft = finetune_settings(finetune, config.as_deref())?;
            let compressed = compress_image(&img, &params, ft.as_ref())?;
            let bytes = compressed.stream.to_bytes();
            fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            let task = match &compressed.trace {
                Some(trace) => {
                    let (first, best) = (trace.initial(), trace.best());
                    println!(
                        "fine-tune: kept step {} of {}, loss {:.6} -> {:.6}",
                        trace.best_step,
                        trace.losses.len() - 1,
                        first.total,
                        best.total
                    );
                    best.task
                }
                None => {
                    let loss = load_config(config.as_deref())?.train.loss;
                    image_loss(&padded_input(&img)?, &params, &loss)?.loss.task
                }
            };
            let bpp = 8.0 * bytes.len() as f64 / img.num_pixels() as f64;
            println!("{}x{} -> {} bytes, {bpp:.4} bpp, task loss {task:.6}", img.width, img.height, bytes.len());
        }
        Command::Decode { model, input, out } => {
            let params = load_model(&model)?;
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let img = decompress_image(&Bitstream::parse(&bytes)?, &params)?;
            write_image(&out, &img).with_context(|| format!("writing {}", out.display()))?;
            println!("{}x{} -> {}", img.width, img.height, out.display());
        }
        Command::Eval {
            model,
            data,
            finetune,
            config,
            csv,
        } => {
            let params = load_model(&model)?;
            let ft = finetune_settings(finetune, config.as_deref())?;
            let files = list_images(&data)?;
            if files.is_empty() {
                return Err(nic_core::Error::EmptyDataset(format!("no .ppm or .png images in {}", data.display())).into());
            }
            // Images are independent, so the report does not depend on the thread count.
            let images = files
                .par_iter()
                .map(|f| -> Result<_> {
                    let name = f.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
                    let img = read_image(f).with_context(|| format!("reading {}", f.display()))?;
                    let r = evaluate_image(&name, &img, &params, ft.as_ref())?;
                    info!("{name}: {:.2} dB, {:.4} bpp", r.psnr, r.bpp);
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = EvalReport { images };
            if let Some(path) = csv {
                let f = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
                report.write_csv(f)?;
            }
            println!("{}", report.summary());
        }
        Command::Inspect { input } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let stream = Bitstream::parse(&bytes)?;
            let h = &stream.header;
            let (c, lh, lw) = (h.code_channels as usize, h.latent_height(), h.latent_width());
            println!("version {}", h.version);
            println!("image {}x{}, downsample {}", h.orig_width, h.orig_height, 1u32 << h.downsample_log2);
            println!("code {c}x{lh}x{lw} = {} bits", h.latent_bits());
            println!(
                "payload {} bytes, total {} bytes, {:.4} bpp",
                stream.payload.len(),
                stream.byte_len(),
                stream.bpp()
            );
            let (code, model) = decode_with_model(&stream.payload, c, lh, lw)?;
            println!("activation rate {:.4}", code.activation_rate());
            println!("context  n0  n1  p1");
            for (ctx, [n0, n1]) in model.counts().iter().enumerate() {
                println!("{ctx} {n0} {n1} {:.4}", model.p1(ctx));
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use nic_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(e) if e.is_format() => 3,
        Some(E::InvalidConfig(_) | E::ConfigLine { .. } | E::MissingWeight { .. } | E::EmptyDataset(_)) => 2,
        Some(E::NonFinite(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors exit with status 2.
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    if let Some(n) = std::env::var("NIC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: NIC_THREADS ignored: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
