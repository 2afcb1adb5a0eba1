//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::io::{
    load_checkpoint, load_dataset, read_image, save_checkpoint, write_dataset, write_image,
    Checkpoint, ImageBuffer,
};
use crate::metrics::clamp_unit;
use crate::model::{derain, DcsfnParams, NetConfig};
use crate::tensor::Tensor;
use crate::train::{evaluate_dataset, synth_rain_pair, train_loop, StreakParams, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dcsfn", version, about = "Single-image rain removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic rainy/clean pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write pairs without rain streaks.
        #[arg(long)]
        clean_only: bool,
    },
    /// Write an untrained checkpoint.
    Init {
        #[arg(long, default_value = "tiny")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Set every weight and bias to zero.
        #[arg(long)]
        zero: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a fresh initialisation and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        /// Preset (`full` or `tiny`) followed by `key=value` overrides.
        #[arg(long, default_value = "tiny")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 5e-4)]
        lr: f64,
    },
    /// Remove rain from one image.
    Derain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Report mean PSNR and SSIM over a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Runs the CLI and returns the process exit code.
pub fn run_cli<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn write_line(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth {
            out: dir,
            count,
            size,
            seed,
            clean_only,
        } => {
            let streaks = if clean_only {
                StreakParams::none()
            } else {
                StreakParams::default()
            };
            let pairs = (0..count as u64)
                .map(|i| synth_rain_pair(seed.wrapping_add(i), size, &streaks))
                .collect::<Result<Vec<_>>>()?;
            write_dataset(&dir, &pairs)?;
            write_line(out, &format!("wrote {count} pairs to {}", dir.display()))
        }
        Command::Init {
            config,
            seed,
            zero,
            out: path,
        } => {
            let cfg = NetConfig::parse(&config)?;
            let params = if zero {
                DcsfnParams::zeros(&cfg)?
            } else {
                DcsfnParams::init(&cfg, seed)?
            };
            save_checkpoint(&path, &Checkpoint::new(params))
        }
        Command::Train {
            data,
            epochs,
            config,
            seed,
            out: path,
            patch,
            batch,
            lr,
        } => {
            let net = NetConfig::parse(&config)?;
            let cfg = TrainConfig {
                base_lr: lr,
                patch,
                batch_size: batch,
                seed,
                ..TrainConfig::scaled(net.clone(), epochs)
            };
            cfg.validate()?;
            let dataset = load_dataset(&data)?;
            let state = Checkpoint::new(DcsfnParams::init(&net, seed)?).into_train_state();
            let mut write_err = None;
            let (state, _) = train_loop(state, &dataset, &cfg, |log, _| {
                match writeln!(out, "{log}") {
                    Ok(()) => ControlFlow::Continue(()),
                    Err(e) => {
                        write_err = Some(e);
                        ControlFlow::Break(())
                    }
                }
            })?;
            if let Some(e) = write_err {
                return Err(Error::io("<stdout>", e));
            }
            save_checkpoint(&path, &Checkpoint::from_train_state(state))
        }
        Command::Derain {
            ckpt,
            input,
            output,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let img = read_image(&input)?;
            let m = ckpt.config().size_multiple();
            let x: Tensor<f32> = pad_edges(&img.to_tensor(), m);
            let (_, background) = derain(&ckpt.params, &x)?;
            let s = background.shape();
            let cropped = Tensor::from_fn(s.with_spatial(img.height, img.width), |n, c, y, x| {
                background.at(n, c, y, x)
            });
            write_image(&output, &ImageBuffer::from_tensor(&clamp_unit(&cropped))?)
        }
        Command::Eval { ckpt, data } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let (psnr, ssim) = evaluate_dataset(&ckpt.params, &dataset)?;
            write_line(out, &format!("PSNR {psnr} SSIM {ssim}"))
        }
    }
}

/// Extends the bottom and right edges so both sides are multiples of `m`.
fn pad_edges(t: &Tensor<f32>, m: usize) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
    if (h, w) == (s.h, s.w) {
        return t.clone();
    }
    Tensor::from_fn(s.with_spatial(h, w), |n, c, y, x| {
        t.at(n, c, y.min(s.h - 1), x.min(s.w - 1))
    })
}
