//! Optimizer, learning-rate schedule, synthetic data and the training and
//! evaluation loops.

mod data;
mod optim;

use std::fmt;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{sample_patch, synth_rain_pair, RainPair, StreakParams};
pub use optim::{adam_step, AdamState, BETA1, BETA2, EPSILON};

use crate::error::{Error, Result};
use crate::metrics::{clamp_unit, psnr, ssim, ssim_loss, SsimConfig};
use crate::model::{dcsfn_forward, derain, DcsfnParams, NetConfig};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Epochs at which the learning rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub patch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub net: NetConfig,
}

impl TrainConfig {
    /// 800 epochs from 5e-4, dropping tenfold at 480 and 640, 64×64 patches.
    pub fn full(net: NetConfig) -> Self {
        TrainConfig {
            base_lr: 5e-4,
            lr_drop_epochs: vec![480, 640],
            total_epochs: 800,
            patch: 64,
            batch_size: 4,
            seed: 0,
            net,
        }
    }

    /// The full schedule compressed to `total_epochs`, with drops at 60% and 80%.
    pub fn scaled(net: NetConfig, total_epochs: usize) -> Self {
        let mut drops: Vec<usize> = [0.6, 0.8]
            .iter()
            .map(|r| (r * total_epochs as f64).ceil() as usize)
            .filter(|&e| e < total_epochs)
            .collect();
        drops.dedup();
        TrainConfig {
            lr_drop_epochs: drops,
            total_epochs,
            ..Self::full(net)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("TrainConfig", msg));
        self.net.validate()?;
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base learning rate {} must be non-negative", self.base_lr));
        }
        if self.total_epochs == 0 {
            return fail("total_epochs must be positive".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("drop epochs {:?} are not strictly increasing", self.lr_drop_epochs));
        }
        if self.lr_drop_epochs.iter().any(|&e| e >= self.total_epochs) {
            return fail(format!(
                "drop epochs {:?} must be below total_epochs {}",
                self.lr_drop_epochs, self.total_epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        self.net.check_input_size(self.patch, self.patch)
    }
}

/// `base_lr · 10^−d` where `d` counts the drop epochs `≤ e`.
pub fn lr_at_epoch(e: usize, cfg: &TrainConfig) -> Result<f64> {
    if e >= cfg.total_epochs {
        return Err(Error::invalid(
            "lr_at_epoch",
            format!("epoch {e} outside 0..{}", cfg.total_epochs),
        ));
    }
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| d <= e).count();
    Ok(cfg.base_lr / 10f64.powi(drops as i32))
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {} lr {} loss {}", self.epoch, self.lr, self.loss)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Mean loss of each epoch.
    pub epoch_loss: Vec<f64>,
    /// Loss of every optimizer step.
    pub step_loss: Vec<f64>,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: DcsfnParams<Tensor<T>>,
    pub optimizer: AdamState<T>,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl<T: Element> TrainState<T> {
    pub fn new(params: DcsfnParams<Tensor<T>>) -> Self {
        TrainState {
            optimizer: AdamState::for_model(&params),
            params,
            epoch: 0,
        }
    }
}

/// Forward, `−SSIM` loss, backward and one Adam step on a batch.
/// Returns the loss before the update.
pub fn train_step<T: Element>(
    state: &mut TrainState<T>,
    rainy: &Tensor<T>,
    clean: &Tensor<T>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, true);
    let x = tape.constant(rainy.clone());
    let target = tape.constant(clean.clone());
    let out = dcsfn_forward(&mut tape, x, &bound)?;
    let loss = ssim_loss(&mut tape, out.background, target, &SsimConfig::default())?;
    let value = tape.value(loss)?.item()?.as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    adam_step(&mut state.params, &bound, &grads, &mut state.optimizer, lr)?;
    Ok(value)
}

/// Trains from `state.epoch` up to `cfg.total_epochs`. Every epoch shuffles
/// the dataset, draws one patch per image and takes one step per batch.
/// `on_epoch` sees each log line and the current parameters, and may stop
/// training early.
pub fn train_loop<T: Element>(
    mut state: TrainState<T>,
    dataset: &[RainPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &DcsfnParams<Tensor<T>>) -> ControlFlow<()>,
) -> Result<(TrainState<T>, History)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    if state.params.config != cfg.net {
        return Err(Error::InvalidConfig(
            "parameters were built for a different network configuration".into(),
        ));
    }
    let mut history = History::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = state.optimizer.t as usize;
    while state.epoch < cfg.total_epochs {
        let epoch = state.epoch;
        let lr = lr_at_epoch(epoch, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let patches = batch
                .iter()
                .map(|&i| sample_patch(&dataset[i], cfg.patch, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let rainy: Vec<Tensor<T>> = patches.iter().map(|p| p.rainy.cast()).collect();
            let clean: Vec<Tensor<T>> = patches.iter().map(|p| p.clean.cast()).collect();
            let loss = train_step(&mut state, &Tensor::stack(&rainy)?, &Tensor::stack(&clean)?, lr)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            step += 1;
            losses.push(loss);
            history.step_loss.push(loss);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        history.epoch_loss.push(mean);
        state.epoch += 1;
        let log = EpochLog { epoch, lr, loss: mean };
        if on_epoch(&log, &state.params).is_break() {
            break;
        }
    }
    Ok((state, history))
}

/// Mean PSNR and SSIM of the clamped derained images over full-size pairs.
pub fn evaluate_dataset<T: Element>(
    params: &DcsfnParams<Tensor<T>>,
    dataset: &[RainPair],
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = SsimConfig::default();
    let (mut p_sum, mut s_sum) = (0.0, 0.0);
    for pair in dataset {
        let (_, background) = derain(params, &pair.rainy.cast())?;
        let estimate = clamp_unit(&background);
        let clean: Tensor<T> = pair.clean.cast();
        p_sum += psnr(&estimate, &clean, 1.0)?;
        s_sum += ssim(&estimate, &clean, &cfg)?;
    }
    let n = dataset.len() as f64;
    Ok((p_sum / n, s_sum / n))
}
