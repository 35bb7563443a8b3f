//! Masked-patch reconstruction pre-training.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data_io::collate;
use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::{Encoder, TokenOptions};
use crate::error::{Error, Result};
use crate::optim::{AdamW, LrSchedule};
use crate::rng::Rng;
use crate::tensor::{no_grad, Scalar, Tensor, Var};
use crate::tokenizer::{PatchBatch, Recording};

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    /// Length of the cosine schedule.
    pub max_epochs: usize,
    /// Epochs actually run; the schedule is still laid out over `max_epochs`.
    pub stop_epoch: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub grad_clip: Option<f64>,
    pub patch_stride: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.5,
            alpha: 0.1,
            batch_size: 4096,
            peak_lr: 1.25e-3,
            min_lr: 2.5e-7,
            warmup_epochs: 3,
            max_epochs: 100,
            stop_epoch: 30,
            weight_decay: 0.05,
            betas: (0.9, 0.98),
            grad_clip: Some(1.0),
            patch_stride: 64,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 || self.patch_stride == 0 {
            return Err(Error::config("batch_size and patch_stride must be positive"));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if self.stop_epoch == 0 || self.stop_epoch > self.max_epochs {
            return Err(Error::config(format!(
                "stop_epoch {} must lie in 1..={}",
                self.stop_epoch, self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Result<LrSchedule> {
        LrSchedule::new(
            self.peak_lr,
            self.min_lr,
            self.warmup_epochs * steps_per_epoch,
            self.max_epochs * steps_per_epoch,
        )
    }

    pub fn optimizer(&self) -> AdamW {
        let mut opt = AdamW::new(self.betas, self.weight_decay);
        opt.clip = self.grad_clip;
        opt
    }
}

/// Mean squared patch errors over masked and visible positions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_masked: f64,
    pub l_visible: f64,
    pub total: f64,
}

/// `total = l_masked + alpha · l_visible`, where each term averages the
/// squared L2 norm of the patch error over its positions. Positions on pad
/// channels (`real[k] = false`) are in neither set.
///
/// `truth` and `pred` are `[B, C, Np, L]`; `masked` and `real` hold one
/// flag per `(b, c, i)` position.
pub fn reconstruction_loss<T: Scalar>(
    truth: &Tensor<T>,
    pred: &Var<T>,
    masked: &[bool],
    real: &[bool],
    alpha: f64,
) -> Result<(Var<T>, LossBreakdown)> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape("reconstruction_loss", truth.shape(), pred.shape()));
    }
    let l = *truth.shape().last().unwrap_or(&1);
    let positions = truth.len() / l;
    if masked.len() != positions || real.len() != positions {
        return Err(Error::InvalidShape {
            shape: truth.shape().to_vec(),
            reason: format!("{} mask flags and {} real flags", masked.len(), real.len()),
        });
    }
    let n_masked = masked.iter().zip(real).filter(|&(&m, &r)| m && r).count();
    let n_visible = masked.iter().zip(real).filter(|&(&m, &r)| !m && r).count();
    if n_masked == 0 {
        return Err(Error::contract("mask set is empty"));
    }
    let mut row_shape = truth.shape().to_vec();
    *row_shape.last_mut().unwrap() = 1;
    let weights = |pick: bool, n: usize| {
        let w = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let data = masked
            .iter()
            .zip(real)
            .map(|(&m, &r)| if r && m == pick { T::lit(w) } else { T::zero() })
            .collect();
        Var::constant(Tensor::from_parts(row_shape.clone(), data))
    };
    let per_patch = pred.sub(&Var::constant(truth.clone()))?.square().sum_axis(row_shape.len() - 1)?;
    let lm = per_patch.mul(&weights(true, n_masked))?.sum();
    let lv = per_patch.mul(&weights(false, n_visible))?.sum();
    let total = lm.add(&lv.scale(T::lit(alpha)))?;
    let breakdown = LossBreakdown {
        l_masked: lm.value().item().as_f64(),
        l_visible: lv.value().item().as_f64(),
        total: total.value().item().as_f64(),
    };
    Ok((total, breakdown))
}

fn forward_loss<T: Scalar>(
    model: &Encoder<T>,
    bound: &crate::params::Bound<T>,
    batch: &PatchBatch<T>,
    config: &PretrainConfig,
    mask_seed: u64,
) -> Result<(Var<T>, LossBreakdown)> {
    let tokens = model.tokens(
        bound,
        batch,
        TokenOptions {
            mask: Some((config.mask_ratio, mask_seed)),
            pad: false,
        },
    )?;
    let hidden = model.forward(bound, &tokens, None)?;
    let pred = model.reconstruct(bound, &hidden)?;
    reconstruction_loss(&tokens.raw_patches, &pred, &tokens.masked, &tokens.real_positions(), config.alpha)
}

/// Loss of `model` on `batch` without touching the weights.
pub fn evaluate<T: Scalar>(model: &Encoder<T>, batch: &PatchBatch<T>, config: &PretrainConfig, mask_seed: u64) -> Result<LossBreakdown> {
    no_grad(|| {
        let bound = model.store.bind_frozen();
        Ok(forward_loss(model, &bound, batch, config, mask_seed)?.1)
    })
}

/// One optimizer update. `batch_index` only labels errors.
pub fn pretrain_step<T: Scalar>(
    model: &mut Encoder<T>,
    optimizer: &mut AdamW,
    batch: &PatchBatch<T>,
    config: &PretrainConfig,
    lr: f64,
    mask_seed: u64,
    batch_index: usize,
) -> Result<LossBreakdown> {
    let bound = model.store.bind_all();
    let (loss, breakdown) = forward_loss(model, &bound, batch, config, mask_seed)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite {
            batch: batch_index,
            detail: format!(
                "l_masked {} l_visible {} total {}",
                breakdown.l_masked, breakdown.l_visible, breakdown.total
            ),
        });
    }
    let mut grads = loss.backward()?;
    optimizer
        .step(&mut model.store, &bound, &mut grads, lr)
        .map_err(|e| Error::NonFinite {
            batch: batch_index,
            detail: e.to_string(),
        })?;
    Ok(breakdown)
}

/// Epoch-mean losses as written to the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    pub loss: LossBreakdown,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,l_masked,l_visible,total,lr";

impl EpochLoss {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch, self.step, self.loss.l_masked, self.loss.l_visible, self.loss.total, self.lr
        )
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Lines written (prefixed by `# `) before the CSV header.
    pub preamble: Vec<String>,
}

pub const METRICS_FILE: &str = "pretrain_metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    /// Loss of the first step of each epoch, before its update.
    pub first_step: Vec<LossBreakdown>,
}

/// Deterministic example order of `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derived(seed, 0x5eed_0000 + epoch as u64).shuffle(&mut order);
    order
}

/// Mask seed of global step `step`.
pub fn mask_seed(seed: u64, step: usize) -> u64 {
    Rng::derived(seed, 0x6d61_736b_0000_0000 ^ step as u64).next_u64()
}

fn state_blobs<T: Scalar>(model: &Encoder<T>, opt: &AdamW, epoch: usize, step: usize) -> Vec<(String, Tensor<f32>)> {
    let mut blobs = opt.state_blobs(&model.store);
    blobs.push(("train.epoch".into(), Tensor::scalar(epoch as f32)));
    blobs.push(("train.step".into(), Tensor::scalar(step as f32)));
    blobs
}

/// Saves weights, optimizer moments and loop position.
pub fn save_training_state<T: Scalar>(path: &Path, model: &Encoder<T>, opt: &AdamW, epoch: usize, step: usize) -> Result<()> {
    model.to_checkpoint(state_blobs(model, opt, epoch, step)).save(path)
}

/// Training state restored from a checkpoint written during pre-training.
pub struct Resumed<T: Scalar> {
    pub model: Encoder<T>,
    pub optimizer: AdamW,
    /// Epochs already completed.
    pub epoch: usize,
    pub step: usize,
}

pub fn resume<T: Scalar>(path: &Path, config: &PretrainConfig) -> Result<Resumed<T>> {
    let ck = Checkpoint::load(path)?;
    let (model, extra) = Encoder::<T>::from_checkpoint(&ck)?;
    let mut optimizer = config.optimizer();
    optimizer.load_state(&model.store, &extra)?;
    let scalar = |name: &str| {
        extra
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data()[0] as usize)
            .ok_or_else(|| Error::contract(format!("{} has no {name}", path.display())))
    };
    Ok(Resumed {
        model,
        optimizer,
        epoch: scalar("train.epoch")?,
        step: scalar("train.step")?,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains for epochs `start_epoch + 1 ..= config.stop_epoch`. Pass a fresh
/// optimizer and `start_epoch = 0` for a new run, or the fields of a
/// [`Resumed`] to continue one.
pub fn pretrain_run<T: Scalar>(
    model: &mut Encoder<T>,
    optimizer: &mut AdamW,
    data: &[Recording],
    config: &PretrainConfig,
    start_epoch: usize,
    output: &RunOutput,
) -> Result<PretrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::contract("pre-training corpus is empty"));
    }
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let schedule = config.schedule(steps_per_epoch)?;
    let (patch_len, c_max) = (model.config().patch_len, model.config().c_max);
    let mut step = start_epoch * steps_per_epoch;
    let mut report = PretrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        first_step: Vec::new(),
    };
    let mut csv = String::new();
    for line in &output.preamble {
        csv.push_str(&format!("# {line}\n"));
    }
    csv.push_str(METRICS_HEADER);
    csv.push('\n');
    let mut best = f64::INFINITY;

    for epoch in start_epoch + 1..=config.stop_epoch {
        let order = epoch_order(data.len(), config.seed, epoch);
        let mut sum = LossBreakdown::default();
        let mut lr = 0.0;
        for (k, chunk) in order.chunks(config.batch_size).enumerate() {
            let recs: Vec<&Recording> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = collate::<T>(&recs, patch_len, config.patch_stride, c_max)?;
            lr = schedule.at(step);
            let loss = pretrain_step(model, optimizer, &batch, config, lr, mask_seed(config.seed, step), step)?;
            if k == 0 {
                report.first_step.push(loss);
            }
            sum.l_masked += loss.l_masked;
            sum.l_visible += loss.l_visible;
            sum.total += loss.total;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let mean = LossBreakdown {
            l_masked: sum.l_masked / n,
            l_visible: sum.l_visible / n,
            total: sum.total / n,
        };
        let row = EpochLoss {
            epoch,
            step,
            loss: mean,
            lr,
        };
        csv.push_str(&row.csv_row());
        csv.push('\n');
        report.epochs.push(row);
        if let Some(dir) = &output.dir {
            write_file(&dir.join(METRICS_FILE), &csv)?;
            if mean.total < best {
                save_training_state(&dir.join(BEST_CHECKPOINT), model, optimizer, epoch, step)?;
            }
        }
        if mean.total < best {
            best = mean.total;
            report.best_epoch = epoch;
        }
    }
    if let Some(dir) = &output.dir {
        write_file(&dir.join(METRICS_FILE), &csv)?;
        let epoch = start_epoch.max(report.epochs.last().map_or(0, |e| e.epoch));
        save_training_state(&dir.join(FINAL_CHECKPOINT), model, optimizer, epoch, step)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset_case(delta: f64, alpha: f64) -> LossBreakdown {
        let truth = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |i| (i as f64).sin());
        let pred = Var::constant(truth.map(|x| x + delta));
        let masked = vec![true, false, true, false, false, true];
        reconstruction_loss(&truth, &pred, &masked, &[true; 6], alpha).unwrap().1
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let b = offset_case(0.0, 0.1);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn uniform_offset_closed_form() {
        let (delta, alpha) = (0.3, 0.1);
        let b = offset_case(delta, alpha);
        let per = 4.0 * delta * delta;
        assert!((b.l_masked - per).abs() < 1e-12);
        assert!((b.l_visible - per).abs() < 1e-12);
        assert!((b.total - per * (1.0 + alpha)).abs() < 1e-12);
    }

    #[test]
    fn single_masked_patch_hand_sum() {
        let truth = Tensor::<f64>::zeros(&[1, 1, 2, 3]);
        let pred = Var::constant(Tensor::from_f64(&[1, 1, 2, 3], &[3.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap());
        let b = reconstruction_loss(&truth, &pred, &[true, false], &[true, true], 0.5).unwrap().1;
        assert_eq!(b.l_masked, 9.0);
        assert_eq!(b.l_visible, 2.0);
        assert_eq!(b.total, 10.0);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let truth = Tensor::<f64>::zeros(&[1, 1, 2, 3]);
        let pred = Var::constant(truth.clone());
        assert!(matches!(
            reconstruction_loss(&truth, &pred, &[false, false], &[true, true], 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn defaults_validate() {
        PretrainConfig::default().validate().unwrap();
        let bad = PretrainConfig {
            warmup_epochs: 100,
            ..PretrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
