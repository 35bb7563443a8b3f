//! Pooled heads, linear probing and full fine-tuning.

use std::path::PathBuf;

use crate::data_io::collate;
use crate::encoder::{Encoder, HeadKind, TokenOptions};
use crate::error::{Error, Result};
use crate::optim::{AdamW, LrSchedule};
use crate::params::Bound;
use crate::pretrain::epoch_order;
use crate::rng::Rng;
use crate::tensor::{no_grad, Scalar, Tensor, Var};
use crate::tokenizer::Recording;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Train only the head on a frozen encoder.
    LinearProbe,
    /// Train everything with layer-wise learning-rate decay.
    Full,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_probe" | "linear-probe" | "probe" => Ok(FinetuneMode::LinearProbe),
            "full" => Ok(FinetuneMode::Full),
            _ => Err(Error::config(format!("unknown fine-tuning mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub layer_decay: f64,
    pub label_smoothing: f64,
    /// Noise standard deviation as a fraction of each channel's.
    pub noise_ratio: f64,
    pub noise_prob: f64,
    pub drop_path: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub batch_size: usize,
    pub patch_stride: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Full,
            layer_decay: 0.75,
            label_smoothing: 0.1,
            noise_ratio: 0.2,
            noise_prob: 0.5,
            drop_path: 0.1,
            epochs: 50,
            warmup_epochs: 5,
            peak_lr: 5e-4,
            min_lr: 2.5e-7,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            batch_size: 4096,
            patch_stride: 64,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::config(format!("layer_decay {} outside (0, 1]", self.layer_decay)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) || self.noise_ratio < 0.0 {
            return Err(Error::config("noise_prob must lie in [0, 1] and noise_ratio be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config(format!("drop_path {} outside [0, 1)", self.drop_path)));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.patch_stride == 0 {
            return Err(Error::config("batch_size and patch_stride must be positive"));
        }
        Ok(())
    }
}

/// Supervision for a set of recordings.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values(Vec<Vec<f64>>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_shape(&self) -> Result<(HeadKind, usize)> {
        match self {
            Targets::Classes { labels, n_classes } => {
                if *n_classes < 2 {
                    return Err(Error::config("classification needs at least two classes"));
                }
                if let Some(l) = labels.iter().find(|&&l| l >= *n_classes) {
                    return Err(Error::config(format!("label {l} outside {n_classes} classes")));
                }
                Ok((HeadKind::Classification, *n_classes))
            }
            Targets::Values(v) => {
                let m = v.first().map_or(0, Vec::len);
                if m == 0 || v.iter().any(|r| r.len() != m) {
                    return Err(Error::config("regression targets must share a positive width"));
                }
                Ok((HeadKind::Regression, m))
            }
        }
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

/// Mean over the real-channel tokens of each example:
/// `[B, C, Np, d_e] -> [B, d_e]`.
pub fn mean_pool<T: Scalar>(embeddings: &Var<T>, pad_mask: &[bool]) -> Result<Var<T>> {
    let [b, c, np, d] = match *embeddings.shape() {
        [b, c, np, d] => [b, c, np, d],
        _ => {
            return Err(Error::InvalidShape {
                shape: embeddings.shape().to_vec(),
                reason: "expected [batch, channels, patches, width]".into(),
            })
        }
    };
    if pad_mask.len() != b * c {
        return Err(Error::InvalidShape {
            shape: embeddings.shape().to_vec(),
            reason: format!("pad mask has {} entries", pad_mask.len()),
        });
    }
    let mut weights = Vec::with_capacity(b * c);
    for (k, chans) in pad_mask.chunks(c).enumerate() {
        let real = chans.iter().filter(|&&r| r).count();
        if real == 0 {
            return Err(Error::contract(format!("example {k} has no real channels to pool")));
        }
        let w = 1.0 / (real * np) as f64;
        weights.extend(chans.iter().map(|&r| if r { T::lit(w) } else { T::zero() }));
    }
    let w = Var::constant(Tensor::from_parts(vec![b, c, 1, 1], weights));
    embeddings.mul(&w)?.sum_axis(2)?.sum_axis(1)?.reshape(&[b, d])
}

/// Cross-entropy against `(1 - eps)·onehot + eps/K`, averaged over the
/// batch. `logits: [B, K]`.
pub fn smoothed_cross_entropy<T: Scalar>(logits: &Var<T>, labels: &[usize], eps: f64) -> Result<Var<T>> {
    let [b, k] = match *logits.shape() {
        [b, k] => [b, k],
        _ => return Err(Error::InvalidShape { shape: logits.shape().to_vec(), reason: "expected [batch, classes]".into() }),
    };
    if labels.len() != b {
        return Err(Error::contract(format!("{} labels for {b} logits", labels.len())));
    }
    let off = eps / k as f64;
    let mut q = vec![T::lit(off); b * k];
    for (row, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::config(format!("label {y} outside {k} classes")));
        }
        q[row * k + y] = T::lit(1.0 - eps + off);
    }
    let q = Var::constant(Tensor::from_parts(vec![b, k], q));
    Ok(logits.log_softmax().mul(&q)?.sum().scale(T::lit(-1.0 / b as f64)))
}

/// Minimum of [`smoothed_cross_entropy`] over predictions: the entropy of
/// the smoothed target.
pub fn smoothing_floor(eps: f64, k: usize) -> f64 {
    let off = eps / k as f64;
    let on = 1.0 - eps + off;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(on) + (k - 1) as f64 * term(off)
}

/// Mean squared error over every element. `pred: [B, M]`.
pub fn mse<T: Scalar>(pred: &Var<T>, targets: &[Vec<f64>]) -> Result<Var<T>> {
    let data: Vec<T> = targets.iter().flatten().map(|&v| T::lit(v)).collect();
    let t = Tensor::new(pred.shape(), data)?;
    Ok(pred.sub(&Var::constant(t))?.square().mean())
}

/// Mean of per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut hit = vec![0usize; n_classes];
    let mut count = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        count[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let recalls: Vec<f64> = hit
        .iter()
        .zip(&count)
        .filter(|(_, &n)| n > 0)
        .map(|(&h, &n)| h as f64 / n as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len().max(1) as f64
}

/// Area under the ROC curve of `scores` for binary `positive` labels,
/// with tied scores counted as half. `None` without both classes.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // average ranks over ties
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Average precision: mean of the precision at each positive, ranking by
/// descending score.
pub fn aupr(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if positive[k] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

fn macro_average(scores: &[Vec<f64>], truth: &[usize], n_classes: usize, f: fn(&[f64], &[bool]) -> Option<f64>) -> f64 {
    let vals: Vec<f64> = (0..n_classes)
        .filter_map(|k| {
            let s: Vec<f64> = scores.iter().map(|row| row[k]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == k).collect();
            f(&s, &pos)
        })
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// One-vs-rest AUROC averaged over classes.
pub fn macro_auroc(probs: &[Vec<f64>], truth: &[usize], n_classes: usize) -> f64 {
    macro_average(probs, truth, n_classes, auroc)
}

pub fn macro_aupr(probs: &[Vec<f64>], truth: &[usize], n_classes: usize) -> f64 {
    macro_average(probs, truth, n_classes, aupr)
}

/// Coefficient of determination per target column, averaged.
pub fn r2(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let m = truth.first().map_or(0, Vec::len);
    let n = truth.len() as f64;
    let mut total = 0.0;
    for j in 0..m {
        let mean = truth.iter().map(|t| t[j]).sum::<f64>() / n;
        let ss_tot: f64 = truth.iter().map(|t| (t[j] - mean).powi(2)).sum();
        let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t[j] - p[j]).powi(2)).sum();
        total += if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    }
    total / m.max(1) as f64
}

pub fn rmse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> f64 {
    let (sum, n) = pred
        .iter()
        .zip(truth)
        .flat_map(|(p, t)| p.iter().zip(t))
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t).powi(2), n + 1));
    (sum / n.max(1) as f64).sqrt()
}

fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Per-epoch metrics of one split.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitMetrics {
    Classification { loss: f64, balanced_acc: f64, auroc: f64, aupr: f64 },
    Regression { loss: f64, r2: f64, rmse: f64 },
}

impl SplitMetrics {
    pub fn loss(&self) -> f64 {
        match self {
            SplitMetrics::Classification { loss, .. } | SplitMetrics::Regression { loss, .. } => *loss,
        }
    }

    pub fn balanced_accuracy(&self) -> Option<f64> {
        match self {
            SplitMetrics::Classification { balanced_acc, .. } => Some(*balanced_acc),
            SplitMetrics::Regression { .. } => None,
        }
    }

    fn csv_fields(&self) -> String {
        match self {
            SplitMetrics::Classification {
                loss,
                balanced_acc,
                auroc,
                aupr,
            } => format!("{loss:.9e},{balanced_acc:.6},{auroc:.6},{aupr:.6}"),
            SplitMetrics::Regression { loss, r2, rmse } => format!("{loss:.9e},{r2:.6},{rmse:.9e}"),
        }
    }
}

pub fn metrics_header(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Classification => "epoch,split,loss,balanced_acc,auroc,aupr",
        HeadKind::Regression => "epoch,split,loss,r2,rmse",
    }
}

/// Scores model outputs against targets. `loss` is supplied by the caller.
pub fn score(outputs: &[Vec<f64>], targets: &Targets, loss: f64) -> SplitMetrics {
    match targets {
        Targets::Classes { labels, n_classes } => {
            let probs = softmax_rows(outputs);
            let pred: Vec<usize> = outputs.iter().map(|r| argmax(r)).collect();
            SplitMetrics::Classification {
                loss,
                balanced_acc: balanced_accuracy(&pred, labels, *n_classes),
                auroc: macro_auroc(&probs, labels, *n_classes),
                aupr: macro_aupr(&probs, labels, *n_classes),
            }
        }
        Targets::Values(v) => SplitMetrics::Regression {
            loss,
            r2: r2(outputs, v),
            rmse: rmse(outputs, v),
        },
    }
}

/// With probability `prob`, adds `N(0, (ratio·σ_c)²)` noise to every
/// sample of channel `c`.
pub fn augment_noise(rec: &Recording, ratio: f64, prob: f64, rng: &mut Rng) -> Recording {
    if ratio == 0.0 || !rng.bernoulli(prob) {
        return rec.clone();
    }
    let stats = rec.channel_stats();
    let c = rec.n_channels();
    let mut out = rec.clone();
    for (i, s) in out.samples_mut().iter_mut().enumerate() {
        *s += (ratio * stats[i % c].1 * rng.normal()) as f32;
    }
    out
}

/// Attaches a head matching `targets`, or checks an existing one.
pub fn ensure_head<T: Scalar>(model: &mut Encoder<T>, targets: &Targets, seed: u64) -> Result<()> {
    let (kind, outputs) = targets.head_shape()?;
    match model.head() {
        None => model.attach_head(kind, outputs, seed).map(|_| ()),
        Some(h) if h.kind == kind && h.outputs == outputs => Ok(()),
        Some(h) => Err(Error::config(format!(
            "model head is {:?} with {} outputs, labels need {kind:?} with {outputs}",
            h.kind, h.outputs
        ))),
    }
}

struct Batch<T: Scalar> {
    output: Var<T>,
    loss: Var<T>,
}

fn run_batch<T: Scalar>(
    model: &Encoder<T>,
    bound: &Bound<T>,
    recs: &[&Recording],
    targets: &Targets,
    config: &FinetuneConfig,
    drop_path: Option<&mut Rng>,
) -> Result<Batch<T>> {
    let c = model.config();
    let batch = collate::<T>(recs, c.patch_len, config.patch_stride, c.c_max)?;
    let pooled = {
        let encode = || -> Result<Var<T>> {
            let tokens = model.tokens(bound, &batch, TokenOptions::default())?;
            let hidden = model.forward(bound, &tokens, drop_path)?;
            mean_pool(&hidden, &tokens.pad_mask)
        };
        if config.mode == FinetuneMode::LinearProbe {
            Var::constant(no_grad(encode)?.value().clone())
        } else {
            encode()?
        }
    };
    let output = model.apply_head(bound, &pooled)?;
    let loss = match targets {
        Targets::Classes { labels, .. } => smoothed_cross_entropy(&output, labels, config.label_smoothing)?,
        Targets::Values(v) => mse(&output, v)?,
    };
    Ok(Batch { output, loss })
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let k = *t.shape().last().unwrap_or(&1);
    t.to_f64_vec().chunks(k).map(<[f64]>::to_vec).collect()
}

/// Head outputs (logits or regression values) in evaluation mode.
pub fn predict<T: Scalar>(model: &Encoder<T>, recordings: &[Recording], patch_stride: usize, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    no_grad(|| {
        let bound = model.store.bind_frozen();
        let c = model.config();
        let mut out = Vec::with_capacity(recordings.len());
        for chunk in recordings.chunks(batch_size.max(1)) {
            let recs: Vec<&Recording> = chunk.iter().collect();
            let batch = collate::<T>(&recs, c.patch_len, patch_stride, c.c_max)?;
            let tokens = model.tokens(&bound, &batch, TokenOptions::default())?;
            let hidden = model.forward(&bound, &tokens, None)?;
            let pooled = mean_pool(&hidden, &tokens.pad_mask)?;
            out.extend(rows(model.apply_head(&bound, &pooled)?.value()));
        }
        Ok(out)
    })
}

/// Loss and metrics of `model` on a labeled split, without augmentation.
pub fn evaluate<T: Scalar>(model: &Encoder<T>, recordings: &[Recording], targets: &Targets, config: &FinetuneConfig) -> Result<SplitMetrics> {
    let outputs = predict(model, recordings, config.patch_stride, config.batch_size)?;
    let t = Tensor::<f64>::from_fn(&[outputs.len(), outputs[0].len()], |i| outputs[i / outputs[0].len()][i % outputs[0].len()]);
    let loss = match targets {
        Targets::Classes { labels, .. } => smoothed_cross_entropy(&Var::constant(t), labels, config.label_smoothing)?,
        Targets::Values(v) => mse(&Var::constant(t), v)?,
    };
    Ok(score(&outputs, targets, loss.value().item()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train: SplitMetrics,
    pub val: Option<SplitMetrics>,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOutput {
    pub dir: Option<PathBuf>,
    pub preamble: Vec<String>,
}

pub const METRICS_FILE: &str = "finetune_metrics.csv";
pub const CHECKPOINT: &str = "finetuned.ckpt";

/// Labeled recordings.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub recordings: &'a [Recording],
    pub targets: &'a Targets,
}

pub fn finetune_run<T: Scalar>(
    model: &mut Encoder<T>,
    train: Split<'_>,
    val: Option<Split<'_>>,
    config: &FinetuneConfig,
    output: &FinetuneOutput,
) -> Result<Vec<FinetuneEpoch>> {
    config.validate()?;
    if train.recordings.is_empty() || train.recordings.len() != train.targets.len() {
        return Err(Error::contract(format!(
            "{} training recordings with {} targets",
            train.recordings.len(),
            train.targets.len()
        )));
    }
    ensure_head(model, train.targets, config.seed)?;
    if let Some(v) = val {
        if v.targets.head_shape()? != train.targets.head_shape()? {
            return Err(Error::config("validation targets do not match the training head"));
        }
    }
    let kind = model.head().map(|h| h.kind).unwrap_or(HeadKind::Classification);
    let steps_per_epoch = train.recordings.len().div_ceil(config.batch_size);
    let schedule = LrSchedule::new(
        config.peak_lr,
        config.min_lr,
        config.warmup_epochs * steps_per_epoch,
        config.epochs * steps_per_epoch,
    )?;
    let mut opt = AdamW::new(config.betas, config.weight_decay);
    opt.clip = config.grad_clip;
    opt.layer_decay = match config.mode {
        FinetuneMode::Full => config.layer_decay,
        FinetuneMode::LinearProbe => 1.0,
    };
    let rate = match config.mode {
        FinetuneMode::Full => config.drop_path,
        FinetuneMode::LinearProbe => 0.0,
    };
    let saved = model.config().drop_path_rate;
    model.set_drop_path(rate)?;
    let result = train_epochs(model, train, val, config, output, kind, &schedule, &mut opt);
    model.set_drop_path(saved)?;
    let history = result?;
    if let Some(dir) = &output.dir {
        model.save(dir.join(CHECKPOINT))?;
    }
    Ok(history)
}

#[allow(clippy::too_many_arguments)]
fn train_epochs<T: Scalar>(
    model: &mut Encoder<T>,
    train: Split<'_>,
    val: Option<Split<'_>>,
    config: &FinetuneConfig,
    output: &FinetuneOutput,
    kind: HeadKind,
    schedule: &LrSchedule,
    opt: &mut AdamW,
) -> Result<Vec<FinetuneEpoch>> {
    let steps_per_epoch = train.recordings.len().div_ceil(config.batch_size);
    let mut aug_rng = Rng::derived(config.seed, 0xa06);
    let mut drop_rng = Rng::derived(config.seed, 0xd409);
    let mut csv: String = output.preamble.iter().map(|l| format!("# {l}\n")).collect();
    csv.push_str(metrics_header(kind));
    csv.push('\n');
    let mut history = Vec::new();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let order = epoch_order(train.recordings.len(), config.seed ^ 0xf1e, epoch);
        let mut loss_sum = 0.0;
        let mut outputs = Vec::with_capacity(order.len());
        for chunk in order.chunks(config.batch_size) {
            let recs: Vec<Recording> = chunk
                .iter()
                .map(|&i| augment_noise(&train.recordings[i], config.noise_ratio, config.noise_prob, &mut aug_rng))
                .collect();
            let refs: Vec<&Recording> = recs.iter().collect();
            let targets = train.targets.subset(chunk);
            let bound = match config.mode {
                FinetuneMode::Full => model.store.bind_all(),
                FinetuneMode::LinearProbe => model.store.bind(|e| Encoder::<T>::is_head_param(&e.name)),
            };
            let drop = (config.mode == FinetuneMode::Full).then_some(&mut drop_rng);
            let b = run_batch(model, &bound, &refs, &targets, config, drop)?;
            let loss = b.loss.value().item().as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    batch: step,
                    detail: format!("fine-tuning loss {loss}"),
                });
            }
            loss_sum += loss;
            outputs.extend(rows(b.output.value()));
            let mut grads = b.loss.backward()?;
            opt.step(&mut model.store, &bound, &mut grads, schedule.at(step))?;
            step += 1;
        }
        let train_targets = train.targets.subset(&order);
        let train_metrics = score(&outputs, &train_targets, loss_sum / steps_per_epoch as f64);
        csv.push_str(&format!("{epoch},train,{}\n", train_metrics.csv_fields()));
        let val_metrics = match val {
            Some(v) => {
                let m = evaluate(model, v.recordings, v.targets, config)?;
                csv.push_str(&format!("{epoch},val,{}\n", m.csv_fields()));
                Some(m)
            }
            None => None,
        };
        history.push(FinetuneEpoch {
            epoch,
            train: train_metrics,
            val: val_metrics,
        });
        if let Some(dir) = &output.dir {
            let path = dir.join(METRICS_FILE);
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_of_constant_tokens() {
        let v = [0.5, -1.0, 2.0];
        let x = Var::constant(Tensor::<f64>::from_fn(&[2, 3, 4, 3], |i| v[i % 3]));
        let p = mean_pool(&x, &[true, true, false, true, false, false]).unwrap();
        for row in p.value().data().chunks(3) {
            assert_eq!(row, v);
        }
        assert!(matches!(
            mean_pool(&x, &[false, false, false, true, true, true]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn smoothing_floor_is_attained_at_target() {
        let (eps, k) = (0.1, 4);
        let off = eps / k as f64;
        let q = [1.0 - eps + off, off, off, off];
        let logits = Var::constant(Tensor::<f64>::from_f64(&[1, 4], &q.map(f64::ln)).unwrap());
        let loss = smoothed_cross_entropy(&logits, &[0], eps).unwrap().value().item();
        assert!((loss - smoothing_floor(eps, k)).abs() < 1e-12);
        let sharp = Var::constant(Tensor::<f64>::from_f64(&[1, 4], &[30.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(smoothed_cross_entropy(&sharp, &[0], eps).unwrap().value().item() > smoothing_floor(eps, k));
    }

    #[test]
    fn balanced_accuracy_equals_accuracy_when_balanced() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 1, 1, 1, 0, 2];
        let acc = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / 6.0;
        assert!((balanced_accuracy(&pred, &truth, 3) - acc).abs() < 1e-15);
        assert!((balanced_accuracy(&[0, 0, 0, 1], &[0, 0, 0, 0], 2) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn ranking_metrics() {
        let pos = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &pos), Some(1.0));
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &pos), Some(0.0));
        assert_eq!(auroc(&[0.5; 4], &pos), Some(0.5));
        assert_eq!(aupr(&[0.1, 0.2, 0.8, 0.9], &pos), Some(1.0));
        // positives at ranks 1 and 3: (1/1 + 2/3) / 2
        let ap = aupr(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn regression_metrics() {
        let truth = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(r2(&truth, &truth), 1.0);
        assert_eq!(rmse(&truth, &truth), 0.0);
        let mean = vec![vec![2.0]; 3];
        assert_eq!(r2(&mean, &truth), 0.0);
    }

    #[test]
    fn noise_scales_with_channel_std() {
        let rec = Recording::with_default_ids((0..2000).map(|i| if i % 2 == 0 { (i as f32).sin() * 10.0 } else { 0.0 }).collect(), 100.0, 2).unwrap();
        let mut rng = Rng::new(4);
        let noisy = augment_noise(&rec, 0.2, 1.0, &mut rng);
        let diff: Vec<f64> = noisy.samples().iter().zip(rec.samples()).map(|(a, b)| f64::from(a - b)).collect();
        let std0 = (diff.iter().step_by(2).map(|d| d * d).sum::<f64>() / 1000.0).sqrt();
        let expected = 0.2 * rec.channel_stats()[0].1;
        assert!((std0 / expected - 1.0).abs() < 0.1);
        assert!(diff.iter().skip(1).step_by(2).all(|&d| d == 0.0));
    }
}
