//! Waveform recordings to embedded token grids.
//!
//! A `T × C` recording is cut per channel into `Np = floor((T - L)/S + 1)`
//! patches of `L` samples. Each patch is projected to `d_e`, then a
//! positional embedding (patch index) and a channel embedding are added.
//! Absent channels carry a shared `[PAD]` embedding and masked positions a
//! shared `[MASK]` embedding; both still receive the positional embedding,
//! and masked positions also keep their channel embedding.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor, Var};

/// Largest channel count a model accepts.
pub const MAX_CHANNELS: usize = 64;
/// Largest patch count per channel a model accepts.
pub const MAX_PATCHES: usize = 64;
pub const DEFAULT_PATCH_LEN: usize = 64;

/// Multi-channel waveform, stored time-major (`samples[t * C + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    samples: Vec<f32>,
    n_channels: usize,
    sampling_rate: f32,
    channel_ids: Vec<String>,
}

impl Recording {
    pub fn new(samples: Vec<f32>, sampling_rate: f32, channel_ids: Vec<String>) -> Result<Self> {
        let c = channel_ids.len();
        if c == 0 || c > MAX_CHANNELS {
            return Err(Error::Range {
                what: "channel count",
                value: c,
                limit: MAX_CHANNELS,
            });
        }
        if samples.is_empty() || samples.len() % c != 0 {
            return Err(Error::contract(format!(
                "{} samples do not fill whole frames of {c} channels",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite sample at time {} channel {}",
                i / c,
                i % c
            )));
        }
        if !(sampling_rate.is_finite() && sampling_rate > 0.0) {
            return Err(Error::config(format!("sampling rate {sampling_rate} must be positive")));
        }
        Ok(Self {
            samples,
            n_channels: c,
            sampling_rate,
            channel_ids,
        })
    }

    /// Channel ids `ch0..ch{C-1}`.
    pub fn with_default_ids(samples: Vec<f32>, sampling_rate: f32, n_channels: usize) -> Result<Self> {
        Self::new(samples, sampling_rate, (0..n_channels).map(|c| format!("ch{c}")).collect())
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len() / self.n_channels
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn sampling_rate(&self) -> f32 {
        self.sampling_rate
    }

    pub fn channel_ids(&self) -> &[String] {
        &self.channel_ids
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    pub fn sample(&self, t: usize, c: usize) -> f32 {
        self.samples[t * self.n_channels + c]
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        self.samples.iter().skip(c).step_by(self.n_channels).copied()
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> Vec<(f64, f64)> {
        let t = self.n_samples() as f64;
        (0..self.n_channels)
            .map(|c| {
                let mean = self.channel(c).map(f64::from).sum::<f64>() / t;
                let var = self.channel(c).map(|x| (f64::from(x) - mean).powi(2)).sum::<f64>() / t;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// Per-channel z-scoring. Constant channels are only centred.
    pub fn zscore(&mut self) {
        let stats = self.channel_stats();
        let c = self.n_channels;
        for (i, s) in self.samples.iter_mut().enumerate() {
            let (mean, std) = stats[i % c];
            let centred = f64::from(*s) - mean;
            *s = if std > 0.0 { (centred / std) as f32 } else { centred as f32 };
        }
    }

    /// Keeps the first `n_samples` frames.
    pub fn crop(&mut self, n_samples: usize) {
        self.samples.truncate(n_samples.max(1) * self.n_channels);
    }
}

/// Number of length-`patch_len` patches at `stride` in `n_samples` samples.
pub fn patch_count(n_samples: usize, patch_len: usize, stride: usize) -> usize {
    if patch_len > n_samples || stride == 0 {
        return 0;
    }
    (n_samples - patch_len) / stride + 1
}

/// Patches laid out `[Np, C, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub n_patches: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn patch(&self, channel: usize, index: usize) -> &[f32] {
        let o = (index * self.channels + channel) * self.patch_len;
        &self.data[o..o + self.patch_len]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Cuts a recording into per-channel patches; samples after the last full
/// patch are dropped.
pub fn patch(rec: &Recording, patch_len: usize, stride: usize) -> Result<PatchGrid> {
    if stride == 0 || patch_len == 0 {
        return Err(Error::config("patch length and stride must be positive"));
    }
    let t = rec.n_samples();
    if patch_len > t {
        return Err(Error::RecordingTooShort {
            samples: t,
            patch_len,
        });
    }
    let n_patches = patch_count(t, patch_len, stride);
    let c = rec.n_channels();
    let mut data = Vec::with_capacity(n_patches * c * patch_len);
    for i in 0..n_patches {
        for ch in 0..c {
            let start = i * stride;
            data.extend((start..start + patch_len).map(|s| rec.sample(s, ch)));
        }
    }
    Ok(PatchGrid {
        n_patches,
        channels: c,
        patch_len,
        stride,
        data,
    })
}

/// Patch grids of a batch, padded along the channel axis.
#[derive(Debug, Clone)]
pub struct PatchBatch<T: Scalar> {
    /// `[B, C, Np, L]`, zeros on pad channels.
    pub patches: Tensor<T>,
    /// `[B·C]`, `true` for real channels.
    pub pad_mask: Vec<bool>,
    /// `[B·C]` channel-embedding row of each channel slot.
    pub channel_rows: Vec<usize>,
}

impl<T: Scalar> PatchBatch<T> {
    /// Stacks grids sharing `Np` and `L`, padding each to `channels` slots.
    /// Channel `c` of every example uses embedding row `c`.
    pub fn from_grids(grids: &[PatchGrid], channels: usize) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::contract("empty batch"))?;
        let (np, l) = (first.n_patches, first.patch_len);
        let b = grids.len();
        let mut data = vec![T::zero(); b * channels * np * l];
        let mut pad_mask = vec![false; b * channels];
        for (k, g) in grids.iter().enumerate() {
            if g.n_patches != np || g.patch_len != l {
                return Err(Error::contract(format!(
                    "example {k} has {}x{} patches, expected {np}x{l}",
                    g.n_patches, g.patch_len
                )));
            }
            if g.channels > channels {
                return Err(Error::Range {
                    what: "channel count",
                    value: g.channels,
                    limit: channels,
                });
            }
            for c in 0..g.channels {
                pad_mask[k * channels + c] = true;
                for i in 0..np {
                    let o = ((k * channels + c) * np + i) * l;
                    for (dst, &src) in data[o..o + l].iter_mut().zip(g.patch(c, i)) {
                        *dst = T::lit(f64::from(src));
                    }
                }
            }
        }
        Ok(Self {
            patches: Tensor::from_parts(vec![b, channels, np, l], data),
            pad_mask,
            channel_rows: (0..b).flat_map(|_| 0..channels).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn n_patches(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn patch_len(&self) -> usize {
        self.patches.shape()[3]
    }
}

/// Parameter handles for the token embedding.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSlots {
    /// `[L, d_e]`, applied as `patch · W`.
    pub proj: ParamId,
    /// `[Np_max, d_e]`.
    pub pos: ParamId,
    /// `[C_max, d_e]`.
    pub chan: ParamId,
    pub mask_token: ParamId,
    pub pad_token: ParamId,
}

impl EmbeddingSlots {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        patch_len: usize,
        d_e: usize,
        max_patches: usize,
        max_channels: usize,
        group: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            proj: store.add_weight("embed.proj", &[patch_len, d_e], group, rng),
            pos: store.add_weight("embed.pos", &[max_patches, d_e], group, rng),
            chan: store.add_weight("embed.chan", &[max_channels, d_e], group, rng),
            mask_token: store.add_weight("embed.mask_token", &[d_e], group, rng),
            pad_token: store.add_weight("embed.pad_token", &[d_e], group, rng),
        }
    }

    pub fn bind<T: Scalar>(&self, bound: &Bound<T>) -> EmbeddingParams<T> {
        EmbeddingParams {
            proj: bound.var(self.proj).clone(),
            pos: bound.var(self.pos).clone(),
            chan: bound.var(self.chan).clone(),
            mask_token: bound.var(self.mask_token).clone(),
            pad_token: bound.var(self.pad_token).clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams<T: Scalar> {
    pub proj: Var<T>,
    pub pos: Var<T>,
    pub chan: Var<T>,
    pub mask_token: Var<T>,
    pub pad_token: Var<T>,
}

impl<T: Scalar> EmbeddingParams<T> {
    pub fn d_e(&self) -> usize {
        self.proj.shape()[1]
    }

    pub fn max_patches(&self) -> usize {
        self.pos.shape()[0]
    }

    pub fn max_channels(&self) -> usize {
        self.chan.shape()[0]
    }

    fn positions(&self, np: usize) -> Result<Var<T>> {
        if np > self.max_patches() {
            return Err(Error::Range {
                what: "patch count",
                value: np,
                limit: self.max_patches(),
            });
        }
        self.pos.gather_rows(&(0..np).collect::<Vec<_>>())
    }

    /// Channel embeddings for `rows`, shaped `[B, C, 1, d_e]`.
    fn channels(&self, rows: &[usize], b: usize, c: usize) -> Result<Var<T>> {
        self.chan.gather_rows(rows)?.reshape(&[b, c, 1, self.d_e()])
    }
}

/// Embedded tokens plus the bookkeeping the loss and pooling need.
#[derive(Debug, Clone)]
pub struct TokenBatch<T: Scalar> {
    /// `[B, C, Np, d_e]`.
    pub tokens: Var<T>,
    /// `[B·C]`, `true` for real channels.
    pub pad_mask: Vec<bool>,
    /// `[B·C·Np]`, `true` where the token was replaced by `[MASK]`.
    pub masked: Vec<bool>,
    /// `[B, C, Np, L]` ground-truth patches.
    pub raw_patches: Tensor<T>,
    pub channel_rows: Vec<usize>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn n_patches(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Masked `(channel, patch)` positions of example `b`.
    pub fn mask_set(&self, b: usize) -> Vec<(usize, usize)> {
        let (c, np) = (self.channels(), self.n_patches());
        (0..c)
            .flat_map(|ch| (0..np).map(move |i| (ch, i)))
            .filter(|&(ch, i)| self.masked[(b * c + ch) * np + i])
            .collect()
    }

    /// Per-position flags `[B·C·Np]` for real channels.
    pub fn real_positions(&self) -> Vec<bool> {
        let np = self.n_patches();
        self.pad_mask
            .iter()
            .flat_map(|&r| std::iter::repeat(r).take(np))
            .collect()
    }
}

/// `token(c, i) = patch(c, i) · W_proj + W_pos[i] + W_chan[row(c)]`.
pub fn embed<T: Scalar>(batch: &PatchBatch<T>, params: &EmbeddingParams<T>) -> Result<TokenBatch<T>> {
    let (b, c, np, l) = (batch.batch_size(), batch.channels(), batch.n_patches(), batch.patch_len());
    if params.proj.shape()[0] != l {
        return Err(Error::shape("embed", batch.patches.shape(), params.proj.shape()));
    }
    if let Some(&row) = batch.channel_rows.iter().find(|&&r| r >= params.max_channels()) {
        return Err(Error::Range {
            what: "channel index",
            value: row,
            limit: params.max_channels(),
        });
    }
    let patches = Var::constant(batch.patches.clone());
    let tokens = patches
        .matmul(&params.proj)?
        .add(&params.positions(np)?)?
        .add(&params.channels(&batch.channel_rows, b, c)?)?;
    Ok(TokenBatch {
        tokens,
        pad_mask: batch.pad_mask.clone(),
        masked: vec![false; b * c * np],
        raw_patches: batch.patches.clone(),
        channel_rows: batch.channel_rows.clone(),
    })
}

/// Extends the channel axis to `max_channels` and writes `[PAD] + W_pos[i]`
/// into every position of every pad channel.
pub fn pad_channels<T: Scalar>(
    batch: TokenBatch<T>,
    params: &EmbeddingParams<T>,
    max_channels: usize,
) -> Result<TokenBatch<T>> {
    let (b, c, np) = (batch.batch_size(), batch.channels(), batch.n_patches());
    let d = params.d_e();
    if c > max_channels {
        return Err(Error::Range {
            what: "channel count",
            value: c,
            limit: max_channels,
        });
    }
    let pad_row = params.pad_token.add(&params.positions(np)?)?; // [Np, d]
    let TokenBatch {
        mut tokens,
        mut pad_mask,
        mut masked,
        mut raw_patches,
        mut channel_rows,
    } = batch;

    if c < max_channels {
        let extra = max_channels - c;
        let spread = Var::constant(Tensor::zeros(&[b, extra, 1, 1]));
        tokens = Var::concat(&[tokens, pad_row.add(&spread)?], 1)?;
        let l = raw_patches.shape()[3];
        raw_patches = crate::tensor::kernels::concat(&[&raw_patches, &Tensor::zeros(&[b, extra, np, l])], 1)?;
        let widen = |v: &[bool], per: usize| -> Vec<bool> {
            v.chunks(c * per)
                .flat_map(|ex| ex.iter().copied().chain(std::iter::repeat(false).take(extra * per)))
                .collect()
        };
        pad_mask = widen(&pad_mask, 1);
        masked = widen(&masked, np);
        channel_rows = (0..b).flat_map(|_| 0..max_channels).collect();
    }

    if pad_mask.iter().any(|&r| !r) {
        let rows: Vec<bool> = pad_mask.iter().flat_map(|&r| std::iter::repeat(!r).take(np)).collect();
        let spread = Var::constant(Tensor::zeros(&[b, max_channels, 1, 1]));
        let pads = pad_row.add(&spread)?;
        debug_assert_eq!(pads.shape(), &[b, max_channels, np, d]);
        tokens = pads.where_rows(&rows, &tokens)?;
    }
    Ok(TokenBatch {
        tokens,
        pad_mask,
        masked,
        raw_patches,
        channel_rows,
    })
}

/// Number of positions masked out of `n` at `ratio`, rounding half to even.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round_ties_even() as usize
}

/// Replaces a uniformly drawn `round(ratio · C_real · Np)` real positions of
/// every example with `[MASK] + W_pos[i] + W_chan[c]`. The draw depends only
/// on `seed` and the batch layout.
pub fn mask_tokens<T: Scalar>(
    batch: TokenBatch<T>,
    params: &EmbeddingParams<T>,
    ratio: f64,
    seed: u64,
) -> Result<TokenBatch<T>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::contract(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let (b, c, np) = (batch.batch_size(), batch.channels(), batch.n_patches());
    let mut masked = batch.masked.clone();
    let mut rng = Rng::new(seed);
    for ex in 0..b {
        let real: Vec<usize> = (0..c)
            .filter(|&ch| batch.pad_mask[ex * c + ch])
            .flat_map(|ch| (0..np).map(move |i| (ex * c + ch) * np + i))
            .collect();
        let k = mask_count(ratio, real.len());
        for pick in rng.sample_indices(real.len(), k) {
            masked[real[pick]] = true;
        }
    }
    if masked == batch.masked {
        return Ok(batch);
    }
    let replacement = params
        .mask_token
        .add(&params.positions(np)?)?
        .add(&params.channels(&batch.channel_rows, b, c)?)?;
    let tokens = replacement.where_rows(&masked, &batch.tokens)?;
    Ok(TokenBatch {
        tokens,
        masked,
        ..batch
    })
}
