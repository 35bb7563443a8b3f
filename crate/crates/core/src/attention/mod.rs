//! Attention over a `[B, C, Np, d_e]` token grid.
//!
//! Four mechanisms share one contract: the input grid plus a per-channel pad
//! mask (`true` = real channel) go in, a grid of the same shape comes out.
//! Padded channels are excluded as keys through an additive `-inf` before
//! the softmax, so their weights are exactly zero and the remaining weights
//! still sum to one.

pub mod cost;
pub mod meter;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Bound, LinearSlots, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor, Var};

pub use cost::{attention_cost, score_elements, AttentionKind, CostReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    /// Odd layers (1-indexed) attend across channels, even layers across patches.
    Alternating,
    /// Full attention over the flattened `C·Np` sequence.
    Standard,
    /// Mean of channel-axis and patch-axis attention with separate Q/K/V.
    TwoAxis,
    /// Pooled channel attention feeding pooled patch attention.
    Bottleneck,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [
        Mechanism::Alternating,
        Mechanism::Standard,
        Mechanism::TwoAxis,
        Mechanism::Bottleneck,
    ];

    pub fn name(self) -> &'static str {
        AttentionKind::from(self).name()
    }

    pub fn code(self) -> u32 {
        match self {
            Mechanism::Alternating => 0,
            Mechanism::Standard => 1,
            Mechanism::TwoAxis => 2,
            Mechanism::Bottleneck => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::config(format!("unknown mechanism code {code}")))
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
            .ok_or_else(|| Error::config(format!("unknown attention mechanism '{s}'")))
    }
}

/// Which axis a multi-head attention call mixes; the other axes fold into
/// the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionLayout {
    /// Sequences of `Np` patches, batch `B·C`.
    OverPatches,
    /// Sequences of `C` channels, batch `B·Np`.
    OverChannels,
    /// One sequence of `C·Np` tokens per example.
    Flat,
}

/// Bound multi-head attention weights. Projections are `[d_e, d_e]`
/// applied as `x W + b`.
#[derive(Debug, Clone)]
pub struct MhaParams<T: Scalar> {
    pub wq: Var<T>,
    pub bq: Var<T>,
    pub wk: Var<T>,
    pub bk: Var<T>,
    pub wv: Var<T>,
    pub bv: Var<T>,
    pub wo: Var<T>,
    pub bo: Var<T>,
    pub heads: usize,
}

impl<T: Scalar> MhaParams<T> {
    pub fn d_e(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d_e() / self.heads
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding width {d} not divisible by {} heads",
                self.heads
            )));
        }
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.shape() != [d, d] {
                return Err(Error::shape("mha weight", w.shape(), &[d, d]));
            }
        }
        Ok(())
    }

    /// Random weights (std `scale`) and biases; leaves require gradients
    /// when `trainable`.
    pub fn random(d: usize, heads: usize, scale: f64, rng: &mut Rng, trainable: bool) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("embedding width {d} not divisible by {heads} heads")));
        }
        let mut mat = |shape: &[usize]| Var::leaf(Tensor::from_fn(shape, |_| T::lit(scale * rng.normal())), trainable);
        Ok(Self {
            wq: mat(&[d, d]),
            bq: mat(&[d]),
            wk: mat(&[d, d]),
            bk: mat(&[d]),
            wv: mat(&[d, d]),
            bv: mat(&[d]),
            wo: mat(&[d, d]),
            bo: mat(&[d]),
            heads,
        })
    }
}

/// Parameter-store handles for one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct MhaSlots {
    pub q: LinearSlots,
    pub k: LinearSlots,
    pub v: LinearSlots,
    pub o: LinearSlots,
    pub heads: usize,
}

impl MhaSlots {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, group: usize, rng: &mut Rng) -> Self {
        let q = LinearSlots::new(store, &format!("{name}.q"), d, d, true, group, rng);
        let k = LinearSlots::new(store, &format!("{name}.k"), d, d, true, group, rng);
        let v = LinearSlots::new(store, &format!("{name}.v"), d, d, true, group, rng);
        let o = LinearSlots::new(store, &format!("{name}.o"), d, d, true, group, rng);
        Self { q, k, v, o, heads }
    }

    /// Separate Q/K/V that reuse an existing output projection.
    pub fn with_shared_output<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        shared: &MhaSlots,
        group: usize,
        rng: &mut Rng,
    ) -> Self {
        let q = LinearSlots::new(store, &format!("{name}.q"), d, d, true, group, rng);
        let k = LinearSlots::new(store, &format!("{name}.k"), d, d, true, group, rng);
        let v = LinearSlots::new(store, &format!("{name}.v"), d, d, true, group, rng);
        Self {
            q,
            k,
            v,
            o: shared.o,
            heads: shared.heads,
        }
    }

    pub fn bind<T: Scalar>(&self, bound: &Bound<T>) -> MhaParams<T> {
        let pair = |l: &LinearSlots| {
            (
                bound.var(l.weight).clone(),
                bound.var(l.bias.expect("attention projections carry biases")).clone(),
            )
        };
        let (wq, bq) = pair(&self.q);
        let (wk, bk) = pair(&self.k);
        let (wv, bv) = pair(&self.v);
        let (wo, bo) = pair(&self.o);
        MhaParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads: self.heads,
        }
    }
}

fn affine<T: Scalar>(x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    x.matmul(w)?.add(b)
}

/// Softmax attention over the last two axes. `q: [.., Sq, hd]`,
/// `k, v: [.., Sk, hd]`; batch axes broadcast. `bias` is added to the
/// scores before the softmax.
fn attend<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>, bias: Option<&Var<T>>, heads: usize) -> Result<Var<T>> {
    let rank = k.shape().len();
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    let mut scores = q.matmul(&k.permute(&perm)?)?;
    meter::record((scores.value().len() / heads) as u64);
    if let Some(bias) = bias {
        scores = scores.add(bias)?;
    }
    scores.softmax(rank - 1)?.matmul(v)
}

/// Additive key bias of shape `[G, 1, 1, S]`, or `None` when every key is
/// attendable.
fn key_bias<T: Scalar>(key_mask: &[bool], groups: usize, seq: usize) -> Option<Var<T>> {
    if key_mask.iter().all(|&k| k) {
        return None;
    }
    let data = key_mask
        .iter()
        .map(|&k| if k { T::zero() } else { T::neg_infinity() })
        .collect();
    Some(Var::constant(Tensor::from_parts(vec![groups, 1, 1, seq], data)))
}

fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected [batch, sequence, width]".into(),
        }),
    }
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected [batch, channels, patches, width]".into(),
        }),
    }
}

/// Multi-head self-attention on `x: [G, S, d_e]`. `key_mask[g·S + s]` is
/// `true` when key `s` of group `g` may be attended. Query rows with no
/// attendable key produce zero output.
pub fn mha<T: Scalar>(x: &Var<T>, params: &MhaParams<T>, key_mask: &[bool]) -> Result<Var<T>> {
    let [g, s, d] = dims3(x.shape())?;
    params.check(d)?;
    if key_mask.len() != g * s {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("key mask has {} entries", key_mask.len()),
        });
    }
    let h = params.heads;
    let hd = d / h;
    let split = |t: Var<T>| t.reshape(&[g, s, h, hd])?.permute(&[0, 2, 1, 3]);
    let q = split(affine(x, &params.wq, &params.bq)?.scale(T::lit(1.0 / (hd as f64).sqrt())))?;
    let k = split(affine(x, &params.wk, &params.bk)?)?;
    let v = split(affine(x, &params.wv, &params.bv)?)?;
    let bias = key_bias(key_mask, g, s);
    let heads = attend(&q, &k, &v, bias.as_ref(), h)?;
    let merged = heads.permute(&[0, 2, 1, 3])?.reshape(&[g, s, d])?;
    let out = affine(&merged, &params.wo, &params.bo)?;
    let live: Vec<bool> = key_mask
        .chunks(s)
        .flat_map(|keys| std::iter::repeat(keys.iter().any(|&k| k)).take(s))
        .collect();
    if live.iter().all(|&l| l) {
        Ok(out)
    } else {
        out.mask_rows(&live)
    }
}

fn check_grid<T: Scalar>(t: &Var<T>, pad_mask: &[bool]) -> Result<[usize; 4]> {
    let dims = dims4(t.shape())?;
    if pad_mask.len() != dims[0] * dims[1] {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("pad mask has {} entries", pad_mask.len()),
        });
    }
    Ok(dims)
}

fn require_real_channel(pad_mask: &[bool], channels: usize) -> Result<()> {
    for (b, chans) in pad_mask.chunks(channels).enumerate() {
        if !chans.iter().any(|&r| r) {
            return Err(Error::contract(format!("example {b} has no real channels")));
        }
    }
    Ok(())
}

/// Folds the grid into `[G, S, d_e]` sequences for `layout` and builds the
/// matching key mask.
pub fn fold<T: Scalar>(t: &Var<T>, pad_mask: &[bool], layout: AttentionLayout) -> Result<(Var<T>, Vec<bool>)> {
    let [b, c, np, d] = check_grid(t, pad_mask)?;
    Ok(match layout {
        AttentionLayout::OverPatches => {
            let mask = pad_mask.iter().flat_map(|&r| std::iter::repeat(r).take(np)).collect();
            (t.reshape(&[b * c, np, d])?, mask)
        }
        AttentionLayout::OverChannels => {
            let mask = pad_mask
                .chunks(c)
                .flat_map(|chans| (0..np).flat_map(move |_| chans.iter().copied()))
                .collect();
            (t.permute(&[0, 2, 1, 3])?.reshape(&[b * np, c, d])?, mask)
        }
        AttentionLayout::Flat => {
            let mask = pad_mask.iter().flat_map(|&r| std::iter::repeat(r).take(np)).collect();
            (t.reshape(&[b, c * np, d])?, mask)
        }
    })
}

/// Inverse of [`fold`].
pub fn unfold<T: Scalar>(y: &Var<T>, dims: [usize; 4], layout: AttentionLayout) -> Result<Var<T>> {
    let [b, c, np, d] = dims;
    match layout {
        AttentionLayout::OverPatches | AttentionLayout::Flat => y.reshape(&[b, c, np, d]),
        AttentionLayout::OverChannels => y.reshape(&[b, np, c, d])?.permute(&[0, 2, 1, 3]),
    }
}

fn along<T: Scalar>(t: &Var<T>, params: &MhaParams<T>, pad_mask: &[bool], layout: AttentionLayout) -> Result<Var<T>> {
    let dims = check_grid(t, pad_mask)?;
    let (x, mask) = fold(t, pad_mask, layout)?;
    unfold(&mha(&x, params, &mask)?, dims, layout)
}

/// Attention over the `Np` patches of each channel independently.
pub fn intra_channel_attention<T: Scalar>(t: &Var<T>, params: &MhaParams<T>, pad_mask: &[bool]) -> Result<Var<T>> {
    meter::begin_block();
    along(t, params, pad_mask, AttentionLayout::OverPatches)
}

/// Attention over the `C` channels at each patch index independently.
pub fn inter_channel_attention<T: Scalar>(t: &Var<T>, params: &MhaParams<T>, pad_mask: &[bool]) -> Result<Var<T>> {
    let [_, c, _, _] = check_grid(t, pad_mask)?;
    require_real_channel(pad_mask, c)?;
    meter::begin_block();
    along(t, params, pad_mask, AttentionLayout::OverChannels)
}

/// Attention over all `C·Np` tokens of an example.
pub fn standard_attention<T: Scalar>(t: &Var<T>, params: &MhaParams<T>, pad_mask: &[bool]) -> Result<Var<T>> {
    meter::begin_block();
    along(t, params, pad_mask, AttentionLayout::Flat)
}

/// `0.5 · (inter(params_c) + intra(params_p))`.
pub fn two_axis_attention<T: Scalar>(
    t: &Var<T>,
    params_c: &MhaParams<T>,
    params_p: &MhaParams<T>,
    pad_mask: &[bool],
) -> Result<Var<T>> {
    let [_, c, _, _] = check_grid(t, pad_mask)?;
    require_real_channel(pad_mask, c)?;
    meter::begin_block();
    let channel = along(t, params_c, pad_mask, AttentionLayout::OverChannels)?;
    let patch = along(t, params_p, pad_mask, AttentionLayout::OverPatches)?;
    Ok(channel.add(&patch)?.scale(T::lit(0.5)))
}

/// Pooled attention with a single Q/K/V projection.
///
/// 1. Q, K, V are mean-pooled over patches and attended across channels
///    (pad channels masked as keys), giving one value row per channel.
/// 2. Q, K are mean-pooled over real channels and attended across patches,
///    using the step-1 rows broadcast over patches as values.
pub fn bottleneck_attention<T: Scalar>(t: &Var<T>, params: &MhaParams<T>, pad_mask: &[bool]) -> Result<Var<T>> {
    let [b, c, np, d] = check_grid(t, pad_mask)?;
    params.check(d)?;
    require_real_channel(pad_mask, c)?;
    meter::begin_block();
    let h = params.heads;
    let hd = d / h;

    let q = affine(t, &params.wq, &params.bq)?.scale(T::lit(1.0 / (hd as f64).sqrt()));
    let k = affine(t, &params.wk, &params.bk)?;
    let v = affine(t, &params.wv, &params.bv)?;

    // step 1: pool over patches -> [B, H, C, hd], attend across channels
    let inv_np = T::lit(1.0 / np as f64);
    let pool_np = |x: &Var<T>| -> Result<Var<T>> {
        x.sum_axis(2)?
            .scale(inv_np)
            .reshape(&[b, c, h, hd])?
            .permute(&[0, 2, 1, 3])
    };
    let bias = key_bias(pad_mask, b, c);
    let a1 = attend(&pool_np(&q)?, &pool_np(&k)?, &pool_np(&v)?, bias.as_ref(), h)?;

    // step 2: pool Q, K over real channels -> [B, 1, H, Np, hd]
    let weights: Vec<T> = pad_mask
        .chunks(c)
        .flat_map(|chans| {
            let real = chans.iter().filter(|&&r| r).count() as f64;
            chans.iter().map(move |&r| if r { T::lit(1.0 / real) } else { T::zero() })
        })
        .collect();
    let channel_weights = Var::constant(Tensor::from_parts(vec![b, c, 1, 1], weights));
    let pool_c = |x: &Var<T>| -> Result<Var<T>> {
        x.mul(&channel_weights)?
            .sum_axis(1)?
            .reshape(&[b, 1, np, h, hd])?
            .permute(&[0, 1, 3, 2, 4])
    };
    // values: step-1 rows broadcast over patches -> [B, C, H, Np, hd]
    let spread = Var::constant(Tensor::zeros(&[np, 1]));
    let values = a1.permute(&[0, 2, 1, 3])?.reshape(&[b, c, h, 1, hd])?.add(&spread)?;
    let a2 = attend(&pool_c(&q)?, &pool_c(&k)?, &values, None, h)?;

    let merged = a2.permute(&[0, 1, 3, 2, 4])?.reshape(&[b, c, np, d])?;
    affine(&merged, &params.wo, &params.bo)
}

/// Bound attention weights for one encoder layer.
#[derive(Debug, Clone)]
pub enum LayerAttention<T: Scalar> {
    Single(MhaParams<T>),
    TwoAxis { channel: MhaParams<T>, patch: MhaParams<T> },
}

/// Attention step of encoder layer `layer` (0-indexed).
pub fn layer_attention<T: Scalar>(
    mechanism: Mechanism,
    layer: usize,
    t: &Var<T>,
    params: &LayerAttention<T>,
    pad_mask: &[bool],
) -> Result<Var<T>> {
    match (mechanism, params) {
        (Mechanism::Alternating, LayerAttention::Single(p)) => {
            // 1-indexed odd layers mix channels
            if layer % 2 == 0 {
                inter_channel_attention(t, p, pad_mask)
            } else {
                intra_channel_attention(t, p, pad_mask)
            }
        }
        (Mechanism::Standard, LayerAttention::Single(p)) => standard_attention(t, p, pad_mask),
        (Mechanism::Bottleneck, LayerAttention::Single(p)) => bottleneck_attention(t, p, pad_mask),
        (Mechanism::TwoAxis, LayerAttention::TwoAxis { channel, patch }) => {
            two_axis_attention(t, channel, patch, pad_mask)
        }
        _ => Err(Error::config(format!("{mechanism} layer bound with mismatched parameters"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(b: usize, c: usize, np: usize, d: usize, seed: u64) -> Var<f64> {
        let mut rng = Rng::new(seed);
        Var::constant(Tensor::from_fn(&[b, c, np, d], |_| rng.normal()))
    }

    #[test]
    fn single_key_passes_value_through() {
        let mut rng = Rng::new(1);
        let p = MhaParams::<f64>::random(4, 2, 0.5, &mut rng, false).unwrap();
        let x = grid(1, 1, 1, 4, 2).reshape(&[1, 1, 4]).unwrap();
        let y = mha(&x, &p, &[true]).unwrap();
        let v = x.matmul(&p.wv).unwrap().add(&p.bv).unwrap();
        let want = v.matmul(&p.wo).unwrap().add(&p.bo).unwrap();
        assert!(y.value().max_abs_diff(want.value()) < 1e-14);
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let mut rng = Rng::new(1);
        let p = MhaParams::<f64>::random(4, 1, 0.5, &mut rng, false).unwrap();
        let x = grid(2, 1, 3, 4, 9).reshape(&[2, 3, 4]).unwrap();
        let y = mha(&x, &p, &[true, true, true, false, false, false]).unwrap();
        assert!(y.value().data()[12..].iter().all(|&v| v == 0.0));
        assert!(y.value().data()[..12].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut rng = Rng::new(0);
        assert!(matches!(MhaParams::<f64>::random(6, 4, 0.1, &mut rng, false), Err(Error::Config(_))));
    }

    #[test]
    fn inter_requires_a_real_channel() {
        let mut rng = Rng::new(0);
        let p = MhaParams::<f64>::random(4, 2, 0.1, &mut rng, false).unwrap();
        let t = grid(1, 2, 3, 4, 1);
        assert!(matches!(
            inter_channel_attention(&t, &p, &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn meter_counts_match_closed_forms() {
        let mut rng = Rng::new(0);
        let p = MhaParams::<f64>::random(4, 2, 0.3, &mut rng, false).unwrap();
        let q = MhaParams::<f64>::random(4, 2, 0.3, &mut rng, false).unwrap();
        let (c, np) = (3, 5);
        let t = grid(1, c, np, 4, 3);
        let mask = vec![true; c];
        let cases: Vec<(AttentionKind, Box<dyn Fn() -> Result<Var<f64>>>)> = vec![
            (AttentionKind::Intra, Box::new(|| intra_channel_attention(&t, &p, &mask))),
            (AttentionKind::Inter, Box::new(|| inter_channel_attention(&t, &p, &mask))),
            (AttentionKind::Standard, Box::new(|| standard_attention(&t, &p, &mask))),
            (AttentionKind::TwoAxis, Box::new(|| two_axis_attention(&t, &p, &q, &mask))),
            (AttentionKind::Bottleneck, Box::new(|| bottleneck_attention(&t, &p, &mask))),
        ];
        for (kind, run) in cases {
            meter::reset();
            run().unwrap();
            assert_eq!(meter::reading().total, score_elements(kind, c, np), "{kind}");
        }
    }

    #[test]
    fn mechanism_names_roundtrip() {
        for m in Mechanism::ALL {
            assert_eq!(m.name().parse::<Mechanism>().unwrap(), m);
            assert_eq!(Mechanism::from_code(m.code()).unwrap(), m);
        }
    }
}
