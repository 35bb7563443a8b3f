//! Transformer encoder over channel/patch token grids.

pub mod checkpoint;

pub use checkpoint::Checkpoint;

use std::fmt;

use crate::attention::{layer_attention, LayerAttention, Mechanism, MhaSlots};
use crate::error::{Error, Result};
use crate::params::{Bound, LayerNormSlots, LinearSlots, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor, Var};
use crate::tokenizer::{self, EmbeddingSlots, PatchBatch, TokenBatch, DEFAULT_PATCH_LEN, MAX_CHANNELS, MAX_PATCHES};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_e: usize,
    pub mlp_dim: usize,
    pub patch_len: usize,
    pub mechanism: Mechanism,
    pub c_max: usize,
    pub np_max: usize,
    pub drop_path_rate: f64,
}

impl EncoderConfig {
    pub const PRESETS: [&'static str; 4] = ["tiny", "small", "base", "large"];

    fn sized(n_layers: usize, d_e: usize, mlp_dim: usize) -> Self {
        Self {
            n_layers,
            n_heads: 12,
            d_e,
            mlp_dim,
            patch_len: DEFAULT_PATCH_LEN,
            mechanism: Mechanism::Alternating,
            c_max: MAX_CHANNELS,
            np_max: MAX_PATCHES,
            drop_path_rate: 0.0,
        }
    }

    pub fn small() -> Self {
        Self::sized(8, 192, 768)
    }

    pub fn base() -> Self {
        Self::sized(10, 576, 2304)
    }

    pub fn large() -> Self {
        Self::sized(12, 768, 3072)
    }

    /// Two alternating layers at width 32; small enough to train on a CPU
    /// in minutes.
    pub fn tiny() -> Self {
        Self {
            n_heads: 4,
            ..Self::sized(2, 32, 64)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            _ => Err(Error::config(format!(
                "unknown preset '{name}' (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub fn with_mechanism(self, mechanism: Mechanism) -> Self {
        Self { mechanism, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_e", self.d_e),
            ("mlp_dim", self.mlp_dim),
            ("patch_len", self.patch_len),
            ("c_max", self.c_max),
            ("np_max", self.np_max),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_e % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_e {} not divisible by {} heads",
                self.d_e, self.n_heads
            )));
        }
        if self.mechanism == Mechanism::Alternating && self.n_layers % 2 != 0 {
            return Err(Error::config(format!(
                "alternating attention needs an even number of layers, got {}",
                self.n_layers
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate)));
        }
        Ok(())
    }

    /// Drop-path probability of layer `l`, rising linearly to the configured
    /// rate at the last layer.
    pub fn drop_path_at(&self, layer: usize) -> f64 {
        if self.n_layers <= 1 {
            return self.drop_path_rate;
        }
        self.drop_path_rate * layer as f64 / (self.n_layers - 1) as f64
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} layers x {} heads, d_e {}, mlp {}, L {}, {}",
            self.n_layers, self.n_heads, self.d_e, self.mlp_dim, self.patch_len, self.mechanism
        )
    }
}

/// Scalar parameter count of the pre-training model (embeddings, `[MASK]`
/// and `[PAD]`, every block, final norm and reconstruction head).
pub fn param_count(config: &EncoderConfig) -> usize {
    let (d, m, l) = (config.d_e, config.mlp_dim, config.patch_len);
    let embed = l * d + (config.np_max + config.c_max) * d + 2 * d;
    let projection = d * d + d;
    let attention = match config.mechanism {
        Mechanism::TwoAxis => 7 * projection,
        _ => 4 * projection,
    };
    let block = attention + 2 * (2 * d) + (d * m + m) + (m * d + d);
    embed + config.n_layers * block + 2 * d + (d * l + l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classification,
    Regression,
}

impl HeadKind {
    fn prefix(self) -> &'static str {
        match self {
            HeadKind::Classification => "head.cls",
            HeadKind::Regression => "head.reg",
        }
    }
}

/// Linear map from the pooled `d_e` vector to class logits or targets.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub kind: HeadKind,
    pub outputs: usize,
    pub linear: LinearSlots,
}

#[derive(Debug, Clone, Copy)]
enum AttentionSlots {
    Single(MhaSlots),
    TwoAxis { channel: MhaSlots, patch: MhaSlots },
}

impl AttentionSlots {
    fn bind<T: Scalar>(&self, bound: &Bound<T>) -> LayerAttention<T> {
        match self {
            AttentionSlots::Single(s) => LayerAttention::Single(s.bind(bound)),
            AttentionSlots::TwoAxis { channel, patch } => LayerAttention::TwoAxis {
                channel: channel.bind(bound),
                patch: patch.bind(bound),
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    norm1: LayerNormSlots,
    attention: AttentionSlots,
    norm2: LayerNormSlots,
    fc1: LinearSlots,
    fc2: LinearSlots,
}

/// Encoder weights plus the handles that locate each tensor in the store.
///
/// Parameter groups count layers from the output: heads, final norm and
/// reconstruction head are group 0, block `l` is group `n_layers - l`, and
/// the embeddings are group `n_layers + 1`.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    config: EncoderConfig,
    pub store: ParamStore<T>,
    embedding: EmbeddingSlots,
    blocks: Vec<Block>,
    final_norm: LayerNormSlots,
    recon: LinearSlots,
    head: Option<Head>,
}

/// Options for [`Encoder::tokens`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOptions {
    /// Mask ratio and seed.
    pub mask: Option<(f64, u64)>,
    /// Pad the channel axis up to `c_max`.
    pub pad: bool,
}

impl<T: Scalar> Encoder<T> {
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let (d, n) = (config.d_e, config.n_layers);
        let embedding = EmbeddingSlots::new(&mut store, config.patch_len, d, config.np_max, config.c_max, n + 1, &mut rng);
        let blocks = (0..n)
            .map(|l| {
                let group = n - l;
                let name = format!("layer{l}");
                let norm1 = LayerNormSlots::new(&mut store, &format!("{name}.norm1"), d, group);
                let attention = match config.mechanism {
                    Mechanism::TwoAxis => {
                        let channel = MhaSlots::new(&mut store, &format!("{name}.attn_c"), d, config.n_heads, group, &mut rng);
                        let patch =
                            MhaSlots::with_shared_output(&mut store, &format!("{name}.attn_p"), d, &channel, group, &mut rng);
                        AttentionSlots::TwoAxis { channel, patch }
                    }
                    _ => AttentionSlots::Single(MhaSlots::new(
                        &mut store,
                        &format!("{name}.attn"),
                        d,
                        config.n_heads,
                        group,
                        &mut rng,
                    )),
                };
                let norm2 = LayerNormSlots::new(&mut store, &format!("{name}.norm2"), d, group);
                let fc1 = LinearSlots::new(&mut store, &format!("{name}.fc1"), d, config.mlp_dim, true, group, &mut rng);
                let fc2 = LinearSlots::new(&mut store, &format!("{name}.fc2"), config.mlp_dim, d, true, group, &mut rng);
                Block {
                    norm1,
                    attention,
                    norm2,
                    fc1,
                    fc2,
                }
            })
            .collect();
        let final_norm = LayerNormSlots::new(&mut store, "final_norm", d, 0);
        let recon = LinearSlots::new(&mut store, "recon", d, config.patch_len, true, 0, &mut rng);
        Ok(Self {
            config,
            store,
            embedding,
            blocks,
            final_norm,
            recon,
            head: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn set_drop_path(&mut self, rate: f64) -> Result<()> {
        let config = EncoderConfig {
            drop_path_rate: rate,
            ..self.config.clone()
        };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn head(&self) -> Option<Head> {
        self.head
    }

    /// Adds a fresh linear head, replacing nothing: attaching twice is an
    /// error.
    pub fn attach_head(&mut self, kind: HeadKind, outputs: usize, seed: u64) -> Result<Head> {
        if self.head.is_some() {
            return Err(Error::contract("encoder already has a head"));
        }
        if outputs == 0 {
            return Err(Error::config("head needs at least one output"));
        }
        let mut rng = Rng::derived(seed, 0x4ead);
        let linear = LinearSlots::new(&mut self.store, kind.prefix(), self.config.d_e, outputs, true, 0, &mut rng);
        let head = Head { kind, outputs, linear };
        self.head = Some(head);
        Ok(head)
    }

    /// Number of learning-rate groups (`n_layers + 2`).
    pub fn n_groups(&self) -> usize {
        self.config.n_layers + 2
    }

    /// Embeds a patch batch, optionally masking and padding it.
    pub fn tokens(&self, bound: &Bound<T>, batch: &PatchBatch<T>, options: TokenOptions) -> Result<TokenBatch<T>> {
        self.check_extent(batch.channels(), batch.n_patches())?;
        let params = self.embedding.bind(bound);
        let mut tokens = tokenizer::embed(batch, &params)?;
        if let Some((ratio, seed)) = options.mask {
            tokens = tokenizer::mask_tokens(tokens, &params, ratio, seed)?;
        }
        if options.pad || tokens.pad_mask.iter().any(|&r| !r) {
            let width = if options.pad { self.config.c_max } else { tokens.channels() };
            tokens = tokenizer::pad_channels(tokens, &params, width)?;
        }
        Ok(tokens)
    }

    fn check_extent(&self, channels: usize, n_patches: usize) -> Result<()> {
        if channels > self.config.c_max {
            return Err(Error::Range {
                what: "channel count",
                value: channels,
                limit: self.config.c_max,
            });
        }
        if n_patches > self.config.np_max {
            return Err(Error::Range {
                what: "patch count",
                value: n_patches,
                limit: self.config.np_max,
            });
        }
        Ok(())
    }

    /// Runs every block and the final norm. `drop_path` enables stochastic
    /// depth with the given generator; pass `None` at evaluation.
    pub fn forward(&self, bound: &Bound<T>, tokens: &TokenBatch<T>, mut drop_path: Option<&mut Rng>) -> Result<Var<T>> {
        self.check_extent(tokens.channels(), tokens.n_patches())?;
        let mut x = tokens.tokens.clone();
        let b = tokens.batch_size();
        for (l, block) in self.blocks.iter().enumerate() {
            let p = self.config.drop_path_at(l);
            let mut keep = |x: Var<T>| -> Result<Var<T>> {
                match drop_path.as_deref_mut() {
                    Some(rng) if p > 0.0 => {
                        let scale = 1.0 / (1.0 - p);
                        let mask = Tensor::from_fn(&[b, 1, 1, 1], |_| {
                            T::lit(if rng.bernoulli(p) { 0.0 } else { scale })
                        });
                        x.mul(&Var::constant(mask))
                    }
                    _ => Ok(x),
                }
            };
            let attention = block.attention.bind(bound);
            let h = block.norm1.forward(bound, &x)?;
            let a = layer_attention(self.config.mechanism, l, &h, &attention, &tokens.pad_mask)?;
            x = x.add(&keep(a)?)?;
            let h = block.norm2.forward(bound, &x)?;
            let m = block.fc2.forward(bound, &block.fc1.forward(bound, &h)?.gelu())?;
            x = x.add(&keep(m)?)?;
        }
        self.final_norm.forward(bound, &x)
    }

    /// Reconstruction head: `[B, C, Np, d_e] -> [B, C, Np, L]`.
    pub fn reconstruct(&self, bound: &Bound<T>, hidden: &Var<T>) -> Result<Var<T>> {
        self.recon.forward(bound, hidden)
    }

    /// Head applied to pooled `[B, d_e]` features.
    pub fn apply_head(&self, bound: &Bound<T>, pooled: &Var<T>) -> Result<Var<T>> {
        let head = self.head.ok_or_else(|| Error::contract("encoder has no head attached"))?;
        head.linear.forward(bound, pooled)
    }

    /// Names of the parameters belonging to the head.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Casts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        let mut store = ParamStore::new();
        for e in self.store.entries() {
            store.add(e.name.clone(), e.value.cast(), e.group, e.decay);
        }
        Encoder {
            config: self.config.clone(),
            store,
            embedding: self.embedding,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            recon: self.recon,
            head: self.head,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in EncoderConfig::PRESETS {
            EncoderConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(EncoderConfig::preset("huge").is_err());
        let odd = EncoderConfig {
            n_layers: 3,
            ..EncoderConfig::tiny()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        assert!(odd.clone().with_mechanism(Mechanism::Standard).validate().is_ok());
        let heads = EncoderConfig {
            n_heads: 5,
            ..EncoderConfig::tiny()
        };
        assert!(heads.validate().is_err());
    }

    #[test]
    fn built_count_matches_formula() {
        for m in Mechanism::ALL {
            let cfg = EncoderConfig::tiny().with_mechanism(m);
            let enc = Encoder::<f32>::build(cfg.clone(), 0).unwrap();
            assert_eq!(enc.store.numel(), param_count(&cfg), "{m}");
        }
    }

    #[test]
    fn drop_path_ramp() {
        let cfg = EncoderConfig {
            n_layers: 4,
            drop_path_rate: 0.3,
            ..EncoderConfig::tiny()
        };
        let rates: Vec<f64> = (0..4).map(|l| cfg.drop_path_at(l)).collect();
        assert_eq!(rates[0], 0.0);
        assert!((rates[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn groups_count_from_output() {
        let enc = Encoder::<f32>::build(EncoderConfig::tiny(), 0).unwrap();
        let group = |name: &str| enc.store.entry(enc.store.find(name).unwrap()).group;
        assert_eq!(group("embed.proj"), 3);
        assert_eq!(group("layer0.fc1.weight"), 2);
        assert_eq!(group("layer1.fc1.weight"), 1);
        assert_eq!(group("recon.weight"), 0);
        assert_eq!(enc.n_groups(), 4);
    }
}
