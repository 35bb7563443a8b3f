//! `key = value` run files.
//!
//! One assignment per line, `#` starts a comment, keys are dotted by
//! section. Unknown or repeated keys are rejected with their line number.
//! Every default equals the published pre-training / fine-tuning value
//! where one exists; `model.preset` is applied before the other `model.*`
//! keys regardless of line order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::Mechanism;
use crate::data_io::SynthSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode};
use crate::pretrain::PretrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub synth: SynthSpec,
    /// Manifest of the training corpus.
    pub train_data: Option<PathBuf>,
    /// Manifest of the held-out corpus.
    pub val_data: Option<PathBuf>,
    /// Z-score each channel after loading.
    pub zscore: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "small".into(),
            encoder: EncoderConfig::small(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            synth: SynthSpec::default(),
            train_data: None,
            val_data: None,
            zscore: true,
            seed: 0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for initialization, masking, shuffling and augmentation"),
    ("model.preset", "tiny | small | base | large"),
    ("model.mechanism", "alternating | standard | two_axis | bottleneck"),
    ("model.n_layers", "encoder layers"),
    ("model.n_heads", "attention heads"),
    ("model.d_e", "embedding width"),
    ("model.mlp_dim", "hidden width of each MLP"),
    ("model.patch_len", "samples per patch"),
    ("model.patch_stride", "samples between patch starts"),
    ("model.c_max", "channel slots"),
    ("model.np_max", "positional-embedding rows"),
    ("pretrain.mask_ratio", "fraction of real positions masked"),
    ("pretrain.alpha", "weight of the visible-patch term"),
    ("pretrain.batch_size", "examples per step"),
    ("pretrain.peak_lr", "learning rate at the end of warmup"),
    ("pretrain.min_lr", "learning rate at the final step"),
    ("pretrain.warmup_epochs", "linear warmup length"),
    ("pretrain.max_epochs", "cosine schedule length"),
    ("pretrain.stop_epoch", "epochs actually run"),
    ("pretrain.weight_decay", "decoupled weight decay"),
    ("pretrain.beta1", "first-moment decay"),
    ("pretrain.beta2", "second-moment decay"),
    ("pretrain.grad_clip", "global gradient-norm clip, 0 disables"),
    ("finetune.mode", "linear_probe | full"),
    ("finetune.layer_decay", "per-layer learning-rate decay"),
    ("finetune.label_smoothing", "label smoothing epsilon"),
    ("finetune.noise_ratio", "noise std relative to channel std"),
    ("finetune.noise_prob", "probability of adding noise to an example"),
    ("finetune.drop_path", "stochastic depth at the last layer"),
    ("finetune.epochs", "total epochs"),
    ("finetune.warmup_epochs", "linear warmup length"),
    ("finetune.peak_lr", "learning rate at the end of warmup"),
    ("finetune.min_lr", "learning rate at the final step"),
    ("finetune.weight_decay", "decoupled weight decay"),
    ("finetune.beta1", "first-moment decay"),
    ("finetune.beta2", "second-moment decay"),
    ("finetune.batch_size", "examples per step"),
    ("finetune.grad_clip", "global gradient-norm clip, 0 disables"),
    ("data.train", "training manifest (path,label CSV)"),
    ("data.val", "held-out manifest"),
    ("data.zscore", "z-score channels after loading (true/false)"),
    ("synth.n_examples", "recordings to generate"),
    ("synth.channels", "channels per recording"),
    ("synth.n_samples", "samples per channel"),
    ("synth.sampling_rate", "Hz"),
    ("synth.frequencies", "comma-separated class frequencies in Hz"),
    ("synth.noise_std", "white-noise standard deviation"),
    ("synth.seed", "corpus seed"),
];

fn parse<V: FromStr>(key: &str, value: &str, line: usize) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("line {line}: invalid value '{value}' for key '{key}'")))
}

fn clip(v: f64) -> Option<f64> {
    (v > 0.0).then_some(v)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line}: expected 'key = value', got '{content}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::config(format!("line {line}: unknown key '{key}'")));
            }
            if let Some((_, first)) = entries.insert(key.to_string(), (value.to_string(), line)) {
                return Err(Error::config(format!("line {line}: key '{key}' already set on line {first}")));
            }
        }

        let mut cfg = RunConfig::default();
        if let Some((preset, line)) = entries.remove("model.preset") {
            cfg.encoder = EncoderConfig::preset(&preset).map_err(|e| Error::config(format!("line {line}: {e}")))?;
            cfg.preset = preset;
        }
        let mut stride = None;
        for (key, (value, line)) in &entries {
            let (v, n) = (value.as_str(), *line);
            match key.as_str() {
                "seed" => cfg.seed = parse(key, v, n)?,
                "model.mechanism" => cfg.encoder.mechanism = parse::<Mechanism>(key, v, n)?,
                "model.n_layers" => cfg.encoder.n_layers = parse(key, v, n)?,
                "model.n_heads" => cfg.encoder.n_heads = parse(key, v, n)?,
                "model.d_e" => cfg.encoder.d_e = parse(key, v, n)?,
                "model.mlp_dim" => cfg.encoder.mlp_dim = parse(key, v, n)?,
                "model.patch_len" => cfg.encoder.patch_len = parse(key, v, n)?,
                "model.patch_stride" => stride = Some(parse(key, v, n)?),
                "model.c_max" => cfg.encoder.c_max = parse(key, v, n)?,
                "model.np_max" => cfg.encoder.np_max = parse(key, v, n)?,
                "pretrain.mask_ratio" => cfg.pretrain.mask_ratio = parse(key, v, n)?,
                "pretrain.alpha" => cfg.pretrain.alpha = parse(key, v, n)?,
                "pretrain.batch_size" => cfg.pretrain.batch_size = parse(key, v, n)?,
                "pretrain.peak_lr" => cfg.pretrain.peak_lr = parse(key, v, n)?,
                "pretrain.min_lr" => cfg.pretrain.min_lr = parse(key, v, n)?,
                "pretrain.warmup_epochs" => cfg.pretrain.warmup_epochs = parse(key, v, n)?,
                "pretrain.max_epochs" => cfg.pretrain.max_epochs = parse(key, v, n)?,
                "pretrain.stop_epoch" => cfg.pretrain.stop_epoch = parse(key, v, n)?,
                "pretrain.weight_decay" => cfg.pretrain.weight_decay = parse(key, v, n)?,
                "pretrain.beta1" => cfg.pretrain.betas.0 = parse(key, v, n)?,
                "pretrain.beta2" => cfg.pretrain.betas.1 = parse(key, v, n)?,
                "pretrain.grad_clip" => cfg.pretrain.grad_clip = clip(parse(key, v, n)?),
                "finetune.mode" => cfg.finetune.mode = parse::<FinetuneMode>(key, v, n)?,
                "finetune.layer_decay" => cfg.finetune.layer_decay = parse(key, v, n)?,
                "finetune.label_smoothing" => cfg.finetune.label_smoothing = parse(key, v, n)?,
                "finetune.noise_ratio" => cfg.finetune.noise_ratio = parse(key, v, n)?,
                "finetune.noise_prob" => cfg.finetune.noise_prob = parse(key, v, n)?,
                "finetune.drop_path" => cfg.finetune.drop_path = parse(key, v, n)?,
                "finetune.epochs" => cfg.finetune.epochs = parse(key, v, n)?,
                "finetune.warmup_epochs" => cfg.finetune.warmup_epochs = parse(key, v, n)?,
                "finetune.peak_lr" => cfg.finetune.peak_lr = parse(key, v, n)?,
                "finetune.min_lr" => cfg.finetune.min_lr = parse(key, v, n)?,
                "finetune.weight_decay" => cfg.finetune.weight_decay = parse(key, v, n)?,
                "finetune.beta1" => cfg.finetune.betas.0 = parse(key, v, n)?,
                "finetune.beta2" => cfg.finetune.betas.1 = parse(key, v, n)?,
                "finetune.batch_size" => cfg.finetune.batch_size = parse(key, v, n)?,
                "finetune.grad_clip" => cfg.finetune.grad_clip = clip(parse(key, v, n)?),
                "data.train" => cfg.train_data = Some(PathBuf::from(v)),
                "data.val" => cfg.val_data = Some(PathBuf::from(v)),
                "data.zscore" => cfg.zscore = parse(key, v, n)?,
                "synth.n_examples" => cfg.synth.n_examples = parse(key, v, n)?,
                "synth.channels" => cfg.synth.channels = parse(key, v, n)?,
                "synth.n_samples" => cfg.synth.n_samples = parse(key, v, n)?,
                "synth.sampling_rate" => cfg.synth.sampling_rate = parse(key, v, n)?,
                "synth.frequencies" => {
                    cfg.synth.frequencies = v
                        .split(',')
                        .map(|f| parse(key, f.trim(), n))
                        .collect::<Result<_>>()?
                }
                "synth.noise_std" => cfg.synth.noise_std = parse(key, v, n)?,
                "synth.seed" => cfg.synth.seed = parse(key, v, n)?,
                other => unreachable!("key {other} listed but not handled"),
            }
        }
        let stride = stride.unwrap_or(cfg.encoder.patch_len);
        cfg.pretrain.patch_stride = stride;
        cfg.finetune.patch_stride = stride;
        cfg.pretrain.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        cfg.encoder.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sets the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    /// Canonical text that parses back to the same configuration.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let p = &self.pretrain;
        let f = &self.finetune;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("model.preset", self.preset.clone());
        kv("model.mechanism", e.mechanism.to_string());
        kv("model.n_layers", e.n_layers.to_string());
        kv("model.n_heads", e.n_heads.to_string());
        kv("model.d_e", e.d_e.to_string());
        kv("model.mlp_dim", e.mlp_dim.to_string());
        kv("model.patch_len", e.patch_len.to_string());
        kv("model.patch_stride", p.patch_stride.to_string());
        kv("model.c_max", e.c_max.to_string());
        kv("model.np_max", e.np_max.to_string());
        kv("pretrain.mask_ratio", p.mask_ratio.to_string());
        kv("pretrain.alpha", p.alpha.to_string());
        kv("pretrain.batch_size", p.batch_size.to_string());
        kv("pretrain.peak_lr", p.peak_lr.to_string());
        kv("pretrain.min_lr", p.min_lr.to_string());
        kv("pretrain.warmup_epochs", p.warmup_epochs.to_string());
        kv("pretrain.max_epochs", p.max_epochs.to_string());
        kv("pretrain.stop_epoch", p.stop_epoch.to_string());
        kv("pretrain.weight_decay", p.weight_decay.to_string());
        kv("pretrain.beta1", p.betas.0.to_string());
        kv("pretrain.beta2", p.betas.1.to_string());
        kv("pretrain.grad_clip", p.grad_clip.unwrap_or(0.0).to_string());
        kv(
            "finetune.mode",
            match f.mode {
                FinetuneMode::LinearProbe => "linear_probe".into(),
                FinetuneMode::Full => "full".into(),
            },
        );
        kv("finetune.layer_decay", f.layer_decay.to_string());
        kv("finetune.label_smoothing", f.label_smoothing.to_string());
        kv("finetune.noise_ratio", f.noise_ratio.to_string());
        kv("finetune.noise_prob", f.noise_prob.to_string());
        kv("finetune.drop_path", f.drop_path.to_string());
        kv("finetune.epochs", f.epochs.to_string());
        kv("finetune.warmup_epochs", f.warmup_epochs.to_string());
        kv("finetune.peak_lr", f.peak_lr.to_string());
        kv("finetune.min_lr", f.min_lr.to_string());
        kv("finetune.weight_decay", f.weight_decay.to_string());
        kv("finetune.beta1", f.betas.0.to_string());
        kv("finetune.beta2", f.betas.1.to_string());
        kv("finetune.batch_size", f.batch_size.to_string());
        kv("finetune.grad_clip", f.grad_clip.unwrap_or(0.0).to_string());
        if let Some(p) = &self.train_data {
            kv("data.train", p.display().to_string());
        }
        if let Some(p) = &self.val_data {
            kv("data.val", p.display().to_string());
        }
        kv("data.zscore", self.zscore.to_string());
        kv("synth.n_examples", s.n_examples.to_string());
        kv("synth.channels", s.channels.to_string());
        kv("synth.n_samples", s.n_samples.to_string());
        kv("synth.sampling_rate", s.sampling_rate.to_string());
        kv(
            "synth.frequencies",
            s.frequencies.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        kv("synth.noise_std", s.noise_std.to_string());
        kv("synth.seed", s.seed.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_published_defaults() {
        let c = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c.pretrain.batch_size, 4096);
        assert_eq!(c.pretrain.peak_lr, 1.25e-3);
        assert_eq!(c.pretrain.min_lr, 2.5e-7);
        assert_eq!(c.pretrain.betas, (0.9, 0.98));
        assert_eq!(c.pretrain.mask_ratio, 0.5);
        assert_eq!(c.pretrain.warmup_epochs, 3);
        assert_eq!(c.pretrain.max_epochs, 100);
        assert_eq!(c.pretrain.stop_epoch, 30);
        assert_eq!(c.finetune.betas, (0.9, 0.999));
        assert_eq!(c.finetune.peak_lr, 5e-4);
        assert_eq!(c.finetune.epochs, 50);
        assert_eq!(c.finetune.warmup_epochs, 5);
        assert_eq!(c.finetune.layer_decay, 0.75);
        assert_eq!(c.finetune.label_smoothing, 0.1);
        assert_eq!(c.encoder, EncoderConfig::small());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("seed = 1\n\nmodel.depth = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("model.depth"), "{err}");
    }

    #[test]
    fn bad_value_and_repeats() {
        assert!(RunConfig::parse("pretrain.alpha = lots").unwrap_err().to_string().contains("line 1"));
        assert!(RunConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string().contains("line 2"));
        assert!(RunConfig::parse("model.preset = tiny\nmodel.n_layers = 3").is_err());
    }

    #[test]
    fn preset_applies_before_overrides() {
        let c = RunConfig::parse("model.c_max = 4  # small corpus\nmodel.preset = tiny\n").unwrap();
        assert_eq!(c.encoder.c_max, 4);
        assert_eq!(c.encoder.d_e, EncoderConfig::tiny().d_e);
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::parse("model.preset = tiny\nsynth.frequencies = 5, 11.5\ndata.train = a/b.csv").unwrap();
        c.set_seed(9);
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }
}
