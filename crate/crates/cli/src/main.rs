use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alternet::attention::AttentionKind;
use alternet::bench::{self, CountingAlloc, Scope, SweepSpec};
use alternet::config::RunConfig;
use alternet::data_io::{self, Corpus};
use alternet::encoder::{Encoder, EncoderConfig, TokenOptions};
use alternet::finetune::{self, FinetuneMode, FinetuneOutput, Split, Targets};
use alternet::pretrain::{self, RunOutput};
use alternet::verify::{self, Outcome, VerifyOptions};
use alternet::{no_grad, Scalar};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "alternet", version, about = "Channel/patch transformer encoder: training, reconstruction and attention benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-class corpus (recordings plus manifest.csv).
    Generate(GenerateArgs),
    /// Masked-reconstruction pre-training.
    Pretrain(PretrainArgs),
    /// Linear probe or full fine-tuning of a classification head.
    Finetune(FinetuneArgs),
    /// Mask one recording and write original and reconstructed patches as CSV.
    Reconstruct(ReconstructArgs),
    /// Attention cost sweep over channel counts.
    Bench(BenchArgs),
    /// Run the oracle and invariant checks.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Run file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run file's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides synth.n_examples.
    #[arg(long)]
    n_examples: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Epochs to run (sets pretrain.stop_epoch).
    #[arg(long)]
    epochs: Option<usize>,
    /// Training manifest; overrides data.train. Without one, a synthetic
    /// corpus is generated from the synth.* keys.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Pre-trained checkpoint; a fresh encoder is built without one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// linear_probe | full; overrides finetune.mode.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Recording file (.eegw).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Skip per-channel z-scoring of the input.
    #[arg(long)]
    raw: bool,
}

/// `--config` takes comma-separated preset names (default `large`) or a run
/// file whose encoder is swept.
#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated: intra, inter, alternating, standard, two_axis, bottleneck.
    #[arg(long, default_value = "standard,alternating")]
    mechanisms: String,
    /// Channel counts: a range `A..=B` or a comma list.
    #[arg(long, default_value = "1..=64")]
    channels: String,
    #[arg(long, default_value_t = 20)]
    n_patches: usize,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Time the whole encoder instead of the attention stack.
    #[arg(long)]
    encoder: bool,
    /// Also write bench.dat (two columns per series).
    #[arg(long)]
    dat: bool,
    /// Skip the idle-machine check.
    #[arg(long)]
    no_load_check: bool,
    /// Fail unless the fitted scaling slopes match the closed forms.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Include the slow checks (runtime ratio, toy training).
    #[arg(long)]
    full: bool,
    /// Comma-separated check ids.
    #[arg(long)]
    only: Option<String>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Pretrain(a) => match a.common.precision {
            Precision::F32 => pretrain_cmd::<f32>(a),
            Precision::F64 => pretrain_cmd::<f64>(a),
        }
        .map(|_| true),
        Command::Finetune(a) => match a.common.precision {
            Precision::F32 => finetune_cmd::<f32>(a),
            Precision::F64 => finetune_cmd::<f64>(a),
        }
        .map(|_| true),
        Command::Reconstruct(a) => match a.common.precision {
            Precision::F32 => reconstruct::<f32>(a),
            Precision::F64 => reconstruct::<f64>(a),
        }
        .map(|_| true),
        Command::Bench(a) => bench_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// `config_sha256`, seed and build version, as written at the top of every
/// output file.
fn stanza(cfg: &RunConfig) -> Vec<String> {
    let hash = Sha256::digest(cfg.to_text().as_bytes());
    vec![
        format!("config_sha256 = {}", hex::encode(hash)),
        format!("seed = {}", cfg.seed),
        format!("version = alternet {}", env!("CARGO_PKG_VERSION")),
    ]
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text: String = stanza(cfg).iter().map(|l| format!("# {l}\n")).collect::<String>() + &cfg.to_text();
    fs::write(dir.join("run.cfg"), text).context("writing run.cfg")
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(seed) = a.common.seed {
        cfg.synth.seed = seed;
    }
    if let Some(n) = a.n_examples {
        cfg.synth.n_examples = n;
    }
    let dir = out_dir(&a.common, "corpus")?;
    let corpus = data_io::generate_synthetic(&cfg.synth)?;
    let manifest = data_io::save_corpus(&dir, &corpus)?;
    write_config(&dir, &cfg)?;
    println!("wrote {} recordings, manifest {}", corpus.len(), manifest.display());
    Ok(())
}

fn load_data(path: Option<&Path>, cfg: &RunConfig) -> Result<Corpus> {
    let mut corpus = match path {
        Some(p) => data_io::load_corpus(p).with_context(|| format!("loading {}", p.display()))?,
        None => data_io::generate_synthetic(&cfg.synth)?,
    };
    if cfg.zscore {
        corpus.zscore();
    }
    Ok(corpus)
}

fn pretrain_cmd<T: Scalar>(a: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.epochs {
        cfg.pretrain.stop_epoch = n;
        cfg.pretrain.max_epochs = cfg.pretrain.max_epochs.max(n);
    }
    cfg.pretrain.validate()?;
    let dir = out_dir(&a.common, "pretrain")?;
    write_config(&dir, &cfg)?;
    let data = load_data(a.data.as_deref().or(cfg.train_data.as_deref()), &cfg)?;
    let (mut model, mut opt, start) = match &a.resume {
        Some(path) => {
            let r = pretrain::resume::<T>(path, &cfg.pretrain)?;
            (r.model, r.optimizer, r.epoch)
        }
        None => (Encoder::<T>::build(cfg.encoder.clone(), cfg.seed)?, cfg.pretrain.optimizer(), 0),
    };
    let output = RunOutput {
        dir: Some(dir.clone()),
        preamble: stanza(&cfg),
    };
    let report = pretrain::pretrain_run(&mut model, &mut opt, &data.recordings, &cfg.pretrain, start, &output)?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}  l_masked {:.4}  l_visible {:.4}  total {:.4}  lr {:.2e}",
            e.epoch, e.loss.l_masked, e.loss.l_visible, e.loss.total, e.lr
        );
    }
    println!("metrics and checkpoints in {}", dir.display());
    Ok(())
}

fn finetune_cmd<T: Scalar>(a: FinetuneArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.epochs {
        cfg.finetune.epochs = n;
    }
    if let Some(m) = &a.mode {
        cfg.finetune.mode = m.parse::<FinetuneMode>()?;
    }
    cfg.finetune.validate()?;
    let dir = out_dir(&a.common, "finetune")?;
    write_config(&dir, &cfg)?;
    let train_path = a.train.clone().or(cfg.train_data.clone());
    let (train, val) = match (&train_path, a.val.clone().or(cfg.val_data.clone())) {
        (Some(t), v) => (load_data(Some(t), &cfg)?, v.map(|v| load_data(Some(&v), &cfg)).transpose()?),
        (None, _) => {
            let all = load_data(None, &cfg)?;
            let (t, v) = all.split_at(all.len() * 4 / 5);
            (t, Some(v))
        }
    };
    let mut model = match &a.checkpoint {
        Some(p) => Encoder::<T>::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Encoder::<T>::build(cfg.encoder.clone(), cfg.seed)?,
    };
    let targets = |c: &Corpus| Targets::Classes {
        labels: c.labels.clone(),
        n_classes: train.n_classes().max(val.as_ref().map_or(0, Corpus::n_classes)),
    };
    let train_targets = targets(&train);
    let val_targets = val.as_ref().map(targets);
    let output = FinetuneOutput {
        dir: Some(dir.clone()),
        preamble: stanza(&cfg),
    };
    let history = finetune::finetune_run(
        &mut model,
        Split {
            recordings: &train.recordings,
            targets: &train_targets,
        },
        val.as_ref().zip(val_targets.as_ref()).map(|(v, t)| Split {
            recordings: &v.recordings,
            targets: t,
        }),
        &cfg.finetune,
        &output,
    )?;
    for e in &history {
        let val = e.val.as_ref().and_then(|m| m.balanced_accuracy());
        println!(
            "epoch {:>3}  train loss {:.4}  val balanced accuracy {}",
            e.epoch,
            e.train.loss(),
            val.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    println!("metrics and checkpoint in {}", dir.display());
    Ok(())
}

fn reconstruct<T: Scalar>(a: ReconstructArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let model = Encoder::<T>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let mut rec = data_io::load_recording(&a.input)?;
    if !a.raw {
        rec.zscore();
    }
    let ratio = a.mask_ratio.unwrap_or(cfg.pretrain.mask_ratio);
    let c = model.config();
    let batch = data_io::collate::<T>(&[&rec], c.patch_len, cfg.pretrain.patch_stride, c.c_max)?;
    let (masked, original, recon) = no_grad(|| -> alternet::Result<_> {
        let bound = model.store.bind_frozen();
        let tokens = model.tokens(
            &bound,
            &batch,
            TokenOptions {
                mask: Some((ratio, cfg.seed)),
                pad: false,
            },
        )?;
        let hidden = model.forward(&bound, &tokens, None)?;
        let pred = model.reconstruct(&bound, &hidden)?;
        Ok((tokens.masked, tokens.raw_patches.to_f64_vec(), pred.value().to_f64_vec()))
    })?;
    let (np, l) = (batch.n_patches(), batch.patch_len());
    let mut csv: String = stanza(&cfg).iter().map(|s| format!("# {s}\n")).collect();
    csv.push_str("channel,patch,offset,masked,original,reconstructed\n");
    for ch in 0..rec.n_channels() {
        for i in 0..np {
            let pos = ch * np + i;
            for k in 0..l {
                let o = pos * l + k;
                let _ = writeln!(
                    csv,
                    "{},{i},{k},{},{},{}",
                    rec.channel_ids()[ch],
                    u8::from(masked[pos]),
                    original[o],
                    recon[o]
                );
            }
        }
    }
    match &a.common.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_channels(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..=") {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        if a == 0 || b < a {
            bail!("bad channel range '{s}'");
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|c| c.trim().parse::<usize>().with_context(|| format!("bad channel count '{c}'")))
        .collect()
}

fn bench_cmd(a: BenchArgs) -> Result<bool> {
    // `--config` names presets here ("large", "small,base") unless it is a run file
    let preset_list = match &a.common.config {
        Some(p) if !p.is_file() => Some(p.to_string_lossy().into_owned()),
        None => Some("large".to_string()),
        Some(_) => None,
    };
    let cfg = match &preset_list {
        Some(_) => load_config(&Common {
            config: None,
            ..a.common.clone()
        })?,
        None => load_config(&a.common)?,
    };
    let mechanisms = a
        .mechanisms
        .split(',')
        .map(|m| m.trim().parse::<AttentionKind>())
        .collect::<alternet::Result<Vec<_>>>()?;
    let configs = match &preset_list {
        Some(list) => list
            .split(',')
            .map(|p| Ok((p.trim().to_string(), EncoderConfig::preset(p.trim())?)))
            .collect::<Result<Vec<_>>>()?,
        None => vec![(cfg.preset.clone(), cfg.encoder.clone())],
    };
    let spec = SweepSpec {
        mechanisms,
        configs,
        n_patches: a.n_patches,
        channels: parse_channels(&a.channels)?,
        repetitions: a.repetitions,
        warmup: a.warmup,
        scope: if a.encoder { Scope::Encoder } else { Scope::Attention },
        check_load: !a.no_load_check,
        seed: cfg.seed,
        ..SweepSpec::default()
    };
    let run = |progress: &mut dyn FnMut(&bench::SweepPoint)| match a.common.precision {
        Precision::F32 => bench::run_sweep::<f32>(&spec, progress),
        Precision::F64 => bench::run_sweep::<f64>(&spec, progress),
    };
    let points = run(&mut |p| eprintln!("{}", p.csv_row()))?;
    let mut csv: String = stanza(&cfg).iter().map(|s| format!("# {s}\n")).collect();
    csv.push_str(&bench::to_csv(&points));
    match &a.common.out {
        Some(_) => {
            let dir = out_dir(&a.common, ".")?;
            fs::write(dir.join("bench.csv"), &csv)?;
            if a.dat {
                fs::write(dir.join("bench.dat"), bench::to_dat(&points))?;
            }
            println!("wrote {} rows to {}", points.len(), dir.join("bench.csv").display());
        }
        None => print!("{csv}"),
    }
    if !a.check {
        return Ok(true);
    }
    let mut ok = true;
    for v in bench::check_scaling(&points)? {
        let pass = v.element_ok && v.time_ok.unwrap_or(true);
        ok &= pass;
        eprintln!(
            "{} {}/{}: element slope {:.3} time slope {} expected {}",
            if pass { "ok  " } else { "FAIL" },
            v.mechanism,
            v.config,
            v.element_slope,
            v.time_slope.map_or("-".into(), |t| format!("{t:.3}")),
            v.expected.map_or("-".into(), |e| format!("{e:.1}"))
        );
    }
    Ok(ok)
}

fn verify_cmd(a: VerifyArgs) -> Result<bool> {
    let options = VerifyOptions { full: a.full };
    let checks = match &a.only {
        Some(list) => list
            .split(',')
            .map(|id| {
                let id: usize = id.trim().parse().with_context(|| format!("bad check id '{id}'"))?;
                let c = verify::run_check(id, VerifyOptions { full: true })?;
                println!("{}", c.line());
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?,
        None => verify::run_all(options, |c| println!("{}", c.line())),
    };
    let failed = checks.iter().filter(|c| c.outcome == Outcome::Fail).count();
    let skipped = checks.iter().filter(|c| c.outcome == Outcome::Skipped).count();
    println!(
        "{} passed, {failed} failed, {skipped} skipped",
        checks.len() - failed - skipped
    );
    Ok(failed == 0)
}
