//! Self-checks run by `alternet verify` and the acceptance test.
//!
//! Each check compares the library against the loop oracles in
//! [`crate::oracle`], closed forms, or its own earlier output.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::attention::{
    self, inter_channel_attention, intra_channel_attention, layer_attention, meter, score_elements, AttentionKind,
    LayerAttention, Mechanism, MhaParams,
};
use crate::bench::{loglog_slope, run_sweep, Scope, Status, SweepSpec};
use crate::data_io::{generate_synthetic, SynthSpec};
use crate::encoder::{param_count, Checkpoint, Encoder, EncoderConfig, HeadKind, TokenOptions};
use crate::error::{Error, Result};
use crate::finetune::{finetune_run, mean_pool, smoothed_cross_entropy, FinetuneConfig, FinetuneMode, FinetuneOutput, Split, Targets};
use crate::oracle::{self, Grid, RawMha};
use crate::params::Bound;
use crate::pretrain::{self, pretrain_run, pretrain_step, reconstruction_loss, PretrainConfig, RunOutput};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor, Var};
use crate::tokenizer::{PatchBatch, Recording};

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Also run the slow checks (empirical runtime ratio, toy training).
    pub full: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct Check {
    pub id: usize,
    pub name: &'static str,
    pub outcome: Outcome,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    pub fn line(&self) -> String {
        let tag = match self.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::Skipped => "SKIP",
        };
        format!(
            "[{tag}] {:>2} {:<28} {} ({:.1} s)",
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

pub const CHECKS: [(usize, &str); 10] = [
    (1, "attention-oracle"),
    (2, "collapse-identities"),
    (3, "pad-invariance"),
    (4, "gradient-check"),
    (5, "complexity-analytic"),
    (6, "complexity-empirical"),
    (7, "parameter-counts"),
    (8, "loss-closed-forms"),
    (9, "toy-pretraining"),
    (10, "determinism-persistence"),
];

const SLOW: [usize; 2] = [6, 9];

/// Runs one check by id.
pub fn run_check(id: usize, options: VerifyOptions) -> Result<Check> {
    let name = CHECKS
        .iter()
        .find(|(i, _)| *i == id)
        .map(|(_, n)| *n)
        .ok_or_else(|| Error::config(format!("no check {id}")))?;
    let start = Instant::now();
    if SLOW.contains(&id) && !options.full {
        return Ok(Check {
            id,
            name,
            outcome: Outcome::Skipped,
            detail: "slow; pass --full".into(),
            elapsed: Duration::ZERO,
        });
    }
    let result = match id {
        1 => attention_oracle(),
        2 => collapse_identities(),
        3 => pad_invariance(),
        4 => gradient_check(),
        5 => complexity_analytic(),
        6 => complexity_empirical(),
        7 => parameter_counts(),
        8 => loss_closed_forms(),
        9 => toy_pretraining(),
        _ => determinism_persistence(),
    };
    let elapsed = start.elapsed();
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    let (passed, detail) = match time_limit(id) {
        Some(limit) if elapsed > limit => (false, format!("{detail}; over {} s limit", limit.as_secs())),
        _ => (passed, detail),
    };
    Ok(Check {
        id,
        name,
        outcome: if passed { Outcome::Pass } else { Outcome::Fail },
        detail,
        elapsed,
    })
}

/// Runs every check in order, reporting each as it finishes.
pub fn run_all(options: VerifyOptions, mut progress: impl FnMut(&Check)) -> Vec<Check> {
    CHECKS
        .iter()
        .map(|&(id, _)| {
            let check = run_check(id, options).expect("listed check");
            progress(&check);
            check
        })
        .collect()
}

fn time_limit(id: usize) -> Option<Duration> {
    match id {
        1 => Some(Duration::from_secs(60)),
        4 => Some(Duration::from_secs(300)),
        6 => Some(Duration::from_secs(600)),
        9 => Some(Duration::from_secs(900)),
        _ => None,
    }
}

type CheckResult = Result<(bool, String)>;

fn random_grid(b: usize, c: usize, np: usize, d: usize, rng: &mut Rng) -> (Var<f64>, Grid) {
    let t = Tensor::from_fn(&[b, c, np, d], |_| rng.normal());
    let g = Grid::new(b, c, np, d, t.to_f64_vec());
    (Var::constant(t), g)
}

/// Two examples; the second has its last channel padded when `c > 1`.
fn two_example_mask(c: usize) -> Vec<bool> {
    (0..2 * c).map(|k| k < c || k + 1 < 2 * c || c == 1).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn grid_points() -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (1..=4).flat_map(|c| {
        (1..=5).flat_map(move |np| [2, 4, 8].into_iter().flat_map(move |d| [1, 2].into_iter().map(move |h| (c, np, d, h))))
    })
}

fn attention_oracle() -> CheckResult {
    let mut rng = Rng::new(101);
    let mut worst = [0.0f64; 5];
    let mut cases = 0;
    for (c, np, d, h) in grid_points() {
        let (x, g) = random_grid(2, c, np, d, &mut rng);
        let pad = two_example_mask(c);
        let p = MhaParams::<f64>::random(d, h, 0.5, &mut rng, false)?;
        let mut patch = MhaParams::<f64>::random(d, h, 0.5, &mut rng, false)?;
        patch.wo = p.wo.clone();
        patch.bo = p.bo.clone();
        let (rp, rpatch) = (RawMha::from_params(&p), RawMha::from_params(&patch));
        let single = LayerAttention::Single(p.clone());
        let pairs = [
            (layer_attention(Mechanism::Alternating, 0, &x, &single, &pad)?, oracle::inter(&g, &pad, &rp)),
            (layer_attention(Mechanism::Alternating, 1, &x, &single, &pad)?, oracle::intra(&g, &pad, &rp)),
            (layer_attention(Mechanism::Standard, 0, &x, &single, &pad)?, oracle::standard(&g, &pad, &rp)),
            (
                layer_attention(
                    Mechanism::TwoAxis,
                    0,
                    &x,
                    &LayerAttention::TwoAxis {
                        channel: p.clone(),
                        patch,
                    },
                    &pad,
                )?,
                oracle::two_axis(&g, &pad, &rp, &rpatch),
            ),
            (layer_attention(Mechanism::Bottleneck, 0, &x, &single, &pad)?, oracle::bottleneck(&g, &pad, &rp)),
        ];
        for (k, (fast, slow)) in pairs.iter().enumerate() {
            worst[k] = worst[k].max(max_diff(&fast.value().to_f64_vec(), &slow.data));
        }
        cases += 1;
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Ok((
        max < 1e-10,
        format!(
            "{cases} shapes; max |diff| inter {:.1e} intra {:.1e} standard {:.1e} two_axis {:.1e} bottleneck {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    ))
}

fn collapse_identities() -> CheckResult {
    let mut rng = Rng::new(202);
    let (mut single_channel, mut single_patch) = (0.0f64, 0.0f64);
    for n in 1..=6 {
        for (d, h) in [(2, 1), (4, 2), (8, 2)] {
            let p = MhaParams::<f64>::random(d, h, 0.5, &mut rng, false)?;
            let (x, _) = random_grid(2, 1, n, d, &mut rng);
            let a = intra_channel_attention(&x, &p, &[true; 2])?;
            let b = attention::standard_attention(&x, &p, &[true; 2])?;
            single_channel = single_channel.max(a.value().max_abs_diff(b.value()));
            let (x, _) = random_grid(2, n, 1, d, &mut rng);
            let pad = vec![true; 2 * n];
            let a = inter_channel_attention(&x, &p, &pad)?;
            let b = attention::standard_attention(&x, &p, &pad)?;
            single_patch = single_patch.max(a.value().max_abs_diff(b.value()));
        }
    }
    Ok((
        single_channel <= 1e-12 && single_patch <= 1e-12,
        format!("C=1 intra vs standard {single_channel:.1e}; Np=1 inter vs standard {single_patch:.1e}"),
    ))
}

fn random_batch(b: usize, real: &[usize], slots: usize, np: usize, l: usize, rng: &mut Rng) -> PatchBatch<f64> {
    let mut patches = Tensor::<f64>::zeros(&[b, slots, np, l]);
    let mut pad_mask = vec![false; b * slots];
    for (e, &c) in real.iter().enumerate() {
        for ch in 0..c {
            pad_mask[e * slots + ch] = true;
            let o = (e * slots + ch) * np * l;
            for v in &mut patches.data_mut()[o..o + np * l] {
                *v = rng.normal();
            }
        }
    }
    PatchBatch {
        patches,
        pad_mask,
        channel_rows: (0..b).flat_map(|_| 0..slots).collect(),
    }
}

fn pad_invariance() -> CheckResult {
    let mut rng = Rng::new(303);
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let mechanism = Mechanism::ALL[instance % 4];
        let c_max = 6;
        let config = EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_e: 8,
            mlp_dim: 16,
            patch_len: 4,
            c_max,
            np_max: 6,
            ..EncoderConfig::tiny()
        }
        .with_mechanism(mechanism);
        let model = Encoder::<f64>::build(config, 1000 + instance as u64)?;
        let b = 1 + rng.below(2);
        let c = 1 + rng.below(c_max - 1);
        let np = 1 + rng.below(6);
        let batch = random_batch(b, &vec![c; b], c, np, 4, &mut rng);
        let mask = (rng.uniform() < 0.5).then(|| (0.5, rng.next_u64()));
        let (plain, padded) = no_grad(|| -> Result<_> {
            let bound = model.store.bind_frozen();
            let run = |pad: bool| -> Result<Tensor<f64>> {
                let tokens = model.tokens(&bound, &batch, TokenOptions { mask, pad })?;
                Ok(model.forward(&bound, &tokens, None)?.value().clone())
            };
            Ok((run(false)?, run(true)?))
        })?;
        let d = 8;
        let row = np * d;
        for e in 0..b {
            let a = &plain.data()[e * c * row..(e + 1) * c * row];
            let p = &padded.data()[e * c_max * row..e * c_max * row + c * row];
            worst = worst.max(max_diff(a, p));
        }
    }
    Ok((worst < 1e-6, format!("20 instances, all mechanisms; max |diff| {worst:.1e}")))
}

fn grad_model(mechanism: Mechanism) -> Result<(Encoder<f64>, PatchBatch<f64>, Vec<usize>)> {
    let config = EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        d_e: 4,
        mlp_dim: 8,
        patch_len: 4,
        c_max: 3,
        np_max: 4,
        drop_path_rate: 0.0,
        mechanism,
    };
    let mut model = Encoder::<f64>::build(config, 44)?;
    model.attach_head(HeadKind::Classification, 2, 45)?;
    let mut rng = Rng::new(46);
    let batch = random_batch(2, &[2, 1], 2, 3, 4, &mut rng);
    Ok((model, batch, vec![0, 1]))
}

fn grad_loss(model: &Encoder<f64>, bound: &Bound<f64>, batch: &PatchBatch<f64>, labels: &[usize]) -> Result<Var<f64>> {
    let tokens = model.tokens(
        bound,
        batch,
        TokenOptions {
            mask: Some((0.5, 47)),
            pad: true,
        },
    )?;
    let hidden = model.forward(bound, &tokens, None)?;
    let pred = model.reconstruct(bound, &hidden)?;
    let (recon, _) = reconstruction_loss(&tokens.raw_patches, &pred, &tokens.masked, &tokens.real_positions(), 0.1)?;
    let logits = model.apply_head(bound, &mean_pool(&hidden, &tokens.pad_mask)?)?;
    recon.add(&smoothed_cross_entropy(&logits, labels, 0.1)?)
}

/// Largest relative error between backprop and finite differences over
/// every scalar parameter, and the number of scalars checked.
pub fn model_gradient_error(mechanism: Mechanism) -> Result<(f64, usize)> {
    let (mut model, batch, labels) = grad_model(mechanism)?;
    let bound = model.store.bind_all();
    let grads = grad_loss(&model, &bound, &batch, &labels)?.backward()?;
    let analytic: Vec<Vec<f64>> = model
        .store
        .ids()
        .map(|id| {
            grads
                .get(bound.var(id))
                .map(Tensor::to_f64_vec)
                .unwrap_or_else(|| vec![0.0; model.store.get(id).len()])
        })
        .collect();
    drop(bound);
    let ids: Vec<_> = model.store.ids().collect();
    let (mut worst, mut count) = (0.0f64, 0);
    for (k, id) in ids.into_iter().enumerate() {
        let x = model.store.get(id).to_f64_vec();
        let numeric = oracle::five_point_difference(
            |probe| {
                model.store.get_mut(id).data_mut().copy_from_slice(probe);
                no_grad(|| {
                    let bound = model.store.bind_frozen();
                    grad_loss(&model, &bound, &batch, &labels).map(|l| l.value().item())
                })
                .expect("loss evaluates")
            },
            &x,
            1e-3,
        );
        model.store.get_mut(id).data_mut().copy_from_slice(&x);
        for (a, n) in analytic[k].iter().zip(&numeric) {
            worst = worst.max(oracle::relative_error(*a, *n, 1e-6));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn gradient_check() -> CheckResult {
    let mut parts = Vec::new();
    let mut ok = true;
    for m in Mechanism::ALL {
        let (err, n) = model_gradient_error(m)?;
        ok &= err < 1e-4;
        parts.push(format!("{m} {n} params {err:.1e}"));
    }
    Ok((ok, format!("max rel error: {}", parts.join(", "))))
}

/// Score-element formulas written out independently of the library.
fn table_formula(kind: AttentionKind, c: u64, n: u64) -> u64 {
    match kind {
        AttentionKind::Intra => c * n * n,
        AttentionKind::Inter => n * c * c,
        AttentionKind::Alternating => std::cmp::max(c * n * n, n * c * c),
        AttentionKind::Standard => c * c * n * n,
        AttentionKind::TwoAxis => c * c * n + c * n * n,
        AttentionKind::Bottleneck => c * c + n * n,
    }
}

/// Largest per-block score count seen while running `kind` once on a
/// `[1, c, np, 2]` grid.
fn metered(kind: AttentionKind, c: usize, np: usize) -> Result<u64> {
    let mut rng = Rng::new(5);
    let p = MhaParams::<f64>::random(2, 1, 0.5, &mut rng, false)?;
    let (x, _) = random_grid(1, c, np, 2, &mut rng);
    let pad = vec![true; c];
    let single = LayerAttention::Single(p.clone());
    meter::reset();
    no_grad(|| -> Result<()> {
        match kind {
            AttentionKind::Intra => drop(intra_channel_attention(&x, &p, &pad)?),
            AttentionKind::Inter => drop(inter_channel_attention(&x, &p, &pad)?),
            AttentionKind::Alternating => {
                layer_attention(Mechanism::Alternating, 0, &x, &single, &pad)?;
                layer_attention(Mechanism::Alternating, 1, &x, &single, &pad)?;
            }
            AttentionKind::Standard => drop(layer_attention(Mechanism::Standard, 0, &x, &single, &pad)?),
            AttentionKind::Bottleneck => drop(layer_attention(Mechanism::Bottleneck, 0, &x, &single, &pad)?),
            AttentionKind::TwoAxis => {
                let two = LayerAttention::TwoAxis {
                    channel: p.clone(),
                    patch: p.clone(),
                };
                layer_attention(Mechanism::TwoAxis, 0, &x, &two, &pad)?;
            }
        }
        Ok(())
    })?;
    Ok(meter::reading().peak_block)
}

fn complexity_analytic() -> CheckResult {
    let mut mismatches = Vec::new();
    let mut points = 0;
    for c in [1, 2, 4, 8, 16] {
        for np in [1, 5, 10, 20] {
            points += 1;
            for kind in AttentionKind::ALL {
                let formula = table_formula(kind, c as u64, np as u64);
                let library = score_elements(kind, c, np);
                let counted = metered(kind, c, np)?;
                if formula != library || formula != counted {
                    mismatches.push(format!("{kind} C={c} Np={np}: {formula}/{library}/{counted}"));
                }
            }
        }
    }
    let ratio = score_elements(AttentionKind::Standard, 64, 20) as f64 / score_elements(AttentionKind::Alternating, 64, 20) as f64;
    let cs: Vec<f64> = [1, 2, 4, 8, 16, 32, 64].map(f64::from).to_vec();
    let slope = |kind| {
        let ys: Vec<f64> = cs.iter().map(|&c| score_elements(kind, c as usize, 20) as f64).collect();
        loglog_slope(&cs, &ys)
    };
    let (s_std, s_intra) = (slope(AttentionKind::Standard), slope(AttentionKind::Intra));
    let ok = mismatches.is_empty() && ratio == 20.0 && (s_std - 2.0).abs() < 1e-12 && (s_intra - 1.0).abs() < 1e-12;
    let mut detail = format!(
        "{points} points x 6 kinds; standard/alternating at C=64 Np=20 = {ratio}; slopes standard {s_std:.12} intra {s_intra:.12}"
    );
    if !mismatches.is_empty() {
        detail.push_str(&format!("; mismatches: {}", mismatches.join(", ")));
    }
    Ok((ok, detail))
}

fn complexity_empirical() -> CheckResult {
    let spec = SweepSpec {
        channels: vec![64],
        repetitions: 10,
        warmup: 2,
        ..SweepSpec::default()
    };
    let points = run_sweep::<f32>(&spec, |_| {})?;
    let time = |kind| {
        points
            .iter()
            .find(|p| p.report.mechanism == kind && p.status == Status::Ok)
            .and_then(|p| p.report.measured_ns)
    };
    let (Some(standard), Some(alternating)) = (time(AttentionKind::Standard), time(AttentionKind::Alternating)) else {
        let statuses: Vec<&str> = points.iter().map(|p| p.status.name()).collect();
        return Ok((false, format!("no timing: {}", statuses.join(", "))));
    };
    let ratio = standard as f64 / alternating as f64;
    let encoder = run_sweep::<f32>(
        &SweepSpec {
            repetitions: 3,
            warmup: 1,
            scope: Scope::Encoder,
            ..spec.clone()
        },
        |_| {},
    )
    .ok()
    .and_then(|pts| {
        let t = |k| pts.iter().find(|p| p.report.mechanism == k).and_then(|p| p.report.measured_ns);
        Some(t(AttentionKind::Standard)? as f64 / t(AttentionKind::Alternating)? as f64)
    });
    let mut detail = format!(
        "Large, C=64 Np=20, median of 10: standard {:.2} s, alternating {:.2} s, ratio {ratio:.2}",
        standard as f64 * 1e-9,
        alternating as f64 * 1e-9
    );
    if let Some(e) = encoder {
        detail.push_str(&format!(" (whole encoder incl. MLP: {e:.2})"));
    }
    Ok((ratio >= 2.0, detail))
}

fn parameter_counts() -> CheckResult {
    let targets = [("small", 3.58e6), ("base", 39.95e6), ("large", 85.15e6)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, want) in targets {
        let n = param_count(&EncoderConfig::preset(name)?) as f64;
        let off = (n - want) / want;
        ok &= off.abs() <= 0.02;
        parts.push(format!("{name} {:.2}M ({:+.2}%)", n / 1e6, off * 100.0));
    }
    let large = EncoderConfig::large();
    let extra = param_count(&large.clone().with_mechanism(Mechanism::TwoAxis)) as f64 - param_count(&large) as f64;
    ok &= (extra - 20e6).abs() <= 2e6;
    let small = EncoderConfig::small();
    let built = Encoder::<f32>::build(small.clone(), 0)?.store.numel();
    ok &= built == param_count(&small);
    Ok((
        ok,
        format!(
            "{}; two-axis extra {:.2}M; built small {built}",
            parts.join(", "),
            extra / 1e6
        ),
    ))
}

fn loss_closed_forms() -> CheckResult {
    let mut rng = Rng::new(808);
    let shape = [2, 3, 4, 5];
    let positions = 2 * 3 * 4;
    let l = 5.0;
    let mut worst_closed = 0.0f64;
    let mut worst_oracle = 0.0f64;
    let mut identity_ok = true;
    for trial in 0..20 {
        let truth = Tensor::<f64>::from_fn(&shape, |_| rng.normal());
        let real: Vec<bool> = (0..positions).map(|k| !(k / 4 == 5 && trial % 2 == 0)).collect();
        let mut masked: Vec<bool> = (0..positions).map(|_| rng.bernoulli(0.5)).collect();
        masked[0] = true;
        masked[1] = false;
        let alpha = rng.uniform();
        let delta = rng.normal();

        let (_, perfect) = reconstruction_loss(&truth, &Var::constant(truth.clone()), &masked, &real, alpha)?;
        worst_closed = worst_closed.max(perfect.total.abs());
        let shifted = Var::constant(truth.map(|x| x + delta));
        let (_, off) = reconstruction_loss(&truth, &shifted, &masked, &real, alpha)?;
        let want = l * delta * delta;
        worst_closed = worst_closed
            .max((off.l_masked - want).abs())
            .max((off.l_visible - want).abs())
            .max((off.total - want * (1.0 + alpha)).abs());

        let pred = Tensor::<f64>::from_fn(&shape, |_| rng.normal());
        let (_, got) = reconstruction_loss(&truth, &Var::constant(pred.clone()), &masked, &real, alpha)?;
        let rows = |t: &Tensor<f64>| t.to_f64_vec().chunks(5).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let (lm, lv, total) = oracle::reconstruction_loss(&rows(&truth), &rows(&pred), &masked, &real, alpha);
        worst_oracle = worst_oracle
            .max((got.l_masked - lm).abs())
            .max((got.l_visible - lv).abs())
            .max((got.total - total).abs());
        // one rounding of the final addition
        let slack = f64::EPSILON * got.total.abs();
        identity_ok &= ((got.total - got.l_masked) - alpha * got.l_visible).abs() <= slack;
    }
    Ok((
        worst_closed < 1e-10 && worst_oracle < 1e-10 && identity_ok,
        format!(
            "closed forms {worst_closed:.1e}, vs oracle {worst_oracle:.1e}, total - l_masked = alpha*l_visible {}",
            if identity_ok { "holds" } else { "violated" }
        ),
    ))
}

/// Settings of the toy pre-training run.
pub fn toy_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        batch_size: 128,
        peak_lr: 2e-3,
        min_lr: 1e-5,
        warmup_epochs: 1,
        max_epochs: 5,
        stop_epoch: 5,
        seed: 1,
        ..PretrainConfig::default()
    }
}

/// Settings of the linear probe that follows the toy run.
pub fn toy_probe_config() -> FinetuneConfig {
    FinetuneConfig {
        mode: FinetuneMode::LinearProbe,
        epochs: 3,
        warmup_epochs: 0,
        peak_lr: 1e-2,
        batch_size: 256,
        ..FinetuneConfig::default()
    }
}

fn toy_pretraining() -> CheckResult {
    let mut corpus = generate_synthetic(&SynthSpec {
        n_examples: 10_000,
        ..SynthSpec::default()
    })?;
    corpus.zscore();
    let config = EncoderConfig {
        c_max: 4,
        ..EncoderConfig::tiny()
    };
    let mut model = Encoder::<f32>::build(config, 1)?;
    let pc = toy_pretrain_config();
    let mut opt = pc.optimizer();
    let report = pretrain_run(&mut model, &mut opt, &corpus.recordings, &pc, 0, &RunOutput::default())?;
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss.total).collect();
    let (first, last) = (losses[0], *losses.last().unwrap_or(&f64::NAN));
    let drop = (first - last) / first;

    let (train, val) = corpus.split_at(8000);
    let targets = |c: &crate::data_io::Corpus| Targets::Classes {
        labels: c.labels.clone(),
        n_classes: 2,
    };
    let (tt, vt) = (targets(&train), targets(&val));
    let history = finetune_run(
        &mut model,
        Split {
            recordings: &train.recordings,
            targets: &tt,
        },
        Some(Split {
            recordings: &val.recordings,
            targets: &vt,
        }),
        &toy_probe_config(),
        &FinetuneOutput::default(),
    )?;
    let accuracy = history
        .last()
        .and_then(|e| e.val.as_ref())
        .and_then(|m| m.balanced_accuracy())
        .unwrap_or(0.0);
    let curve: Vec<String> = losses.iter().map(|l| format!("{l:.2}")).collect();
    Ok((
        drop >= 0.30 && accuracy >= 0.90,
        format!(
            "epoch loss {} (-{:.0}%); probe balanced accuracy {accuracy:.3}",
            curve.join(" "),
            drop * 100.0
        ),
    ))
}

fn scratch_dir() -> Result<PathBuf> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos());
    let dir = std::env::temp_dir().join(format!("alternet-verify-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn small_corpus() -> Result<Vec<Recording>> {
    let mut corpus = generate_synthetic(&SynthSpec {
        n_examples: 48,
        n_samples: 512,
        seed: 9,
        ..SynthSpec::default()
    })?;
    corpus.zscore();
    Ok(corpus.recordings)
}

fn determinism_persistence() -> CheckResult {
    let data = small_corpus()?;
    let config = EncoderConfig {
        c_max: 4,
        ..EncoderConfig::tiny()
    };
    let pc = PretrainConfig {
        batch_size: 16,
        max_epochs: 2,
        stop_epoch: 1,
        warmup_epochs: 1,
        seed: 3,
        ..PretrainConfig::default()
    };
    let refs: Vec<&Recording> = data.iter().take(16).collect();
    let batch = crate::data_io::collate::<f32>(&refs, config.patch_len, pc.patch_stride, config.c_max)?;
    let first_loss = |seed: u64| -> Result<f64> {
        let mut model = Encoder::<f32>::build(config.clone(), seed)?;
        let mut opt = pc.optimizer();
        Ok(pretrain_step(&mut model, &mut opt, &batch, &pc, 1e-3, 77, 0)?.total)
    };
    let (a, b, other) = (first_loss(5)?, first_loss(5)?, first_loss(6)?);
    let deterministic = a.to_bits() == b.to_bits() && a != other;

    let dir = scratch_dir()?;
    let result = (|| -> CheckResult {
        let mut model = Encoder::<f32>::build(config.clone(), 5)?;
        let mut opt = pc.optimizer();
        let out = RunOutput {
            dir: Some(dir.clone()),
            preamble: Vec::new(),
        };
        pretrain_run(&mut model, &mut opt, &data, &pc, 0, &out)?;
        let path = dir.join(pretrain::FINAL_CHECKPOINT);

        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        let (restored, extra) = Encoder::<f32>::from_checkpoint(&ck)?;
        let round_trip = restored.to_checkpoint(extra).to_bytes()? == bytes
            && restored
                .store
                .entries()
                .iter()
                .zip(model.store.entries())
                .all(|(x, y)| x.name == y.name && x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

        let before = pretrain::evaluate(&model, &batch, &pc, 91)?.total;
        let after = pretrain::evaluate(&restored, &batch, &pc, 91)?.total;
        let cont = PretrainConfig { stop_epoch: 2, ..pc.clone() };
        let straight = pretrain_run(&mut model, &mut opt, &data, &cont, 1, &RunOutput::default())?;
        let mut resumed = pretrain::resume::<f32>(&path, &cont)?;
        let again = pretrain_run(
            &mut resumed.model,
            &mut resumed.optimizer,
            &data,
            &cont,
            resumed.epoch,
            &RunOutput::default(),
        )?;
        let eval_gap = (before - after).abs();
        let resume_gap = (straight.epochs[0].loss.total - again.epochs[0].loss.total).abs();
        Ok((
            deterministic && round_trip && eval_gap < 1e-6 && resume_gap < 1e-6,
            format!(
                "same-seed first losses {}; checkpoint round-trip {}; reload loss gap {eval_gap:.1e}; resumed epoch gap {resume_gap:.1e}",
                if deterministic { "bit-identical" } else { "differ" },
                if round_trip { "bit-exact" } else { "differs" },
            ),
        ))
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}
