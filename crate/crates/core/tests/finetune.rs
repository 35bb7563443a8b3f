use alternet::data_io::{generate_synthetic, SynthSpec};
use alternet::encoder::{Encoder, EncoderConfig, HeadKind};
use alternet::finetune::{
    aupr, auroc, balanced_accuracy, finetune_run, macro_auroc, r2, rmse, smoothed_cross_entropy, smoothing_floor,
    FinetuneConfig, FinetuneMode, FinetuneOutput, Split, Targets,
};
use alternet::optim::AdamW;
use alternet::{Tensor, Var};

fn tiny() -> EncoderConfig {
    EncoderConfig {
        c_max: 4,
        ..EncoderConfig::tiny()
    }
}

fn corpus(n: usize) -> alternet::data_io::Corpus {
    let mut c = generate_synthetic(&SynthSpec {
        n_examples: n,
        n_samples: 256,
        seed: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    c.zscore();
    c
}

fn quick(mode: FinetuneMode) -> FinetuneConfig {
    FinetuneConfig {
        mode,
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 16,
        peak_lr: 1e-3,
        ..FinetuneConfig::default()
    }
}

#[test]
fn linear_probe_leaves_the_encoder_untouched() {
    let data = corpus(32);
    let targets = Targets::Classes {
        labels: data.labels.clone(),
        n_classes: 2,
    };
    let mut model = Encoder::<f32>::build(tiny(), 1).unwrap();
    let before = model.store.clone();
    let history = finetune_run(
        &mut model,
        Split {
            recordings: &data.recordings,
            targets: &targets,
        },
        None,
        &quick(FinetuneMode::LinearProbe),
        &FinetuneOutput::default(),
    )
    .unwrap();
    assert_eq!(history.len(), 2);
    for e in model.store.entries() {
        match before.find(&e.name) {
            Some(id) => assert_eq!(before.get(id), &e.value, "{} changed", e.name),
            None => assert!(e.name.starts_with("head.cls")),
        }
    }
    assert_eq!(model.head().map(|h| (h.kind, h.outputs)), Some((HeadKind::Classification, 2)));
}

#[test]
fn full_finetuning_moves_the_encoder() {
    let data = corpus(32);
    let targets = Targets::Values(data.labels.iter().map(|&l| vec![l as f64, 1.0 - l as f64]).collect());
    let mut model = Encoder::<f32>::build(tiny(), 1).unwrap();
    let before = model.store.clone();
    let history = finetune_run(
        &mut model,
        Split {
            recordings: &data.recordings,
            targets: &targets,
        },
        Some(Split {
            recordings: &data.recordings[..8],
            targets: &Targets::Values(match &targets {
                Targets::Values(v) => v[..8].to_vec(),
                _ => unreachable!(),
            }),
        }),
        &quick(FinetuneMode::Full),
        &FinetuneOutput::default(),
    )
    .unwrap();
    assert!(history[1].val.is_some());
    let id = before.find("layer0.fc1.weight").unwrap();
    assert_ne!(before.get(id), model.store.get(model.store.find("layer0.fc1.weight").unwrap()));
    assert_eq!(model.config().drop_path_rate, 0.0, "drop-path rate is restored");
}

#[test]
fn layer_decay_multipliers() {
    let mut opt = AdamW::new((0.9, 0.999), 0.05);
    opt.layer_decay = 0.75;
    let model = Encoder::<f32>::build(tiny(), 0).unwrap();
    let n = model.config().n_layers;
    let group = |name: &str| model.store.entry(model.store.find(name).unwrap()).group;
    assert_eq!(opt.group_multiplier(group("recon.weight")), 1.0);
    assert_eq!(opt.group_multiplier(group("layer1.fc1.weight")), 0.75);
    assert_eq!(opt.group_multiplier(group("layer0.fc1.weight")), 0.75 * 0.75);
    assert_eq!(group("embed.proj"), n + 1);
    assert!((opt.group_multiplier(group("embed.proj")) - 0.75f64.powi(n as i32 + 1)).abs() < 1e-15);
}

#[test]
fn metric_hand_cases() {
    assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1], 2), (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1], 2), 0.5);
    assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]), Some(1.0));
    // one of four positive/negative pairs is ordered correctly
    assert_eq!(auroc(&[0.1, 0.8, 0.3, 0.9], &[true, true, false, false]), Some(0.25));
    assert_eq!(auroc(&[0.5, 0.5], &[true, false]), Some(0.5));
    assert_eq!(auroc(&[0.5, 0.4], &[true, true]), None);
    // ranks: +, -, +  -> precision 1 at 1, 2/3 at 3
    let ap = aupr(&[0.9, 0.5, 0.3], &[true, false, true]).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    let probs = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4]];
    assert_eq!(macro_auroc(&probs, &[0, 1, 0], 2), 1.0);
    let truth = vec![vec![1.0], vec![2.0], vec![3.0]];
    assert_eq!(r2(&truth, &truth), 1.0);
    let pred = vec![vec![2.0], vec![2.0], vec![2.0]];
    assert_eq!(r2(&pred, &truth), 0.0);
    assert!((rmse(&pred, &truth) - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

#[test]
fn smoothed_loss_floor_is_reached_at_the_smoothed_target() {
    let (eps, k) = (0.1, 4);
    let on = 1.0 - eps + eps / k as f64;
    let off = eps / k as f64;
    let logits: Vec<f64> = (0..k).map(|j| if j == 2 { on.ln() } else { off.ln() }).collect();
    let loss = smoothed_cross_entropy(&Var::constant(Tensor::new(&[1, k], logits).unwrap()), &[2], eps).unwrap();
    assert!((loss.value().item() - smoothing_floor(eps, k)).abs() < 1e-12);
    let worse = smoothed_cross_entropy(&Var::constant(Tensor::<f64>::zeros(&[1, k])), &[2], eps).unwrap();
    assert!(worse.value().item() > smoothing_floor(eps, k));
}
