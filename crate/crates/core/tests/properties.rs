use alternet::attention::Mechanism;
use alternet::config::RunConfig;
use alternet::data_io::{decode_recording, encode_recording};
use alternet::encoder::{Checkpoint, Encoder, EncoderConfig, TokenOptions};
use alternet::finetune::mean_pool;
use alternet::pretrain::reconstruction_loss;
use alternet::rng::Rng;
use alternet::tokenizer::{mask_count, patch, patch_count, PatchBatch, Recording};
use alternet::{no_grad, Tensor, Var};
use proptest::prelude::*;

fn small_config(mechanism: Mechanism, c_max: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        d_e: 8,
        mlp_dim: 16,
        patch_len: 4,
        c_max,
        np_max: 6,
        drop_path_rate: 0.0,
        mechanism,
    }
}

fn batch_of(b: usize, c: usize, slots: usize, np: usize, seed: u64) -> PatchBatch<f64> {
    let mut rng = Rng::new(seed);
    let mut patches = Tensor::<f64>::zeros(&[b, slots, np, 4]);
    let row = np * 4;
    for e in 0..b {
        for ch in 0..c {
            let o = (e * slots + ch) * row;
            patches.data_mut()[o..o + row].iter_mut().for_each(|v| *v = rng.normal());
        }
    }
    PatchBatch {
        patches,
        pad_mask: (0..b * slots).map(|k| k % slots < c).collect(),
        channel_rows: (0..b).flat_map(|_| 0..slots).collect(),
    }
}

fn encode(model: &Encoder<f64>, batch: &PatchBatch<f64>, options: TokenOptions) -> Tensor<f64> {
    no_grad(|| {
        let bound = model.store.bind_frozen();
        let tokens = model.tokens(&bound, batch, options).unwrap();
        model.forward(&bound, &tokens, None).unwrap().value().clone()
    })
}

fn mechanism() -> impl Strategy<Value = Mechanism> {
    prop::sample::select(Mechanism::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn patch_count_matches_formula(t in 1usize..400, l in 1usize..80, s in 1usize..80, c in 1usize..4) {
        let want = if t >= l { (t - l) / s + 1 } else { 0 };
        prop_assert_eq!(patch_count(t, l, s), want);
        let rec = Recording::with_default_ids((0..t * c).map(|i| i as f32).collect(), 100.0, c).unwrap();
        match patch(&rec, l, s) {
            Ok(grid) => {
                prop_assert_eq!(grid.n_patches, want);
                let i = want - 1;
                let ch = c - 1;
                let expect: Vec<f32> = (0..l).map(|k| rec.sample(i * s + k, ch)).collect();
                prop_assert_eq!(grid.patch(ch, i), &expect[..]);
            }
            Err(_) => prop_assert_eq!(want, 0),
        }
    }

    #[test]
    fn padding_channels_leaves_real_tokens_unchanged(
        mech in mechanism(),
        c in 1usize..5,
        np in 1usize..6,
        b in 1usize..3,
        seed in any::<u64>(),
        masked in any::<bool>(),
    ) {
        let model = Encoder::<f64>::build(small_config(mech, 6), seed).unwrap();
        let batch = batch_of(b, c, c, np, seed ^ 1);
        let mask = masked.then_some((0.5, seed ^ 2));
        let plain = encode(&model, &batch, TokenOptions { mask, pad: false });
        let padded = encode(&model, &batch, TokenOptions { mask, pad: true });
        let row = np * 8;
        for e in 0..b {
            let a = &plain.data()[e * c * row..(e + 1) * c * row];
            let p = &padded.data()[e * 6 * row..e * 6 * row + c * row];
            for (x, y) in a.iter().zip(p) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn channel_permutation_is_equivariant(mech in mechanism(), c in 2usize..5, np in 1usize..5, seed in any::<u64>()) {
        let model = Encoder::<f64>::build(small_config(mech, 6), seed).unwrap();
        let batch = batch_of(1, c, c, np, seed ^ 3);
        let mut perm: Vec<usize> = (0..c).collect();
        Rng::new(seed).shuffle(&mut perm);
        let row = np * 4;
        let mut permuted = batch.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.patches.data_mut()[dst * row..(dst + 1) * row]
                .copy_from_slice(&batch.patches.data()[src * row..(src + 1) * row]);
            permuted.channel_rows[dst] = batch.channel_rows[src];
        }
        let a = encode(&model, &batch, TokenOptions::default());
        let p = encode(&model, &permuted, TokenOptions::default());
        let out = np * 8;
        for (dst, &src) in perm.iter().enumerate() {
            let x = &a.data()[src * out..(src + 1) * out];
            let y = &p.data()[dst * out..(dst + 1) * out];
            for (u, v) in x.iter().zip(y) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_pool_ignores_pads_and_order(c in 1usize..5, pads in 0usize..3, np in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let slots = c + pads;
        let d = 3;
        let t = Tensor::from_fn(&[1, slots, np, d], |_| rng.normal());
        let mask: Vec<bool> = (0..slots).map(|k| k < c).collect();
        let base = mean_pool(&Var::constant(t.clone()), &mask).unwrap().value().to_f64_vec();

        let mut noisy = t.clone();
        noisy.data_mut()[c * np * d..].iter_mut().for_each(|v| *v = 1e6 * rng.normal());
        let with_noise = mean_pool(&Var::constant(noisy), &mask).unwrap().value().to_f64_vec();

        let mut rev = t.clone();
        let row = np * d;
        for k in 0..c {
            let src = c - 1 - k;
            rev.data_mut()[k * row..(k + 1) * row].copy_from_slice(&t.data()[src * row..(src + 1) * row]);
        }
        let reversed = mean_pool(&Var::constant(rev), &mask).unwrap().value().to_f64_vec();
        for ((a, b), r) in base.iter().zip(&with_noise).zip(&reversed) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn recording_file_round_trips(t in 1usize..50, c in 1usize..6, rate in 1.0f32..2000.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let samples: Vec<f32> = (0..t * c).map(|_| rng.normal() as f32 * 100.0).collect();
        let ids = (0..c).map(|k| format!("ch-{k}-{}", seed % 7)).collect();
        let rec = Recording::new(samples, rate, ids).unwrap();
        let back = decode_recording(&encode_recording(&rec)).unwrap();
        prop_assert_eq!(&back, &rec);
        prop_assert_eq!(encode_recording(&back), encode_recording(&rec));
    }

    #[test]
    fn truncated_recording_files_are_rejected(cut in 1usize..40, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let rec = Recording::with_default_ids((0..24).map(|_| rng.normal() as f32).collect(), 128.0, 3).unwrap();
        let bytes = encode_recording(&rec);
        let cut = cut.min(bytes.len());
        prop_assert!(decode_recording(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn checkpoint_bytes_round_trip(mech in mechanism(), seed in any::<u64>()) {
        let model = Encoder::<f32>::build(small_config(mech, 4), seed).unwrap();
        let extra = vec![("train.step".to_string(), Tensor::scalar(seed as f32))];
        let bytes = model.to_checkpoint(extra).to_bytes().unwrap();
        let (back, extra) = Encoder::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back.to_checkpoint(extra).to_bytes().unwrap(), bytes);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), mech in mechanism(), ratio in 0.05f64..0.95) {
        let mut cfg = RunConfig::default();
        cfg.set_seed(seed);
        cfg.encoder = cfg.encoder.clone().with_mechanism(mech);
        cfg.pretrain.mask_ratio = ratio;
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn loss_depends_only_on_position_sets(seed in any::<u64>(), alpha in 0.0f64..2.0) {
        let mut rng = Rng::new(seed);
        let n = 12;
        let truth = Tensor::<f64>::from_fn(&[1, 3, 4, 5], |_| rng.normal());
        let pred = Tensor::<f64>::from_fn(&[1, 3, 4, 5], |_| rng.normal());
        let mut masked: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.5)).collect();
        masked[0] = true;
        let real = vec![true; n];
        let (_, base) = reconstruction_loss(&truth, &Var::constant(pred.clone()), &masked, &real, alpha).unwrap();

        // reversing the position order keeps every set intact
        let flip = |t: &Tensor<f64>| {
            let rows: Vec<&[f64]> = t.data().chunks(5).collect();
            Tensor::new(&[1, 3, 4, 5], rows.into_iter().rev().flatten().copied().collect()).unwrap()
        };
        let rev_mask: Vec<bool> = masked.iter().rev().copied().collect();
        let (_, flipped) = reconstruction_loss(&flip(&truth), &Var::constant(flip(&pred)), &rev_mask, &real, alpha).unwrap();
        prop_assert!((base.total - flipped.total).abs() < 1e-12);
        prop_assert!((base.l_masked - flipped.l_masked).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_is_linear_in_alpha(seed in any::<u64>(), alpha in 0.0f64..2.0) {
        let mut rng = Rng::new(seed);
        let truth = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |_| rng.normal());
        let pred_t = Tensor::<f64>::from_fn(&[1, 2, 3, 4], |_| rng.normal());
        let masked = vec![true, false, true, false, false, true];
        let real = vec![true, true, true, false, true, true];
        let grad = |a: f64| {
            let pred = Var::param(pred_t.clone());
            let (loss, _) = reconstruction_loss(&truth, &pred, &masked, &real, a).unwrap();
            loss.backward().unwrap().get(&pred).unwrap().to_f64_vec()
        };
        let (g0, g1, ga) = (grad(0.0), grad(1.0), grad(alpha));
        for k in 0..g0.len() {
            prop_assert!((ga[k] - (g0[k] + alpha * (g1[k] - g0[k]))).abs() < 1e-12);
        }
        // position 3 lies on a pad channel
        prop_assert!(ga[12..16].iter().all(|&g| g == 0.0));
    }
}

#[test]
fn masking_is_uniform_over_real_positions() {
    let config = small_config(Mechanism::Alternating, 4);
    let model = Encoder::<f64>::build(config, 0).unwrap();
    let (c, np) = (3, 5);
    let batch = batch_of(1, c, 4, np, 1);
    let bound = model.store.bind_frozen();
    let trials = 10_000;
    let mut hits = vec![0usize; 4 * np];
    no_grad(|| {
        for seed in 0..trials {
            let tokens = model
                .tokens(&bound, &batch, TokenOptions { mask: Some((0.4, seed as u64)), pad: false })
                .unwrap();
            assert_eq!(tokens.masked.iter().filter(|&&m| m).count(), mask_count(0.4, c * np));
            for (h, &m) in hits.iter_mut().zip(&tokens.masked) {
                *h += usize::from(m);
            }
        }
    });
    // pad channel is never masked
    assert!(hits[c * np..].iter().all(|&h| h == 0));
    let p = mask_count(0.4, c * np) as f64 / (c * np) as f64;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for &h in &hits[..c * np] {
        assert!((h as f64 - trials as f64 * p).abs() < 5.0 * sd, "{h} hits");
    }
}
