use alternet::attention::Mechanism;
use alternet::encoder::{param_count, Encoder, EncoderConfig, HeadKind, TokenOptions};
use alternet::finetune::{mean_pool, smoothed_cross_entropy};
use alternet::oracle::{layer_norm_row, RawEncoder};
use alternet::pretrain::reconstruction_loss;
use alternet::rng::Rng;
use alternet::tokenizer::PatchBatch;
use alternet::{no_grad, Tensor};

fn config(mechanism: Mechanism) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        n_heads: 2,
        d_e: 8,
        mlp_dim: 16,
        patch_len: 4,
        c_max: 5,
        np_max: 6,
        drop_path_rate: 0.0,
        mechanism,
    }
}

fn batch(real: &[usize], slots: usize, np: usize, seed: u64) -> PatchBatch<f64> {
    let mut rng = Rng::new(seed);
    let b = real.len();
    let mut patches = Tensor::<f64>::zeros(&[b, slots, np, 4]);
    let mut pad_mask = vec![false; b * slots];
    for (e, &c) in real.iter().enumerate() {
        for ch in 0..c {
            pad_mask[e * slots + ch] = true;
            let o = (e * slots + ch) * np * 4;
            patches.data_mut()[o..o + np * 4].iter_mut().for_each(|v| *v = rng.normal());
        }
    }
    PatchBatch {
        patches,
        pad_mask,
        channel_rows: (0..b).flat_map(|_| 0..slots).collect(),
    }
}

#[test]
fn matches_unrolled_loop_reference() {
    for mechanism in Mechanism::ALL {
        let model = Encoder::<f64>::build(config(mechanism), 11).unwrap();
        let raw = RawEncoder::from_encoder(&model);
        let (np, slots) = (3, 3);
        let b = batch(&[3, 2], slots, np, 12);
        let (hidden, recon, tokens) = no_grad(|| {
            let bound = model.store.bind_frozen();
            let t = model
                .tokens(&bound, &b, TokenOptions { mask: Some((0.5, 13)), pad: true })
                .unwrap();
            let h = model.forward(&bound, &t, None).unwrap();
            let r = model.reconstruct(&bound, &h).unwrap();
            (h.value().clone(), r.value().clone(), t)
        });
        // the oracle sees the padded layout the model used
        let c_max = 5;
        let mut patches = vec![0.0; 2 * c_max * np * 4];
        for e in 0..2 {
            for ch in 0..slots {
                let src = (e * slots + ch) * np * 4;
                let dst = (e * c_max + ch) * np * 4;
                patches[dst..dst + np * 4].copy_from_slice(&b.patches.data()[src..src + np * 4]);
            }
        }
        let grid = raw.embed(&patches, 2, c_max, np, &tokens.pad_mask, &tokens.masked);
        let want = raw.forward(&grid, &tokens.pad_mask);
        let diff = hidden.to_f64_vec().iter().zip(&want.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{mechanism}: {diff}");
        let want_recon: Vec<f64> = raw.reconstruct(&want).concat();
        let diff = recon.to_f64_vec().iter().zip(&want_recon).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{mechanism} reconstruction: {diff}");
    }
}

#[test]
fn zero_blocks_reduce_to_final_norm_of_tokens() {
    let mut model = Encoder::<f64>::build(config(Mechanism::Alternating), 3).unwrap();
    for e in model.store.entries_mut() {
        if e.name.starts_with("layer") && !e.name.contains("norm") {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let b = batch(&[2], 2, 4, 4);
    let (tokens, hidden) = no_grad(|| {
        let bound = model.store.bind_frozen();
        let t = model.tokens(&bound, &b, TokenOptions::default()).unwrap();
        let h = model.forward(&bound, &t, None).unwrap();
        (t.tokens.value().clone(), h.value().clone())
    });
    let gain = model.store.get(model.store.find("final_norm.gain").unwrap()).to_f64_vec();
    let bias = model.store.get(model.store.find("final_norm.bias").unwrap()).to_f64_vec();
    for (t, h) in tokens.data().chunks(8).zip(hidden.data().chunks(8)) {
        let want = layer_norm_row(t, &gain, &bias, alternet::params::LN_EPS);
        for (a, b) in want.iter().zip(h) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Perturbs one token of channel 1 and reports whether channel 0 at the
/// same patch index, and channel 1 at another index, change.
fn reach_after_one_layer(mechanism: Mechanism) -> (bool, bool) {
    let cfg = EncoderConfig {
        n_layers: 2,
        ..config(mechanism)
    };
    let model = Encoder::<f64>::build(cfg, 5).unwrap();
    let b = batch(&[2], 2, 3, 6);
    let mut moved = b.clone();
    moved.patches.data_mut()[3 * 4] += 1.0; // channel 1, patch 0
    let first_block = |batch: &PatchBatch<f64>| {
        no_grad(|| {
            let bound = model.store.bind_frozen();
            let t = model.tokens(&bound, batch, TokenOptions::default()).unwrap();
            // only the first block's attention is observed
            let mut only_first = model.clone();
            for e in only_first.store.entries_mut() {
                if e.name.starts_with("layer1") && !e.name.contains("norm") {
                    e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
                if e.name.starts_with("layer0.fc") {
                    e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let bound2 = only_first.store.bind_frozen();
            drop(bound);
            only_first.forward(&bound2, &t, None).unwrap().value().clone()
        })
    };
    let (a, m) = (first_block(&b), first_block(&moved));
    let token = |t: &Tensor<f64>, c: usize, i: usize| t.data()[(c * 3 + i) * 8..(c * 3 + i + 1) * 8].to_vec();
    let across = token(&a, 0, 0) != token(&m, 0, 0);
    let along = token(&a, 1, 2) != token(&m, 1, 2);
    (across, along)
}

#[test]
fn layer_parity_picks_the_mixing_axis() {
    // first layer mixes channels only
    assert_eq!(reach_after_one_layer(Mechanism::Alternating), (true, false));
    assert_eq!(reach_after_one_layer(Mechanism::Standard), (true, true));
    assert_eq!(reach_after_one_layer(Mechanism::TwoAxis), (true, true));
}

#[test]
fn every_live_parameter_receives_gradient() {
    for mechanism in Mechanism::ALL {
        let mut model = Encoder::<f64>::build(config(mechanism), 21).unwrap();
        model.attach_head(HeadKind::Classification, 3, 22).unwrap();
        let b = batch(&[2, 1], 2, 4, 23);
        let bound = model.store.bind_all();
        let tokens = model
            .tokens(&bound, &b, TokenOptions { mask: Some((0.5, 24)), pad: true })
            .unwrap();
        let hidden = model.forward(&bound, &tokens, None).unwrap();
        let pred = model.reconstruct(&bound, &hidden).unwrap();
        let (recon, _) =
            reconstruction_loss(&tokens.raw_patches, &pred, &tokens.masked, &tokens.real_positions(), 0.1).unwrap();
        let logits = model.apply_head(&bound, &mean_pool(&hidden, &tokens.pad_mask).unwrap()).unwrap();
        let loss = recon.add(&smoothed_cross_entropy(&logits, &[0, 2], 0.1).unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        for id in model.store.ids() {
            let e = model.store.entry(id);
            let g = grads.get(bound.var(id)).map(Tensor::to_f64_vec).unwrap_or_default();
            let d = 8;
            let rows: Vec<&[f64]> = g.chunks(d).collect();
            let live = match e.name.as_str() {
                // positions 0..4 and channel rows 0..2 are in use
                "embed.pos" => &rows[..4],
                "embed.chan" => &rows[..2],
                _ => &rows[..],
            };
            assert!(!live.is_empty(), "{mechanism}: {} has no gradient", e.name);
            // pad tokens never reach a real output
            if e.name == "embed.pad_token" {
                assert!(g.iter().all(|&v| v == 0.0), "{mechanism}: pad token has gradient");
                continue;
            }
            // key biases only shift each score row by a constant
            if e.name.ends_with(".k.bias") {
                assert!(g.iter().all(|v| v.abs() < 1e-12), "{mechanism}: {} {g:?}", e.name);
                continue;
            }
            for (r, row) in live.iter().enumerate() {
                assert!(row.iter().any(|&v| v != 0.0), "{mechanism}: {} row {r} is zero", e.name);
            }
        }
    }
}

#[test]
fn built_size_matches_count() {
    for mechanism in Mechanism::ALL {
        let cfg = config(mechanism);
        let model = Encoder::<f32>::build(cfg.clone(), 0).unwrap();
        assert_eq!(model.store.numel(), param_count(&cfg));
    }
}

#[test]
fn drop_path_is_identity_at_evaluation_and_random_in_training() {
    let cfg = EncoderConfig {
        drop_path_rate: 0.5,
        ..config(Mechanism::Alternating)
    };
    let model = Encoder::<f64>::build(cfg, 8).unwrap();
    let b = batch(&[2; 8], 2, 3, 9);
    no_grad(|| {
        let bound = model.store.bind_frozen();
        let t = model.tokens(&bound, &b, TokenOptions::default()).unwrap();
        let eval1 = model.forward(&bound, &t, None).unwrap();
        let eval2 = model.forward(&bound, &t, None).unwrap();
        assert_eq!(eval1.value(), eval2.value());
        let mut rng = Rng::new(1);
        let train = model.forward(&bound, &t, Some(&mut rng)).unwrap();
        assert_ne!(train.value(), eval1.value());
    });
}
