//! Browser bindings for the demo page in `www/`.
//!
//! Each export wraps a plain function so the same code runs under
//! `cargo test` on the host.

use alternet::attention::{score_elements, AttentionKind, Mechanism};
use alternet::data_io::{collate, generate_synthetic, SynthSpec};
use alternet::encoder::{Encoder, EncoderConfig, TokenOptions};
use alternet::rng::Rng;
use alternet::{no_grad, Error, Result, Tensor, Var};
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Score entries per example for `kind` at C = 1..=max_channels.
pub fn score_curve(kind: &str, n_patches: usize, max_channels: usize) -> Result<Vec<f64>> {
    let kind: AttentionKind = kind.parse()?;
    if n_patches == 0 {
        return Err(Error::Contract("need at least one patch".into()));
    }
    Ok((1..=max_channels).map(|c| score_elements(kind, c, n_patches) as f64).collect())
}

#[wasm_bindgen]
pub fn attention_kinds() -> Vec<String> {
    AttentionKind::ALL.iter().map(|k| k.name().to_string()).collect()
}

#[wasm_bindgen]
pub fn cost_curve(kind: &str, n_patches: usize, max_channels: usize) -> std::result::Result<Vec<f64>, JsError> {
    score_curve(kind, n_patches, max_channels).map_err(js)
}

fn demo_config(mechanism: Mechanism, channels: usize, n_patches: usize, patch_len: usize, n_layers: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers,
        n_heads: 2,
        d_e: 8,
        mlp_dim: 16,
        patch_len,
        c_max: channels,
        np_max: n_patches,
        drop_path_rate: 0.0,
        mechanism,
    }
}

/// A synthetic recording cut into patches, with the positions a masking
/// draw would replace.
#[wasm_bindgen]
pub struct MaskView {
    channels: usize,
    n_patches: usize,
    patch_len: usize,
    label: usize,
    samples: Vec<f32>,
    masked: Vec<u8>,
}

#[wasm_bindgen]
impl MaskView {
    #[wasm_bindgen(getter)]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[wasm_bindgen(getter)]
    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    #[wasm_bindgen(getter)]
    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    #[wasm_bindgen(getter)]
    pub fn label(&self) -> usize {
        self.label
    }

    /// Channel-major `[C, Np·L]` z-scored samples.
    #[wasm_bindgen(getter)]
    pub fn samples(&self) -> Vec<f32> {
        self.samples.clone()
    }

    /// `[C, Np]`, 1 where the patch is masked.
    #[wasm_bindgen(getter)]
    pub fn masked(&self) -> Vec<u8> {
        self.masked.clone()
    }
}

pub fn mask_view(channels: usize, n_patches: usize, patch_len: usize, ratio: f64, seed: u64) -> Result<MaskView> {
    let spec = SynthSpec {
        n_examples: 1,
        channels,
        n_samples: n_patches * patch_len,
        seed,
        ..SynthSpec::default()
    };
    let mut corpus = generate_synthetic(&spec)?;
    corpus.zscore();
    let rec = &corpus.recordings[0];
    let batch = collate::<f32>(&[rec], patch_len, patch_len, channels)?;
    let model = Encoder::<f32>::build(demo_config(Mechanism::Alternating, channels, n_patches, patch_len, 2), seed)?;
    let tokens = no_grad(|| {
        let bound = model.store.bind_frozen();
        model.tokens(
            &bound,
            &batch,
            TokenOptions {
                mask: Some((ratio, seed)),
                pad: false,
            },
        )
    })?;
    Ok(MaskView {
        channels,
        n_patches,
        patch_len,
        label: corpus.labels[0],
        samples: batch.patches.data().to_vec(),
        masked: tokens.masked.iter().map(|&m| u8::from(m)).collect(),
    })
}

#[wasm_bindgen]
pub fn masked_patches(
    channels: usize,
    n_patches: usize,
    patch_len: usize,
    ratio: f64,
    seed: u64,
) -> std::result::Result<MaskView, JsError> {
    mask_view(channels, n_patches, patch_len, ratio, seed).map_err(js)
}

/// Gradient norm of the output at `(query_c, query_i)` with respect to
/// every input token after `layers` blocks of a random encoder, as a
/// `[C, Np]` grid. Entries at rounding level are tokens the query cannot
/// see yet.
pub fn reach(
    mechanism: &str,
    channels: usize,
    n_patches: usize,
    layers: usize,
    query_c: usize,
    query_i: usize,
) -> Result<Vec<f64>> {
    let mechanism: Mechanism = mechanism.parse()?;
    if query_c >= channels || query_i >= n_patches {
        return Err(Error::Contract("query outside the grid".into()));
    }
    let patch_len = 4;
    let built_layers = (layers.max(1) + 1) / 2 * 2;
    let mut model = Encoder::<f64>::build(demo_config(mechanism, channels, n_patches, patch_len, built_layers), 7)?;
    // blocks past `layers` become identities
    for e in model.store.entries_mut() {
        let skip = e
            .name
            .strip_prefix("layer")
            .and_then(|r| r.split('.').next())
            .and_then(|l| l.parse::<usize>().ok())
            .is_some_and(|l| l >= layers);
        if skip && !e.name.contains("norm") {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let spec = SynthSpec {
        n_examples: 1,
        channels,
        n_samples: n_patches * patch_len,
        seed: 3,
        ..SynthSpec::default()
    };
    let rec = &generate_synthetic(&spec)?.recordings[0];
    let batch = collate::<f64>(&[rec], patch_len, patch_len, channels)?;
    let bound = model.store.bind_frozen();
    let mut tokens = model.tokens(&bound, &batch, TokenOptions::default())?;
    let input = Var::param(tokens.tokens.value().clone());
    tokens.tokens = input.clone();
    let hidden = model.forward(&bound, &tokens, None)?;
    let d = model.config().d_e;
    // a fixed random readout; a plain sum of a layer-normed row is constant
    let mut rng = Rng::new(11);
    let readout = Var::constant(Tensor::from_fn(&[1, d], |_| rng.normal()));
    let query = hidden
        .reshape(&[channels * n_patches, d])?
        .gather_rows(&[query_c * n_patches + query_i])?
        .mul(&readout)?
        .sum();
    let grads = query.backward()?;
    let g = grads.get(&input).map(|t| t.to_f64_vec()).unwrap_or_default();
    Ok(g.chunks(d).map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt()).collect())
}

#[wasm_bindgen]
pub fn reach_map(
    mechanism: &str,
    channels: usize,
    n_patches: usize,
    layers: usize,
    query_c: usize,
    query_i: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    reach(mechanism, channels, n_patches, layers, query_c, query_i).map_err(js)
}
