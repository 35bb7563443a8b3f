//! Reference implementations written as explicit loops over `f64` slices.
//!
//! None of these call the tensor kernels or the autodiff graph; they exist
//! to check the fast paths and are shared by the test suites and the
//! `verify` command.

/// Dense `[b, c, np, d]` grid in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub b: usize,
    pub c: usize,
    pub np: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(b: usize, c: usize, np: usize, d: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), b * c * np * d);
        Self { b, c, np, d, data }
    }

    pub fn zeros(b: usize, c: usize, np: usize, d: usize) -> Self {
        Self::new(b, c, np, d, vec![0.0; b * c * np * d])
    }

    fn offset(&self, b: usize, c: usize, i: usize) -> usize {
        ((b * self.c + c) * self.np + i) * self.d
    }

    pub fn token(&self, b: usize, c: usize, i: usize) -> &[f64] {
        let o = self.offset(b, c, i);
        &self.data[o..o + self.d]
    }

    pub fn token_mut(&mut self, b: usize, c: usize, i: usize) -> &mut [f64] {
        let o = self.offset(b, c, i);
        &mut self.data[o..o + self.d]
    }
}

/// Multi-head attention weights, row-major `[d, d]` applied as `x W + b`.
#[derive(Debug, Clone)]
pub struct RawMha {
    pub d: usize,
    pub heads: usize,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

/// `x W + b` for a single row.
pub fn affine_row(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (din, dout) = (x.len(), b.len());
    (0..dout)
        .map(|o| b[o] + (0..din).map(|i| x[i] * w[i * dout + o]).sum::<f64>())
        .collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; x.len()];
    }
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) / (var + eps).sqrt() * g + b)
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Attention of explicit query/key/value rows with per-pair score loops.
/// Values may have any width; heads split queries/keys and values evenly.
fn attend_rows(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], key_ok: &[bool], heads: usize) -> Vec<Vec<f64>> {
    let qd = q.first().map_or(0, Vec::len);
    let vd = v.first().map_or(0, Vec::len);
    let (qh, vh) = (qd / heads, vd / heads);
    q.iter()
        .map(|qi| {
            let mut out = vec![0.0; vd];
            if !key_ok.iter().any(|&ok| ok) {
                return out;
            }
            for h in 0..heads {
                let mut scores = Vec::with_capacity(k.len());
                for (kj, &ok) in k.iter().zip(key_ok) {
                    if !ok {
                        scores.push(f64::NEG_INFINITY);
                        continue;
                    }
                    let mut s = 0.0;
                    for e in h * qh..(h + 1) * qh {
                        s += qi[e] * kj[e];
                    }
                    scores.push(s / (qh as f64).sqrt());
                }
                let w = softmax(&scores);
                for (j, vj) in v.iter().enumerate() {
                    for e in h * vh..(h + 1) * vh {
                        out[e] += w[j] * vj[e];
                    }
                }
            }
            out
        })
        .collect()
}

/// Self-attention over one sequence of tokens; rows with no attendable key
/// are zero.
pub fn mha(tokens: &[Vec<f64>], key_ok: &[bool], p: &RawMha) -> Vec<Vec<f64>> {
    let q: Vec<Vec<f64>> = tokens.iter().map(|x| affine_row(x, &p.wq, &p.bq)).collect();
    let k: Vec<Vec<f64>> = tokens.iter().map(|x| affine_row(x, &p.wk, &p.bk)).collect();
    let v: Vec<Vec<f64>> = tokens.iter().map(|x| affine_row(x, &p.wv, &p.bv)).collect();
    let mixed = attend_rows(&q, &k, &v, key_ok, p.heads);
    if !key_ok.iter().any(|&ok| ok) {
        return vec![vec![0.0; p.d]; tokens.len()];
    }
    mixed.iter().map(|m| affine_row(m, &p.wo, &p.bo)).collect()
}

fn real(pad_mask: &[bool], g: &Grid, b: usize, c: usize) -> bool {
    pad_mask[b * g.c + c]
}

pub fn intra(g: &Grid, pad_mask: &[bool], p: &RawMha) -> Grid {
    let mut out = Grid::zeros(g.b, g.c, g.np, g.d);
    for b in 0..g.b {
        for c in 0..g.c {
            let seq: Vec<Vec<f64>> = (0..g.np).map(|i| g.token(b, c, i).to_vec()).collect();
            let ok = vec![real(pad_mask, g, b, c); g.np];
            for (i, row) in mha(&seq, &ok, p).into_iter().enumerate() {
                out.token_mut(b, c, i).copy_from_slice(&row);
            }
        }
    }
    out
}

pub fn inter(g: &Grid, pad_mask: &[bool], p: &RawMha) -> Grid {
    let mut out = Grid::zeros(g.b, g.c, g.np, g.d);
    for b in 0..g.b {
        for i in 0..g.np {
            let seq: Vec<Vec<f64>> = (0..g.c).map(|c| g.token(b, c, i).to_vec()).collect();
            let ok: Vec<bool> = (0..g.c).map(|c| real(pad_mask, g, b, c)).collect();
            for (c, row) in mha(&seq, &ok, p).into_iter().enumerate() {
                out.token_mut(b, c, i).copy_from_slice(&row);
            }
        }
    }
    out
}

pub fn standard(g: &Grid, pad_mask: &[bool], p: &RawMha) -> Grid {
    let mut out = Grid::zeros(g.b, g.c, g.np, g.d);
    for b in 0..g.b {
        let mut seq = Vec::new();
        let mut ok = Vec::new();
        for c in 0..g.c {
            for i in 0..g.np {
                seq.push(g.token(b, c, i).to_vec());
                ok.push(real(pad_mask, g, b, c));
            }
        }
        for (n, row) in mha(&seq, &ok, p).into_iter().enumerate() {
            out.token_mut(b, n / g.np, n % g.np).copy_from_slice(&row);
        }
    }
    out
}

pub fn two_axis(g: &Grid, pad_mask: &[bool], channel: &RawMha, patch: &RawMha) -> Grid {
    let a1 = inter(g, pad_mask, channel);
    let a2 = intra(g, pad_mask, patch);
    let data = a1.data.iter().zip(&a2.data).map(|(x, y)| 0.5 * (x + y)).collect();
    Grid::new(g.b, g.c, g.np, g.d, data)
}

pub fn bottleneck(g: &Grid, pad_mask: &[bool], p: &RawMha) -> Grid {
    let mut out = Grid::zeros(g.b, g.c, g.np, g.d);
    for b in 0..g.b {
        let proj = |w: &[f64], bias: &[f64]| -> Vec<Vec<Vec<f64>>> {
            (0..g.c)
                .map(|c| (0..g.np).map(|i| affine_row(g.token(b, c, i), w, bias)).collect())
                .collect()
        };
        let (q, k, v) = (proj(&p.wq, &p.bq), proj(&p.wk, &p.bk), proj(&p.wv, &p.bv));
        let mean_over_patches = |x: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
            x.iter()
                .map(|rows| {
                    let mut m = vec![0.0; g.d];
                    for r in rows {
                        for e in 0..g.d {
                            m[e] += r[e] / g.np as f64;
                        }
                    }
                    m
                })
                .collect()
        };
        let ok: Vec<bool> = (0..g.c).map(|c| real(pad_mask, g, b, c)).collect();
        let a1 = attend_rows(&mean_over_patches(&q), &mean_over_patches(&k), &mean_over_patches(&v), &ok, p.heads);

        let n_real = ok.iter().filter(|&&r| r).count() as f64;
        let mean_over_channels = |x: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
            (0..g.np)
                .map(|i| {
                    let mut m = vec![0.0; g.d];
                    for c in (0..g.c).filter(|&c| ok[c]) {
                        for e in 0..g.d {
                            m[e] += x[c][i][e] / n_real;
                        }
                    }
                    m
                })
                .collect()
        };
        let (q2, k2) = (mean_over_channels(&q), mean_over_channels(&k));
        for c in 0..g.c {
            let values = vec![a1[c].clone(); g.np];
            let mixed = attend_rows(&q2, &k2, &values, &vec![true; g.np], p.heads);
            for (i, row) in mixed.iter().enumerate() {
                out.token_mut(b, c, i).copy_from_slice(&affine_row(row, &p.wo, &p.bo));
            }
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error used for gradient checks: `|a-b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Masked/visible reconstruction loss over per-position patch vectors.
/// Returns `(l_masked, l_visible, total)`.
pub fn reconstruction_loss(
    truth: &[Vec<f64>],
    pred: &[Vec<f64>],
    masked: &[bool],
    real: &[bool],
    alpha: f64,
) -> (f64, f64, f64) {
    let (mut sm, mut nm, mut sv, mut nv) = (0.0, 0usize, 0.0, 0usize);
    for n in 0..truth.len() {
        if !real[n] {
            continue;
        }
        let err: f64 = truth[n].iter().zip(&pred[n]).map(|(a, b)| (a - b).powi(2)).sum();
        if masked[n] {
            sm += err;
            nm += 1;
        } else {
            sv += err;
            nv += 1;
        }
    }
    let lm = if nm > 0 { sm / nm as f64 } else { 0.0 };
    let lv = if nv > 0 { sv / nv as f64 } else { 0.0 };
    (lm, lv, lm + alpha * lv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        assert_eq!(matmul(&[1., 2.], &[3., 4.], 1, 2, 1), vec![11.]);
    }

    #[test]
    fn softmax_masked() {
        assert_eq!(softmax(&[f64::NEG_INFINITY, 0.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn finite_difference_of_square() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}

impl RawMha {
    pub fn from_params<T: crate::Scalar>(p: &crate::attention::MhaParams<T>) -> Self {
        let raw = |v: &crate::Var<T>| v.value().to_f64_vec();
        Self {
            d: p.d_e(),
            heads: p.heads,
            wq: raw(&p.wq),
            bq: raw(&p.bq),
            wk: raw(&p.wk),
            bk: raw(&p.bk),
            wv: raw(&p.wv),
            bv: raw(&p.bv),
            wo: raw(&p.wo),
            bo: raw(&p.bo),
        }
    }
}

/// One encoder block's weights as flat row-major vectors.
#[derive(Debug, Clone)]
pub struct RawBlock {
    pub norm1: (Vec<f64>, Vec<f64>),
    pub attn: RawMha,
    /// Patch-axis weights of a two-axis layer.
    pub attn_patch: Option<RawMha>,
    pub norm2: (Vec<f64>, Vec<f64>),
    pub fc1: (Vec<f64>, Vec<f64>),
    pub fc2: (Vec<f64>, Vec<f64>),
}

/// Encoder weights copied out of a model, for loop-based forward passes.
#[derive(Debug, Clone)]
pub struct RawEncoder {
    pub mechanism: crate::attention::Mechanism,
    pub d: usize,
    pub patch_len: usize,
    pub proj: Vec<f64>,
    pub pos: Vec<f64>,
    pub chan: Vec<f64>,
    pub mask_token: Vec<f64>,
    pub pad_token: Vec<f64>,
    pub blocks: Vec<RawBlock>,
    pub final_norm: (Vec<f64>, Vec<f64>),
    pub recon: (Vec<f64>, Vec<f64>),
}

impl RawEncoder {
    pub fn from_encoder<T: crate::Scalar>(enc: &crate::encoder::Encoder<T>) -> Self {
        use crate::attention::Mechanism;
        let get = |name: &str| -> Vec<f64> {
            let id = enc.store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
            enc.store.get(id).to_f64_vec()
        };
        let pair = |name: &str, a: &str, b: &str| (get(&format!("{name}.{a}")), get(&format!("{name}.{b}")));
        let cfg = enc.config();
        let (d, heads) = (cfg.d_e, cfg.n_heads);
        let mha = |name: &str, out: &str| RawMha {
            d,
            heads,
            wq: get(&format!("{name}.q.weight")),
            bq: get(&format!("{name}.q.bias")),
            wk: get(&format!("{name}.k.weight")),
            bk: get(&format!("{name}.k.bias")),
            wv: get(&format!("{name}.v.weight")),
            bv: get(&format!("{name}.v.bias")),
            wo: get(&format!("{out}.o.weight")),
            bo: get(&format!("{out}.o.bias")),
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let n = format!("layer{l}");
                let (attn, attn_patch) = if cfg.mechanism == Mechanism::TwoAxis {
                    let c = format!("{n}.attn_c");
                    (mha(&c, &c), Some(mha(&format!("{n}.attn_p"), &c)))
                } else {
                    let a = format!("{n}.attn");
                    (mha(&a, &a), None)
                };
                RawBlock {
                    norm1: pair(&format!("{n}.norm1"), "gain", "bias"),
                    attn,
                    attn_patch,
                    norm2: pair(&format!("{n}.norm2"), "gain", "bias"),
                    fc1: pair(&format!("{n}.fc1"), "weight", "bias"),
                    fc2: pair(&format!("{n}.fc2"), "weight", "bias"),
                }
            })
            .collect();
        Self {
            mechanism: cfg.mechanism,
            d,
            patch_len: cfg.patch_len,
            proj: get("embed.proj"),
            pos: get("embed.pos"),
            chan: get("embed.chan"),
            mask_token: get("embed.mask_token"),
            pad_token: get("embed.pad_token"),
            blocks,
            final_norm: pair("final_norm", "gain", "bias"),
            recon: pair("recon", "weight", "bias"),
        }
    }

    /// Tokens for patches `[b, c, np, L]`: projection plus position plus
    /// channel row `c`; masked positions use the mask token instead of the
    /// projection and pad channels use the pad token plus position only.
    pub fn embed(&self, patches: &[f64], b: usize, c: usize, np: usize, pad_mask: &[bool], masked: &[bool]) -> Grid {
        let (d, l) = (self.d, self.patch_len);
        let zero = vec![0.0; d];
        let mut g = Grid::zeros(b, c, np, d);
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..np {
                    let n = (bi * c + ci) * np + i;
                    let pos = &self.pos[i * d..(i + 1) * d];
                    let chan = &self.chan[ci * d..(ci + 1) * d];
                    let row: Vec<f64> = if !pad_mask[bi * c + ci] {
                        (0..d).map(|e| self.pad_token[e] + pos[e]).collect()
                    } else if masked[n] {
                        (0..d).map(|e| self.mask_token[e] + pos[e] + chan[e]).collect()
                    } else {
                        let p = affine_row(&patches[n * l..(n + 1) * l], &self.proj, &zero);
                        (0..d).map(|e| p[e] + pos[e] + chan[e]).collect()
                    };
                    g.token_mut(bi, ci, i).copy_from_slice(&row);
                }
            }
        }
        g
    }

    /// Pre-norm blocks then the final norm.
    pub fn forward(&self, tokens: &Grid, pad_mask: &[bool]) -> Grid {
        use crate::attention::Mechanism;
        let ln = |g: &Grid, (gain, bias): &(Vec<f64>, Vec<f64>)| {
            let data = g.data.chunks(g.d).flat_map(|r| layer_norm_row(r, gain, bias, crate::params::LN_EPS)).collect();
            Grid::new(g.b, g.c, g.np, g.d, data)
        };
        let mut x = tokens.clone();
        for (l, blk) in self.blocks.iter().enumerate() {
            let h = ln(&x, &blk.norm1);
            let a = match self.mechanism {
                Mechanism::Alternating if l % 2 == 0 => inter(&h, pad_mask, &blk.attn),
                Mechanism::Alternating => intra(&h, pad_mask, &blk.attn),
                Mechanism::Standard => standard(&h, pad_mask, &blk.attn),
                Mechanism::TwoAxis => two_axis(&h, pad_mask, &blk.attn, blk.attn_patch.as_ref().unwrap_or(&blk.attn)),
                Mechanism::Bottleneck => bottleneck(&h, pad_mask, &blk.attn),
            };
            for (xi, ai) in x.data.iter_mut().zip(&a.data) {
                *xi += ai;
            }
            let h = ln(&x, &blk.norm2);
            for (row, hr) in x.data.chunks_mut(x.d).zip(h.data.chunks(h.d)) {
                let hidden: Vec<f64> = affine_row(hr, &blk.fc1.0, &blk.fc1.1).into_iter().map(gelu).collect();
                for (xi, m) in row.iter_mut().zip(affine_row(&hidden, &blk.fc2.0, &blk.fc2.1)) {
                    *xi += m;
                }
            }
        }
        ln(&x, &self.final_norm)
    }

    /// Reconstructed patch of every token.
    pub fn reconstruct(&self, hidden: &Grid) -> Vec<Vec<f64>> {
        hidden.data.chunks(hidden.d).map(|r| affine_row(r, &self.recon.0, &self.recon.1)).collect()
    }
}

/// Fourth-order central difference: `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub fn five_point_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |off: f64| {
                probe[i] = x[i] + off;
                f(&probe)
            };
            let d = -at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h);
            probe[i] = x[i];
            d / (12.0 * h)
        })
        .collect()
}
