//! Forward and backward numeric kernels on plain tensors. All loops run in a
//! fixed order, so results are bit-reproducible for a given build.

use super::{strides, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out_shape`, with zero stride on broadcast axes.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Source offsets for every element of `out_shape`, in row-major order.
fn broadcast_offsets(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let lead = short.iter().take_while(|&&d| d == 1).count();
        &short[lead..]
    };
    trimmed.len() <= long.len() && long[long.len() - trimmed.len()..] == *trimmed
}

pub(crate) fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    if a.len() == n && is_suffix(b.shape(), &out_shape) {
        let bd = b.data();
        let data = a
            .data()
            .chunks(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    if b.len() == n && is_suffix(a.shape(), &out_shape) {
        let ad = a.data();
        let data = b
            .data()
            .chunks(ad.len())
            .flat_map(|chunk| ad.iter().zip(chunk).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let (sa, sb) = (aligned_strides(a.shape(), &out_shape), aligned_strides(b.shape(), &out_shape));
    let (ad, bd) = (a.data(), b.data());
    let rank = out_shape.len();
    let last = out_shape[rank - 1];
    if sa[rank - 1] == 1 && sb[rank - 1] == 1 {
        // both operands are contiguous along the last axis: broadcast whole rows
        let oa = broadcast_offsets(&out_shape[..rank - 1], &sa[..rank - 1]);
        let ob = broadcast_offsets(&out_shape[..rank - 1], &sb[..rank - 1]);
        let mut data = Vec::with_capacity(n);
        for (&i, &j) in oa.iter().zip(&ob) {
            data.extend(ad[i..i + last].iter().zip(&bd[j..j + last]).map(|(&x, &y)| f(x, y)));
        }
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let oa = broadcast_offsets(&out_shape, &sa);
    let ob = broadcast_offsets(&out_shape, &sb);
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums `grad` (of a broadcast output shape) back down to `target`.
pub(crate) fn reduce_to<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let n: usize = target.iter().product();
    let mut out = vec![T::zero(); n];
    if is_suffix(target, grad.shape()) {
        for chunk in grad.data().chunks(n) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o = *o + g;
            }
        }
    } else {
        let offs = broadcast_offsets(grad.shape(), &aligned_strides(target, grad.shape()));
        for (&o, &g) in offs.iter().zip(grad.data()) {
            out[o] = out[o] + g;
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = broadcast_shape("matmul", a_batch, b_batch).map_err(|_| Error::shape("matmul", a, b))?;
    let a_offsets = broadcast_offsets(&batch, &aligned_strides(a_batch, &batch))
        .into_iter()
        .map(|o| o * m * k)
        .collect();
    let b_offsets = broadcast_offsets(&batch, &aligned_strides(b_batch, &batch))
        .into_iter()
        .map(|o| o * k * n)
        .collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        a_offsets,
        b_offsets,
    })
}

pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![T::zero(); p.a_offsets.len() * m * n];
    let (ad, bd) = (a.data(), b.data());
    for (i, (&ao, &bo)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        // SAFETY: offsets come from the plan, which bounds every matrix
        // inside its buffer; `out` is freshly allocated and not aliased.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                ad.as_ptr().add(ao),
                k as isize,
                1,
                bd.as_ptr().add(bo),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr().add(i * m * n),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_parts(p.out_shape, out))
}

/// Gradients of `a @ b` given the output gradient.
pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let p = matmul_plan(a.shape(), b.shape()).expect("shapes validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut da = need_a.then(|| vec![T::zero(); a.len()]);
    let mut db = need_b.then(|| vec![T::zero(); b.len()]);
    for (i, (&ao, &bo)) in p.a_offsets.iter().zip(&p.b_offsets).enumerate() {
        let g = i * m * n;
        // SAFETY: as in `matmul`; gradient buffers match their inputs' sizes
        // and transposes are expressed through strides only.
        unsafe {
            if let Some(da) = da.as_mut() {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    gd.as_ptr().add(g),
                    n as isize,
                    1,
                    bd.as_ptr().add(bo),
                    1,
                    n as isize,
                    T::one(),
                    da.as_mut_ptr().add(ao),
                    k as isize,
                    1,
                );
            }
            if let Some(db) = db.as_mut() {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    ad.as_ptr().add(ao),
                    1,
                    k as isize,
                    gd.as_ptr().add(g),
                    n as isize,
                    1,
                    T::one(),
                    db.as_mut_ptr().add(bo),
                    n as isize,
                    1,
                );
            }
        }
    }
    (
        da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("invalid permutation {perm:?}"),
        });
    }
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(x.clone());
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let data = x.data();
    let mut out = Vec::with_capacity(x.len());
    if perm[rank - 1] == rank - 1 {
        // innermost axis stays put: copy contiguous rows
        let row = out_shape[rank - 1];
        for off in broadcast_offsets(&out_shape[..rank - 1], &src_strides[..rank - 1]) {
            out.extend_from_slice(&data[off..off + row]);
        }
    } else {
        for off in broadcast_offsets(&out_shape, &src_strides) {
            out.push(data[off]);
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(x: &[usize], axis: usize) -> Result<()> {
    if axis >= x.len() {
        return Err(Error::InvalidShape {
            shape: x.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

/// Softmax along `axis` with max subtraction. A slice whose entries are all
/// `-inf` yields all-zero weights.
pub(crate) fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis)?;
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let at = |j: usize| base + j * inner;
            let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            let inv = T::one() / total;
            for j in 0..n {
                out[at(j)] = out[at(j)] * inv;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: T = (0..n).map(|j| yd[base + j * inner] * gd[base + j * inner]).sum();
            for j in 0..n {
                let p = base + j * inner;
                out[p] = yd[p] * (gd[p] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

/// Log-softmax over the last axis.
pub(crate) fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn log_softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(n).zip(grad.data().chunks(n)) {
        let total: T = gr.iter().copied().sum();
        out.extend(yr.iter().zip(gr).map(|(&l, &g)| g - l.exp() * total));
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", x.shape(), gain.shape()))?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let dt = T::lit(d as f64);
    let (g, b) = (gain.data(), bias.data());
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstds = Vec::with_capacity(x.len() / d);
    for row in x.data().chunks(d) {
        let mean = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * rstd;
            xhat.push(h);
            out.push(h * g[j] + b[j]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormCache { xhat, rstd: rstds },
    ))
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gain.len();
    let dt = T::lit(d as f64);
    let g = gain.data();
    let mut dx = Vec::with_capacity(grad.len());
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    for ((gr, xh), &rstd) in grad
        .data()
        .chunks(d)
        .zip(cache.xhat.chunks(d))
        .zip(&cache.rstd)
    {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let dxh = gr[j] * g[j];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh[j];
            dgain[j] = dgain[j] + gr[j] * xh[j];
            dbias[j] = dbias[j] + gr[j];
        }
        mean_dxhat = mean_dxhat / dt;
        mean_dxhat_xhat = mean_dxhat_xhat / dt;
        for j in 0..d {
            let dxh = gr[j] * g[j];
            dx.push(rstd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat));
        }
    }
    (
        Tensor::from_parts(grad.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgain),
        Tensor::from_parts(vec![d], dbias),
    )
}

const GELU_COEF: f64 = 0.044715;

fn gelu_inner<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    c * (x + T::lit(GELU_COEF) * x * x * x)
}

/// GELU, tanh approximation.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_inner(x).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let t = gelu_inner(x).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0 * GELU_COEF) * x * x)
}

pub(crate) fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis)?;
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Repeats `grad` (the reduced tensor) `n` times along `axis` of `full`.
pub(crate) fn expand_axis<T: Scalar>(grad: &Tensor<T>, full: &[usize], axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(full, axis);
    let g = grad.data();
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            out.extend_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(full.to_vec(), out)
}

pub(crate) fn gather_rows<T: Scalar>(table: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: table.shape().to_vec(),
            reason: "gather table must be rank 2".into(),
        });
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        if i >= rows {
            return Err(Error::Range {
                what: "embedding row",
                value: i,
                limit: rows,
            });
        }
        out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(&[idx.len(), d], out)
}

pub(crate) fn scatter_rows<T: Scalar>(grad: &Tensor<T>, idx: &[usize], table_shape: &[usize]) -> Tensor<T> {
    let d = table_shape[1];
    let mut out = vec![T::zero(); table_shape[0] * d];
    for (r, &i) in idx.iter().enumerate() {
        for (o, &g) in out[i * d..(i + 1) * d].iter_mut().zip(&grad.data()[r * d..(r + 1) * d]) {
            *o = *o + g;
        }
    }
    Tensor::from_parts(table_shape.to_vec(), out)
}

/// Row-wise select over the last axis: rows where `cond` holds come from `a`.
pub(crate) fn where_rows<T: Scalar>(cond: &[bool], a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("where_rows", a.shape(), b.shape()));
    }
    let d = *a.shape().last().unwrap_or(&1);
    if cond.len() * d != a.len() {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: format!("row condition has {} entries", cond.len()),
        });
    }
    let mut out = Vec::with_capacity(a.len());
    for (r, &c) in cond.iter().enumerate() {
        let src = if c { a.data() } else { b.data() };
        out.extend_from_slice(&src[r * d..(r + 1) * d]);
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub(crate) fn mask_rows<T: Scalar>(cond: &[bool], x: &Tensor<T>, keep: bool) -> Tensor<T> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for (r, &c) in cond.iter().enumerate() {
        if c != keep {
            out[r * d..(r + 1) * d].fill(T::zero());
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
    check_axis(first.shape(), axis)?;
    for p in parts {
        let same_rank = p.rank() == first.rank();
        if !same_rank
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn split_axis<T: Scalar>(grad: &Tensor<T>, sizes: &[usize], axis: usize) -> Vec<Tensor<T>> {
    let (outer, total, inner) = axis_split(grad.shape(), axis);
    let mut bufs: Vec<Vec<T>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
    for o in 0..outer {
        let mut start = o * total * inner;
        for (buf, &s) in bufs.iter_mut().zip(sizes) {
            buf.extend_from_slice(&grad.data()[start..start + s * inner]);
            start += s * inner;
        }
    }
    bufs.into_iter()
        .zip(sizes)
        .map(|(buf, &s)| {
            let mut shape = grad.shape().to_vec();
            shape[axis] = s;
            Tensor::from_parts(shape, buf)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn general_broadcast_and_reduce() {
        let a = t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[2, 1], &[10., 20.]);
        let c = broadcast_binary("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert_eq!(c.data(), &[11., 12., 13., 21., 22., 23., 14., 15., 16., 24., 25., 26.]);
        let ra = reduce_to(&c, &[2, 1, 3]);
        assert_eq!(ra.data(), &[32., 34., 36., 38., 40., 42.]);
        let rb = reduce_to(&Tensor::<f64>::ones(&[2, 2, 3]), &[2, 1]);
        assert_eq!(rb.data(), &[6., 6.]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.]);
        let err = matmul(&t(&[2, 3], &[0.; 6]), &t(&[2, 3], &[0.; 6])).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn batched_matmul_broadcasts_rank2_rhs() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[4, 5], |i| (i % 7) as f64 - 3.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for batch in 0..3 {
            for r in 0..2 {
                for col in 0..5 {
                    let want: f64 = (0..4)
                        .map(|k| a.data()[batch * 8 + r * 4 + k] * b.data()[k * 5 + col])
                        .sum();
                    assert_eq!(c.data()[batch * 10 + r * 5 + col], want);
                }
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[f64::NEG_INFINITY, 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0., 1.]);
        let s = softmax(&t(&[2], &[f64::NEG_INFINITY; 2]), 0).unwrap();
        assert_eq!(s.data(), &[0., 0.]);
        let s = softmax(&t(&[2], &[1000., 1001.]), 0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.data()[0] - 1. / (1. + e)).abs() < 1e-15);
        assert!((s.data()[1] - e / (1. + e)).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = t(&[2, 3], &[0., 1., 2., 3., 4., 5.]);
        let s = softmax(&x, 0).unwrap();
        for col in 0..3 {
            assert!((s.data()[col] + s.data()[3 + col] - 1.0).abs() < 1e-15);
            assert!(s.data()[col] < s.data()[3 + col]);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], x.data()[4]);
        let back = permute(&p, &inverse_perm(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 2, 2], |i| 10.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.data(), &[0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]);
        let parts = split_axis(&c, &[1, 2], 1);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn layer_norm_constant_row_gives_bias() {
        let x = t(&[1, 3], &[2., 2., 2.]);
        let g = t(&[3], &[1., 2., 3.]);
        let b = t(&[3], &[0.5, -1., 4.]);
        let (y, _) = layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), b.data());
    }
}
