use alternet::attention::{
    bottleneck_attention, inter_channel_attention, intra_channel_attention, standard_attention, two_axis_attention,
    MhaParams,
};
use alternet::oracle::{central_difference, relative_error};
use alternet::rng::Rng;
use alternet::{Result, Tensor, Var};

/// Checks d(sum(f(x) * w))/dx against central differences for a fixed
/// random weighting `w`.
fn check(shape: &[usize], seed: u64, f: impl Fn(&Var<f64>) -> Result<Var<f64>>) {
    let mut rng = Rng::new(seed);
    let x0 = Tensor::from_fn(shape, |_| rng.normal());
    let out_shape = f(&Var::constant(x0.clone())).unwrap().shape().to_vec();
    let w = Var::constant(Tensor::from_fn(&out_shape, |_| rng.normal()));
    let x = Var::param(x0.clone());
    let loss = f(&x).unwrap().mul(&w).unwrap().sum();
    let analytic = loss.backward().unwrap().get(&x).unwrap().to_f64_vec();
    let numeric = central_difference(
        |probe| {
            let v = Var::constant(Tensor::new(shape, probe.to_vec()).unwrap());
            f(&v).unwrap().mul(&w).unwrap().sum().value().item()
        },
        &x0.to_f64_vec(),
        1e-6,
    );
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(*a, *n, 1e-6);
        // exact zeros (key biases) only see difference-quotient noise
        assert!(err < 1e-5 || (a - n).abs() < 1e-8, "element {k}: analytic {a} numeric {n}");
    }
}

fn constant(shape: &[usize], seed: u64) -> Var<f64> {
    let mut rng = Rng::new(seed);
    Var::constant(Tensor::from_fn(shape, |_| rng.normal()))
}

#[test]
fn elementwise_ops() {
    let other = constant(&[3, 4], 9);
    check(&[3, 4], 1, |x| x.add(&other));
    check(&[3, 4], 2, |x| x.sub(&other));
    check(&[3, 4], 3, |x| x.mul(&other));
    check(&[3, 4], 4, |x| Ok(x.scale(-2.5)));
    check(&[3, 4], 5, |x| Ok(x.square()));
    check(&[3, 4], 6, |x| Ok(x.gelu()));
    check(&[3, 4], 7, |x| x.mul(x));
}

#[test]
fn broadcasting_ops() {
    let row = constant(&[4], 1);
    check(&[2, 3, 4], 1, |x| x.add(&row));
    let big = constant(&[2, 3, 4], 2);
    check(&[4], 3, |b| big.add(b));
    check(&[3, 1], 4, |b| big.mul(b));
}

#[test]
fn matmul_both_sides() {
    let w = constant(&[4, 5], 1);
    check(&[3, 4], 2, |x| x.matmul(&w));
    let a = constant(&[2, 3, 4], 3);
    check(&[4, 5], 4, |w| a.matmul(w));
    let b = constant(&[2, 4, 2], 5);
    check(&[2, 3, 4], 6, |x| x.matmul(&b));
}

#[test]
fn reductions() {
    check(&[3, 4], 1, |x| Ok(x.sum()));
    check(&[3, 4], 2, |x| Ok(x.mean()));
    check(&[2, 3, 4], 3, |x| x.sum_axis(0));
    check(&[2, 3, 4], 4, |x| x.sum_axis(1));
    check(&[2, 3, 4], 5, |x| x.sum_axis(2));
}

#[test]
fn normalizations() {
    check(&[3, 5], 1, |x| x.softmax(1));
    check(&[3, 5], 2, |x| x.softmax(0));
    check(&[3, 5], 3, |x| Ok(x.log_softmax()));
    let gain = constant(&[5], 4);
    let bias = constant(&[5], 5);
    check(&[3, 5], 6, |x| x.layer_norm(&gain, &bias, 1e-5));
    let input = constant(&[3, 5], 7);
    check(&[5], 8, |g| input.layer_norm(g, &bias, 1e-5));
    check(&[5], 9, |b| input.layer_norm(&gain, b, 1e-5));
}

#[test]
fn layout_ops() {
    check(&[2, 3, 4], 1, |x| x.reshape(&[6, 4]));
    check(&[2, 3, 4], 2, |x| x.permute(&[2, 0, 1]));
    check(&[5, 3], 3, |x| x.gather_rows(&[4, 0, 4, 2]));
    check(&[2, 3], 4, |x| Var::concat(&[x.clone(), x.scale(2.0)], 0));
    check(&[2, 3], 5, |x| Var::concat(&[x.clone(), x.square()], 1));
}

#[test]
fn row_selection_ops() {
    let other = constant(&[4, 3], 1);
    let cond = [true, false, false, true];
    check(&[4, 3], 2, |x| x.where_rows(&cond, &other));
    let first = constant(&[4, 3], 3);
    check(&[4, 3], 4, |x| first.where_rows(&cond, x));
    check(&[4, 3], 5, |x| x.mask_rows(&cond));
}

fn params(d: usize, heads: usize, seed: u64) -> MhaParams<f64> {
    MhaParams::random(d, heads, 0.5, &mut Rng::new(seed), false).unwrap()
}

#[test]
fn attention_inputs() {
    let p = params(4, 2, 1);
    let q = params(4, 2, 2);
    let pad = [true, true, true, true, true, false];
    check(&[2, 3, 2, 4], 3, |x| intra_channel_attention(x, &p, &pad));
    check(&[2, 3, 2, 4], 4, |x| inter_channel_attention(x, &p, &pad));
    check(&[2, 3, 2, 4], 5, |x| standard_attention(x, &p, &pad));
    check(&[2, 3, 2, 4], 6, |x| two_axis_attention(x, &p, &q, &pad));
    check(&[2, 3, 2, 4], 7, |x| bottleneck_attention(x, &p, &pad));
}

/// Runs a chained inter -> intra -> bottleneck stack with one weight
/// replaced by `w`.
fn stack_with(set: fn(&mut MhaParams<f64>, Var<f64>), w: &Var<f64>) -> Result<Var<f64>> {
    let x = constant(&[1, 3, 4, 4], 1);
    let pad = [true, true, false];
    let mut p = params(4, 2, 2);
    set(&mut p, w.clone());
    let a = inter_channel_attention(&x, &p, &pad)?;
    let b = intra_channel_attention(&a, &p, &pad)?;
    bottleneck_attention(&b, &p, &pad)
}

#[test]
fn attention_weights() {
    let setters: [(&[usize], fn(&mut MhaParams<f64>, Var<f64>)); 8] = [
        (&[4, 4], |p, w| p.wq = w),
        (&[4, 4], |p, w| p.wk = w),
        (&[4, 4], |p, w| p.wv = w),
        (&[4, 4], |p, w| p.wo = w),
        (&[4], |p, w| p.bq = w),
        (&[4], |p, w| p.bk = w),
        (&[4], |p, w| p.bv = w),
        (&[4], |p, w| p.bo = w),
    ];
    for (k, (shape, set)) in setters.into_iter().enumerate() {
        check(shape, 3 + k as u64, |w| stack_with(set, w));
    }
}
