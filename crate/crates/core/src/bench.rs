//! Attention cost sweeps: closed-form score counts, in-forward counters,
//! wall time and transient allocation.
//!
//! Allocation is measured through [`CountingAlloc`], which a binary must
//! register as its global allocator; without it `peak_bytes` is reported
//! as missing.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use crate::attention::{
    self, attention_cost, bottleneck_attention, inter_channel_attention, intra_channel_attention, meter,
    standard_attention, two_axis_attention, AttentionKind, CostReport, Mechanism, MhaParams,
};
use crate::encoder::{Encoder, EncoderConfig, TokenOptions};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{no_grad, Scalar, Tensor, Var};
use crate::tokenizer::PatchBatch;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// System allocator wrapper that tracks live and peak heap bytes.
pub struct CountingAlloc;

impl CountingAlloc {
    fn grow(size: usize) {
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(now, Ordering::Relaxed);
    }

    fn shrink(size: usize) {
        CURRENT.fetch_sub(size, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        Self::shrink(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            Self::shrink(layout.size());
            Self::grow(new_size);
        }
        p
    }
}

/// Whether [`CountingAlloc`] is the active global allocator.
pub fn allocator_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Live heap bytes; also resets the peak to that value.
pub fn reset_peak() -> usize {
    let now = CURRENT.load(Ordering::Relaxed);
    PEAK.store(now, Ordering::Relaxed);
    now
}

pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Peak heap growth above the live size at entry while `f` runs.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, Option<u64>) {
    let base = reset_peak();
    let r = f();
    let growth = allocator_installed().then(|| peak_bytes().saturating_sub(base) as u64);
    (r, growth)
}

/// Fraction of CPU time spent busy across the machine over `window`, read
/// from `/proc/stat`. `None` where that file is unavailable.
pub fn background_load(window: Duration) -> Option<f64> {
    fn sample() -> Option<(u64, u64)> {
        let text = std::fs::read_to_string("/proc/stat").ok()?;
        let line = text.lines().find(|l| l.starts_with("cpu "))?;
        let v: Vec<u64> = line.split_whitespace().skip(1).filter_map(|x| x.parse().ok()).collect();
        let idle = v.get(3)? + v.get(4).unwrap_or(&0);
        Some((v.iter().take(8).sum(), idle))
    }
    let (t0, i0) = sample()?;
    std::thread::sleep(window);
    let (t1, i1) = sample()?;
    let total = t1.saturating_sub(t0);
    if total == 0 {
        return Some(0.0);
    }
    Some(1.0 - i1.saturating_sub(i0) as f64 / total as f64)
}

pub const LOAD_LIMIT: f64 = 0.25;

/// What one timed forward pass covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Every layer's residual attention update `x + Attn(x)`, no MLP.
    Attention,
    /// The full encoder forward, embeddings to final norm.
    Encoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub mechanisms: Vec<AttentionKind>,
    /// Named encoder presets whose dimensions are used.
    pub configs: Vec<(String, EncoderConfig)>,
    pub n_patches: usize,
    pub channels: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub scope: Scope,
    /// Points whose estimated score memory exceeds this are skipped and
    /// reported as `oom`.
    pub memory_budget: u64,
    pub check_load: bool,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            mechanisms: vec![AttentionKind::Standard, AttentionKind::Alternating],
            configs: vec![("large".into(), EncoderConfig::large())],
            n_patches: 20,
            channels: (1..=64).collect(),
            repetitions: 10,
            warmup: 3,
            scope: Scope::Attention,
            memory_budget: 2 << 30,
            check_load: true,
            seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::config(format!("need at least 3 repetitions, got {}", self.repetitions)));
        }
        if self.mechanisms.is_empty() || self.configs.is_empty() || self.channels.is_empty() {
            return Err(Error::config("sweep needs mechanisms, configs and channel counts"));
        }
        if self.n_patches == 0 || self.channels.contains(&0) {
            return Err(Error::config("channel and patch counts must be positive"));
        }
        if self.scope == Scope::Encoder {
            if let Some(k) = self.mechanisms.iter().find(|k| mechanism_of(**k).is_none()) {
                return Err(Error::config(format!("{k} is not an encoder mechanism")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Skipped: estimated memory above budget.
    Oom,
    /// Skipped: background load above the limit before the sweep.
    Busy,
    /// In-forward counter disagreed with the closed form.
    CountMismatch,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Oom => "oom",
            Status::Busy => "busy",
            Status::CountMismatch => "count_mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub config: String,
    pub report: CostReport,
    /// Largest per-block score count seen by the in-forward meter.
    pub counted: Option<u64>,
    pub status: Status,
}

pub const CSV_HEADER: &str = "mechanism,config,C,Np,de,score_elements,score_flops,median_ns,peak_bytes,status";

impl SweepPoint {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        let opt = |v: Option<u64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.mechanism,
            self.config,
            r.channels,
            r.n_patches,
            r.d_e,
            r.score_elements,
            r.score_flops,
            opt(r.measured_ns),
            opt(r.measured_bytes),
            self.status.name()
        )
    }
}

pub fn to_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&p.csv_row());
        out.push('\n');
    }
    out
}

/// Gnuplot data: one indexed block per (mechanism, config) series with
/// columns `C median_ms`.
pub fn to_dat(points: &[SweepPoint]) -> String {
    let mut out = String::new();
    let mut series: Vec<(String, String)> = Vec::new();
    for p in points {
        let key = (p.report.mechanism.to_string(), p.config.clone());
        if !series.contains(&key) {
            series.push(key);
        }
    }
    for (i, (mech, cfg)) in series.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# {mech} {cfg}");
        for p in points.iter().filter(|p| p.report.mechanism.name() == mech && &p.config == cfg) {
            if let Some(ns) = p.report.measured_ns {
                let _ = writeln!(out, "{} {:.6}", p.report.channels, ns as f64 / 1e6);
            }
        }
    }
    out
}

fn mechanism_of(kind: AttentionKind) -> Option<Mechanism> {
    match kind {
        AttentionKind::Alternating => Some(Mechanism::Alternating),
        AttentionKind::Standard => Some(Mechanism::Standard),
        AttentionKind::TwoAxis => Some(Mechanism::TwoAxis),
        AttentionKind::Bottleneck => Some(Mechanism::Bottleneck),
        AttentionKind::Intra | AttentionKind::Inter => None,
    }
}

/// Attention weights for `n_layers` layers of one mechanism.
pub struct AttentionStack<T: Scalar> {
    pub kind: AttentionKind,
    layers: Vec<(MhaParams<T>, Option<MhaParams<T>>)>,
}

impl<T: Scalar> AttentionStack<T> {
    pub fn random(kind: AttentionKind, n_layers: usize, d_e: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let scale = 1.0 / (d_e as f64).sqrt();
        let layers = (0..n_layers)
            .map(|_| {
                let p = MhaParams::random(d_e, heads, scale, &mut rng, false)?;
                let q = match kind {
                    AttentionKind::TwoAxis => Some(MhaParams {
                        wo: p.wo.clone(),
                        bo: p.bo.clone(),
                        ..MhaParams::random(d_e, heads, scale, &mut rng, false)?
                    }),
                    _ => None,
                };
                Ok((p, q))
            })
            .collect::<Result<_>>()?;
        Ok(Self { kind, layers })
    }

    pub fn forward(&self, x: &Var<T>, pad_mask: &[bool]) -> Result<Var<T>> {
        let mut x = x.clone();
        for (l, (p, q)) in self.layers.iter().enumerate() {
            let a = match self.kind {
                AttentionKind::Intra => intra_channel_attention(&x, p, pad_mask)?,
                AttentionKind::Inter => inter_channel_attention(&x, p, pad_mask)?,
                AttentionKind::Alternating if l % 2 == 0 => inter_channel_attention(&x, p, pad_mask)?,
                AttentionKind::Alternating => intra_channel_attention(&x, p, pad_mask)?,
                AttentionKind::Standard => standard_attention(&x, p, pad_mask)?,
                AttentionKind::TwoAxis => two_axis_attention(&x, p, q.as_ref().unwrap_or(p), pad_mask)?,
                AttentionKind::Bottleneck => bottleneck_attention(&x, p, pad_mask)?,
            };
            x = x.add(&a)?;
        }
        Ok(x)
    }
}

enum Runner<T: Scalar> {
    Stack(AttentionStack<T>),
    Encoder(Box<Encoder<T>>),
}

impl<T: Scalar> Runner<T> {
    fn run(&self, channels: usize, n_patches: usize, d_e: usize, patch_len: usize, rng: &mut Rng) -> Result<()> {
        no_grad(|| match self {
            Runner::Stack(stack) => {
                let x = Var::constant(Tensor::from_fn(&[1, channels, n_patches, d_e], |_| T::lit(rng.normal())));
                stack.forward(&x, &vec![true; channels]).map(drop)
            }
            Runner::Encoder(enc) => {
                let batch = PatchBatch {
                    patches: Tensor::from_fn(&[1, channels, n_patches, patch_len], |_| T::lit(rng.normal())),
                    pad_mask: vec![true; channels],
                    channel_rows: (0..channels).collect(),
                };
                let bound = enc.store.bind_frozen();
                let tokens = enc.tokens(&bound, &batch, TokenOptions::default())?;
                enc.forward(&bound, &tokens, None).map(drop)
            }
        })
    }
}

/// Rough upper bound on the bytes one attention block holds for its scores.
pub fn estimated_score_bytes<T: Scalar>(kind: AttentionKind, channels: usize, n_patches: usize, heads: usize) -> u64 {
    attention::score_elements(kind, channels, n_patches) * heads as u64 * std::mem::size_of::<T>() as u64 * 4
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Runs every (config, mechanism, C) point single-threaded. `progress` is
/// called after each point.
pub fn run_sweep<T: Scalar>(spec: &SweepSpec, mut progress: impl FnMut(&SweepPoint)) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    let busy = spec.check_load
        && (0..3).all(|attempt| {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(500));
            }
            background_load(Duration::from_millis(250)).is_some_and(|l| l > LOAD_LIMIT)
        });
    let mut points = Vec::new();
    let mut rng = Rng::derived(spec.seed, 0xbe7c);
    for (name, config) in &spec.configs {
        for &kind in &spec.mechanisms {
            let runner = if busy {
                None
            } else {
                Some(match spec.scope {
                    Scope::Attention => Runner::Stack(AttentionStack::<T>::random(
                        kind,
                        config.n_layers,
                        config.d_e,
                        config.n_heads,
                        spec.seed,
                    )?),
                    Scope::Encoder => {
                        let m = mechanism_of(kind).ok_or_else(|| Error::config(format!("{kind} is not an encoder mechanism")))?;
                        let cfg = EncoderConfig {
                            c_max: config.c_max.max(spec.channels.iter().copied().max().unwrap_or(1)),
                            np_max: config.np_max.max(spec.n_patches),
                            ..config.clone().with_mechanism(m)
                        };
                        Runner::Encoder(Box::new(Encoder::build(cfg, spec.seed)?))
                    }
                })
            };
            for &c in &spec.channels {
                let mut report = attention_cost(kind, c, spec.n_patches, config.d_e)?;
                let mut point = SweepPoint {
                    config: name.clone(),
                    report: report.clone(),
                    counted: None,
                    status: Status::Ok,
                };
                let Some(runner) = &runner else {
                    point.status = Status::Busy;
                    progress(&point);
                    points.push(point);
                    continue;
                };
                if estimated_score_bytes::<T>(kind, c, spec.n_patches, config.n_heads) > spec.memory_budget {
                    point.status = Status::Oom;
                    progress(&point);
                    points.push(point);
                    continue;
                }
                for _ in 0..spec.warmup {
                    runner.run(c, spec.n_patches, config.d_e, config.patch_len, &mut rng)?;
                }
                let mut times = Vec::with_capacity(spec.repetitions);
                let mut peak = None;
                for _ in 0..spec.repetitions {
                    meter::reset();
                    let start = Instant::now();
                    let (r, bytes) = measure_peak(|| runner.run(c, spec.n_patches, config.d_e, config.patch_len, &mut rng));
                    times.push(start.elapsed().as_nanos() as u64);
                    r?;
                    peak = peak.max(bytes);
                }
                let counted = meter::reading().peak_block;
                report.measured_ns = Some(median(times));
                report.measured_bytes = peak;
                point.report = report;
                point.counted = Some(counted);
                if counted != point.report.score_elements {
                    point.status = Status::CountMismatch;
                }
                progress(&point);
                points.push(point);
            }
        }
    }
    Ok(points)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingVerdict {
    pub mechanism: AttentionKind,
    pub config: String,
    /// Channel counts the slopes were fitted over.
    pub channels: Vec<usize>,
    pub element_slope: f64,
    pub time_slope: Option<f64>,
    /// Slope the closed form predicts over the fitted range, if it is a
    /// pure power law there.
    pub expected: Option<f64>,
    /// Every point's score count equals the closed form.
    pub formula_exact: bool,
    pub element_ok: bool,
    pub time_ok: Option<bool>,
}

pub const ELEMENT_SLOPE_TOL: f64 = 0.1;
pub const TIME_SLOPE_TOL: f64 = 0.5;

/// Fits log-log slopes of score counts (and times, where measured) against
/// `C` per mechanism and config. Alternating is fitted over its
/// inter-dominated range `C >= Np`.
pub fn check_scaling(points: &[SweepPoint]) -> Result<Vec<ScalingVerdict>> {
    let mut groups: Vec<(AttentionKind, String, usize)> = Vec::new();
    for p in points {
        let key = (p.report.mechanism, p.config.clone(), p.report.n_patches);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut verdicts = Vec::new();
    for (kind, config, np) in groups {
        let mut pts: Vec<&SweepPoint> = points
            .iter()
            .filter(|p| p.report.mechanism == kind && p.config == config && p.report.n_patches == np)
            .collect();
        pts.sort_by_key(|p| p.report.channels);
        pts.dedup_by_key(|p| p.report.channels);
        if pts.len() < 4 {
            return Err(Error::contract(format!(
                "{kind}/{config}: scaling needs at least 4 channel counts, got {}",
                pts.len()
            )));
        }
        let formula_exact = pts
            .iter()
            .all(|p| p.report.score_elements == attention::score_elements(kind, p.report.channels, np));
        let expected = match kind {
            AttentionKind::Standard | AttentionKind::Inter | AttentionKind::Alternating => Some(2.0),
            AttentionKind::Intra => Some(1.0),
            AttentionKind::TwoAxis | AttentionKind::Bottleneck => None,
        };
        if kind == AttentionKind::Alternating {
            let inter: Vec<&SweepPoint> = pts.iter().copied().filter(|p| p.report.channels >= np).collect();
            if inter.len() >= 2 {
                pts = inter;
            }
        }
        let xs: Vec<f64> = pts.iter().map(|p| p.report.channels as f64).collect();
        let elems: Vec<f64> = pts.iter().map(|p| p.report.score_elements as f64).collect();
        let element_slope = loglog_slope(&xs, &elems);
        let timed: Vec<(f64, f64)> = pts
            .iter()
            .filter_map(|p| p.report.measured_ns.map(|t| (p.report.channels as f64, t as f64)))
            .collect();
        let time_slope = (timed.len() == pts.len() && timed.len() >= 2).then(|| {
            let (x, y): (Vec<f64>, Vec<f64>) = timed.into_iter().unzip();
            loglog_slope(&x, &y)
        });
        verdicts.push(ScalingVerdict {
            mechanism: kind,
            config,
            channels: pts.iter().map(|p| p.report.channels).collect(),
            element_slope,
            time_slope,
            expected,
            formula_exact,
            element_ok: formula_exact && expected.is_none_or(|e| (element_slope - e).abs() <= ELEMENT_SLOPE_TOL),
            time_ok: time_slope.zip(expected).map(|(t, e)| (t - e).abs() <= TIME_SLOPE_TOL),
        });
    }
    Ok(verdicts)
}

/// Channel counts at which a series' median time drops below the previous
/// point. One such inversion is tolerated as noise.
pub fn timing_inversions(points: &[SweepPoint], kind: AttentionKind, config: &str) -> Vec<usize> {
    let mut pts: Vec<&SweepPoint> = points
        .iter()
        .filter(|p| p.report.mechanism == kind && p.config == config && p.report.measured_ns.is_some())
        .collect();
    pts.sort_by_key(|p| p.report.channels);
    pts.windows(2)
        .filter(|w| w[1].report.measured_ns < w[0].report.measured_ns)
        .map(|w| w[1].report.channels)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn analytic(kind: AttentionKind, cs: &[usize]) -> Vec<SweepPoint> {
        cs.iter()
            .map(|&c| SweepPoint {
                config: "x".into(),
                report: attention_cost(kind, c, 20, 8).unwrap(),
                counted: None,
                status: Status::Ok,
            })
            .collect()
    }

    #[test]
    fn exact_slopes() {
        let cs = [8, 16, 32, 64];
        let s = check_scaling(&analytic(AttentionKind::Standard, &cs)).unwrap();
        assert!((s[0].element_slope - 2.0).abs() < 1e-12);
        let i = check_scaling(&analytic(AttentionKind::Intra, &cs)).unwrap();
        assert!((i[0].element_slope - 1.0).abs() < 1e-12);
        let a = check_scaling(&analytic(AttentionKind::Alternating, &cs)).unwrap();
        assert_eq!(a[0].channels, vec![32, 64]);
        assert!(a[0].element_ok);
        assert!(check_scaling(&analytic(AttentionKind::Standard, &cs[..3])).is_err());
    }

    #[test]
    fn csv_schema() {
        let p = &analytic(AttentionKind::TwoAxis, &[3])[0];
        assert_eq!(p.csv_row(), "two_axis,x,3,20,8,1380,11040,NA,NA,ok");
        assert!(to_csv(&[p.clone()]).starts_with(CSV_HEADER));
    }

    #[test]
    fn small_sweep_counts_match() {
        let spec = SweepSpec {
            mechanisms: AttentionKind::ALL.to_vec(),
            configs: vec![(
                "tiny".into(),
                EncoderConfig {
                    d_e: 8,
                    n_heads: 2,
                    ..EncoderConfig::tiny()
                },
            )],
            n_patches: 3,
            channels: vec![1, 2, 4],
            repetitions: 3,
            warmup: 0,
            check_load: false,
            ..SweepSpec::default()
        };
        let points = run_sweep::<f64>(&spec, |_| {}).unwrap();
        assert_eq!(points.len(), 18);
        assert!(points.iter().all(|p| p.status == Status::Ok), "{points:?}");
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3, 1, 2]), 2);
        assert_eq!(median(vec![4, 1, 2, 3]), 2);
    }
}
