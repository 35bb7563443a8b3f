//! AdamW with per-group learning-rate multipliers, gradient clipping and
//! the warmup-cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Gradients, Scalar, Tensor};

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay to
/// `min` at step `total_steps - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, min: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::config(format!(
                "warmup ({warmup_steps} steps) must be shorter than training ({total_steps} steps)"
            )));
        }
        if !(peak >= min && min >= 0.0) {
            return Err(Error::config(format!("need peak lr {peak} >= min lr {min} >= 0")));
        }
        Ok(Self {
            peak,
            min,
            warmup_steps,
            total_steps,
        })
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - 1 - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (PI * progress).cos())
    }
}

/// Adam moments are kept in `f64` regardless of the parameter precision.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for group `g` is `layer_decay^g`.
    pub layer_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Outcome of one optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            layer_decay: 1.0,
            clip: Some(1.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn group_multiplier(&self, group: usize) -> f64 {
        self.layer_decay.powi(group as i32)
    }

    /// Applies one update to every parameter of `store` that has a gradient
    /// in `grads` (looked up through `bound`). Frozen parameters are left
    /// untouched.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        bound: &Bound<T>,
        grads: &mut Gradients<T>,
        lr: f64,
    ) -> Result<StepInfo> {
        if self.m.is_empty() {
            self.m = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        let taken: Vec<Option<Tensor<T>>> = bound.vars().iter().map(|v| grads.take(v)).collect();
        let norm = taken
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::contract(format!("gradient norm is {norm}")));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (entry, grad)) in store.entries_mut().iter_mut().zip(taken).enumerate() {
            let Some(grad) = grad else { continue };
            let rate = lr * self.layer_decay.powi(entry.group as i32);
            let shrink = if entry.decay { 1.0 - rate * self.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let values = entry.value.data_mut();
            for (((p, &g), m), v) in values.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64() * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p = T::lit(p.as_f64() * shrink - rate * update);
            }
        }
        Ok(StepInfo {
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }

    /// Moments and step count as checkpoint blobs (`opt.m/<name>`,
    /// `opt.v/<name>`, `opt.step`). Each moment is split into an `f32` value
    /// and an `f32` remainder (`opt.m_lo/<name>`, `opt.v_lo/<name>`) so the
    /// `f64` state survives the round trip to within a few ulps.
    pub fn state_blobs<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![("opt.step".to_string(), Tensor::scalar(self.step as f32))];
        if self.m.len() == store.len() {
            for ((e, m), v) in store.entries().iter().zip(&self.m).zip(&self.v) {
                let hi = |x: &[f64]| Tensor::from_fn(e.value.shape(), |i| x[i] as f32);
                let lo = |x: &[f64]| Tensor::from_fn(e.value.shape(), |i| (x[i] - f64::from(x[i] as f32)) as f32);
                for (key, x) in [("m", m), ("v", v)] {
                    out.push((format!("opt.{key}/{}", e.name), hi(x)));
                    out.push((format!("opt.{key}_lo/{}", e.name), lo(x)));
                }
            }
        }
        out
    }

    /// Restores state written by [`AdamW::state_blobs`].
    pub fn load_state<T: Scalar>(&mut self, store: &ParamStore<T>, blobs: &[(String, Tensor<f32>)]) -> Result<()> {
        let find = |name: &str| blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let step = find("opt.step").ok_or_else(|| Error::contract("checkpoint has no optimizer state"))?;
        self.step = step.data()[0] as u64;
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for e in store.entries() {
            for (dst, key) in [(&mut m, "m"), (&mut v, "v")] {
                let t = find(&format!("opt.{key}/{}", e.name));
                match t {
                    Some(t) if t.shape() == e.value.shape() => {
                        let mut x: Vec<f64> = t.data().iter().map(|&x| f64::from(x)).collect();
                        if let Some(lo) = find(&format!("opt.{key}_lo/{}", e.name)).filter(|lo| lo.shape() == t.shape()) {
                            for (x, &r) in x.iter_mut().zip(lo.data()) {
                                *x += f64::from(r);
                            }
                        }
                        dst.push(x)
                    }
                    Some(t) => return Err(Error::shape("optimizer state", t.shape(), e.value.shape())),
                    None => dst.push(vec![0.0; e.value.len()]),
                }
            }
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}
