//! AdamW, learning-rate schedules and a toy training loop on synthetic
//! blob-quadrant images.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, default_config, ModelConfig, RapidNetModel};
use crate::ops::{softmax_cross_entropy, NormMode};
use crate::params::{NamedTensors, ParamKind, Parameterized};
use crate::tensor::{Rng, Scalar, Tensor};

pub const TOY_CLASSES: usize = 4;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: NamedTensors<T>,
    v: NamedTensors<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: NamedTensors::new(),
            v: NamedTensors::new(),
        }
    }
}

/// One AdamW update of every learnable tensor in `params`.
pub fn adamw_step<T: Scalar, P: Parameterized<T> + ?Sized>(
    params: &mut P,
    grads: &NamedTensors<T>,
    state: &mut AdamW<T>,
) -> Result<()> {
    let mut missing = None;
    params.visit_params("", &mut |name, _, kind| {
        if kind == ParamKind::Learnable && missing.is_none() && grads.get(name).is_none() {
            missing = Some(name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::InvalidState(format!("no gradient for parameter {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = state.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps, wd) = (state.lr, state.eps, state.weight_decay);
    let AdamW { m, v, .. } = state;
    let mut err = None;
    params.visit_params_mut("", &mut |name, p, kind| {
        if kind != ParamKind::Learnable || err.is_some() {
            return;
        }
        let g = grads.get(name).expect("checked above");
        if g.shape() != p.shape() {
            err = Some(Error::shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
            return;
        }
        if m.get(name).is_none() {
            m.insert(name, Tensor::zeros_like(p));
            v.insert(name, Tensor::zeros_like(p));
        }
        let mt = m.get_mut(name).expect("inserted").data_mut();
        let vt = v.get_mut(name).expect("inserted").data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(mt).zip(vt) {
            let gf = gi.to_f64().unwrap_or(f64::NAN);
            let mf = b1 * mi.to_f64().unwrap_or(0.0) + (1.0 - b1) * gf;
            let vf = b2 * vi.to_f64().unwrap_or(0.0) + (1.0 - b2) * gf * gf;
            *mi = T::lit(mf);
            *vi = T::lit(vf);
            let mut pf = pi.to_f64().unwrap_or(f64::NAN);
            pf -= lr * wd * pf;
            pf -= lr * (mf / c1) / ((vf / c2).sqrt() + eps);
            *pi = T::lit(pf);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate at step 0 to zero at `total`.
    Cosine,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

impl Schedule {
    pub fn lr_at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine if total == 0 => base,
            Schedule::Cosine => {
                let frac = (step.min(total) as f64) / total as f64;
                0.5 * base * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// Images `[N, 3, H, W]` with one bright Gaussian blob each; the label is
/// the quadrant holding the blob centre (0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right).
#[derive(Debug, Clone)]
pub struct SyntheticDataset<T> {
    pub seed: u64,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn new(samples: usize, size: usize, seed: u64) -> Result<Self> {
        if size < 8 || !size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "image size must be even and >= 8, got {size}"
            )));
        }
        let mut rng = Rng::new(seed);
        let half = size as f64 / 2.0;
        let sigma = size as f64 / 10.0;
        let plane = size * size;
        let mut data = Vec::with_capacity(samples * 3 * plane);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let q = i % TOY_CLASSES;
            let cy = (q / 2) as f64 * half + half * (0.25 + 0.5 * rng.uniform());
            let cx = (q % 2) as f64 * half + half * (0.25 + 0.5 * rng.uniform());
            let tint: Vec<f64> = (0..3).map(|_| 0.5 + 0.5 * rng.uniform()).collect();
            for &a in &tint {
                for y in 0..size {
                    for x in 0..size {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        let blob = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                        data.push(T::lit(2.0 * a * blob + 0.1 * rng.standard_normal()));
                    }
                }
            }
            labels.push(q);
        }
        Ok(SyntheticDataset {
            seed,
            images: Tensor::from_vec(&[samples, 3, size, size], data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the samples at `idx` into one batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let (_, c, h, w) = self.images.dims4()?;
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(&[idx.len(), c, h, w], data)?, labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Seeds minibatch sampling.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            lr: 2e-3,
            schedule: Schedule::Cosine,
            batch_size: 32,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub trace: Vec<StepRecord>,
    pub model: RapidNetModel<T>,
}

impl<T> TrainOutcome<T> {
    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.trace[self.trace.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Micro variant sized for the four-class toy task.
pub fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_classes: TOY_CLASSES,
        seed,
        ..default_config("micro").expect("micro is registered")
    }
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    idx
}

/// Trains a freshly built `cfg` model on `data` with AdamW, returning the
/// per-step loss trace and the trained model (left in eval mode).
pub fn train_toy<T: Scalar>(
    cfg: &ModelConfig,
    data: &SyntheticDataset<T>,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() || opts.batch_size == 0 {
        return Err(Error::InvalidArgument("empty dataset or batch".into()));
    }
    let mut model = build_model::<T>(cfg)?;
    model.set_mode(NormMode::Train);
    let mut opt = AdamW::new(opts.lr, opts.weight_decay);
    let mut rng = Rng::new(opts.seed);
    let bs = opts.batch_size.min(data.len());
    let mut order = Vec::new();
    let mut trace = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        if order.len() < bs {
            order = if bs == data.len() {
                (0..data.len()).collect()
            } else {
                shuffled(data.len(), &mut rng)
            };
        }
        let idx: Vec<usize> = order.drain(..bs).collect();
        let (x, labels) = data.batch(&idx)?;
        let (logits, cache) = model.forward_train(&x)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::TrainingFailure { step, loss });
        }
        let grads = model.backward(&cache, &grad)?;
        opt.lr = opts.schedule.lr_at(opts.lr, step, opts.steps);
        trace.push(StepRecord { step, lr: opt.lr, loss });
        adamw_step(&mut model, &grads.params, &mut opt)?;
    }
    model.set_mode(NormMode::Eval);
    Ok(TrainOutcome { trace, model })
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy<T: Scalar>(model: &RapidNetModel<T>, data: &SyntheticDataset<T>) -> Result<f64> {
    let logits = model.forward(&data.images)?;
    let (n, classes) = logits.dims2()?;
    let correct = logits
        .data()
        .chunks(classes)
        .zip(&data.labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == label
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Writes the `step,lr,loss` CSV trace.
pub fn write_csv(trace: &[StepRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,lr,loss")?;
    for r in trace {
        writeln!(out, "{},{:.8e},{:.8}", r.step, r.lr, r.loss)?;
    }
    Ok(())
}
