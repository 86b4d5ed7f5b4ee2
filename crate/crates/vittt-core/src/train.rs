//! Outer-loop toy training: a bundled synthetic dataset, SGD-with-momentum
//! and decoupled-weight-decay Adam, and a deterministic training loop over
//! per-sample tapes.

use crate::autodiff::Tape;
use crate::backbone::{model_logits, ModelConfig, ModelParams};
use crate::backend::Backend;
use crate::block::ParamKind;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub images: Vec<Tensor>, // [H x W x C]
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Returns a copy with labels shuffled (derangement not enforced); the
    /// control condition for the training smoke test.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels = self.labels.clone();
        labels.shuffle(&mut rng);
        ToyDataset {
            images: self.images.clone(),
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// Colored Gaussian blobs at class-dependent positions: class `k` puts a
/// blob near the center of quadrant `k` with a class-specific channel mix,
/// plus pixel noise.
pub fn synthetic_blobs(h: usize, w: usize, c: usize, n: usize, seed: u64) -> ToyDataset {
    let num_classes = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let centers = [
        (0.25, 0.25),
        (0.25, 0.75),
        (0.75, 0.25),
        (0.75, 0.75),
    ];
    let colors: [[f64; 3]; 4] = [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.2, 1.0],
        [0.9, 0.9, 0.1],
    ];
    for i in 0..n {
        let k = i % num_classes;
        let (cy, cx) = centers[k];
        let cy = cy * h as f64 + rng.gen_range(-1.0..1.0);
        let cx = cx * w as f64 + rng.gen_range(-1.0..1.0);
        let sigma = 0.12 * h as f64 + rng.gen_range(0.0..0.04 * h as f64);
        let mut img = Tensor::zeros(&[h, w, c]);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..c {
                    let color = colors[k][ch % 3];
                    let noise: f64 = rng.gen_range(-0.05..0.05);
                    img.data_mut()[(y * w + x) * c + ch] = a * color + noise;
                }
            }
        }
        images.push(img);
        labels.push(k as u32);
    }
    ToyDataset {
        images,
        labels,
        num_classes,
    }
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate train accuracy every this many steps (and at the end).
    pub eval_every: usize,
    /// Stop once train accuracy reaches this value (1.1 disables).
    pub stop_at_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 16,
            optimizer: OptimizerKind::AdamW,
            lr: 3e-3,
            momentum: 0.9,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 25,
            stop_at_accuracy: 1.1,
        }
    }
}

struct OptState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: usize,
}

fn apply_update(
    kind: OptimizerKind,
    cfg: &TrainConfig,
    state: &mut OptState,
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
) {
    debug_assert_eq!(param.len(), grad.len());
    match kind {
        OptimizerKind::Sgd => {
            let m = state
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; param.len()]);
            for i in 0..param.len() {
                m[i] = cfg.momentum * m[i] + grad.data()[i];
                param.data_mut()[i] -= cfg.lr * m[i];
            }
        }
        OptimizerKind::AdamW => {
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            let t = state.t as f64;
            let m = state
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; param.len()]);
            let v = state
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; param.len()]);
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            for i in 0..param.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let p = &mut param.data_mut()[i];
                *p -= cfg.lr * (mhat / (vhat.sqrt() + eps) + cfg.weight_decay * *p);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub train_accuracy: Option<f64>,
    /// Mean inner reconstruction loss per layer (forth direction, sample 0),
    /// collected at evaluation points.
    pub recon_per_layer: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub final_accuracy: f64,
    /// First step at which train accuracy reached `stop_at_accuracy`.
    pub first_step_at_target: Option<usize>,
    pub steps_run: usize,
}

pub fn train_accuracy(params: &ModelParams, cfg: &ModelConfig, data: &ToyDataset) -> Result<f64> {
    let mut correct = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let logits = model_logits(params, cfg, img)?;
        let pred = argmax(logits.data());
        if pred == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean forth-direction reconstruction loss per layer on one probe image.
fn layer_recon_means(params: &ModelParams, cfg: &ModelConfig, image: &Tensor) -> Result<Vec<f64>> {
    let (_, _, diag) = crate::backbone::model_forward_with_diag(params, cfg, image, false)?;
    Ok(diag
        .blocks
        .iter()
        .map(|b| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for hd in &b.forth.heads {
                for &l in &hd.recon_loss {
                    sum += l;
                    n += 1;
                }
            }
            if n == 0 { 0.0 } else { sum / n as f64 }
        })
        .collect())
}

/// Cross-entropy training of a model on a toy dataset. Deterministic given
/// the seed; aborts with a diagnostic on non-finite loss.
pub fn train_toy(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    data: &ToyDataset,
    tc: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if data.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset classes {} vs model classes {}",
            data.num_classes, cfg.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len(); // trigger reshuffle on first use
    let mut state = OptState {
        m: HashMap::new(),
        v: HashMap::new(),
        t: 0,
    };
    let mut entries = Vec::new();
    let mut first_hit = None;
    let mut steps_run = 0;

    for step in 1..=tc.steps {
        // next mini-batch of sample indices
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        // one tape per step: bind parameters once, fan out per sample
        let mut tape = Tape::new();
        let (vars, registry) = params.bind(&mut tape)?;

        let mut loss_acc = None;
        for &idx in &batch {
            let image = tape.constant(data.images[idx].clone());
            let y = crate::backbone::encoder_forward(&mut tape, &image, &vars, cfg, None)?;
            let logits = crate::backbone::classify(&mut tape, &y, &vars, cfg)?;
            let ce = Backend::cross_entropy(&mut tape, &logits, data.labels[idx] as usize)?;
            loss_acc = Some(match loss_acc {
                None => ce,
                Some(acc) => Backend::add(&mut tape, &acc, &ce)?,
            });
        }
        let loss = Backend::scale(&mut tape, &loss_acc.unwrap(), 1.0 / batch.len() as f64)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("train_toy loss"));
        }
        tape.backward(loss)?;

        state.t += 1;
        let mut grads: HashMap<String, Tensor> = HashMap::new();
        for (name, var) in &registry {
            grads.insert(name.clone(), tape.grad(*var)?);
        }
        params.visit_mut(&mut |name, tensor, kind| {
            if kind == ParamKind::Learnable {
                if let Some(grad) = grads.get(&name) {
                    apply_update(tc.optimizer, tc, &mut state, &name, tensor, grad);
                }
            }
        });

        steps_run = step;
        let eval_now = step % tc.eval_every == 0 || step == tc.steps;
        let (acc, recon) = if eval_now {
            (
                Some(train_accuracy(params, cfg, data)?),
                Some(layer_recon_means(params, cfg, &data.images[0])?),
            )
        } else {
            (None, None)
        };
        entries.push(TrainLogEntry {
            step,
            loss: loss_value,
            train_accuracy: acc,
            recon_per_layer: recon,
        });
        if let Some(a) = acc {
            if first_hit.is_none() && a >= tc.stop_at_accuracy {
                first_hit = Some(step);
                break;
            }
        }
    }

    let final_accuracy = train_accuracy(params, cfg, data)?;
    Ok(TrainLog {
        entries,
        final_accuracy,
        first_step_at_target: first_hit,
        steps_run,
    })
}
