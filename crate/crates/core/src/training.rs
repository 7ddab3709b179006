//! Multitask weighted MAPE loss, the Adam optimizer, example
//! preparation, and the training loop with early stopping.

use crate::error::{Error, Result};
use crate::features::{
    encode_attributes, flow_bucket, ClockContext, DriverRegistry, FlowTable,
};
use crate::grid::{GridSequence, GridSpec};
use crate::model::store::ParamStore;
use crate::model::{ConvBatch, ImageBank, ModelState, SeqInput, StepInput};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Sub-path weights w_l = 2l / (L^2 + L - 2) for l = 2..=L; they sum
/// to one and grow with l so longer sub-trips dominate.
pub fn multitask_weights(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(Error::SequenceTooShort(len));
    }
    let denom = (len * len + len - 2) as f64;
    Ok((2..=len).map(|l| 2.0 * l as f64 / denom).collect())
}

/// Weighted mean absolute percentage error over the supervised
/// sub-paths. `estimates`, `labels` and `mask` all cover l = 2..=L;
/// masked-out steps (padded grids) are excluded and the weights are
/// renormalized over the surviving ones.
pub fn multitask_loss(estimates: &[f64], labels: &[f64], mask: &[bool]) -> Result<f64> {
    Ok(multitask_loss_grad(estimates, labels, mask)?.0)
}

/// Loss plus its gradient with respect to each estimate.
pub fn multitask_loss_grad(
    estimates: &[f64],
    labels: &[f64],
    mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let len = estimates.len() + 1;
    if labels.len() != estimates.len() || mask.len() != estimates.len() {
        return Err(Error::Shape {
            expected: format!("{} labels/mask entries", estimates.len()),
            actual: format!("{}/{}", labels.len(), mask.len()),
        });
    }
    let weights = multitask_weights(len)?;
    let active: f64 = weights.iter().zip(mask).filter(|(_, &m)| m).map(|(w, _)| w).sum();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Empty("no supervised steps in sequence".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; estimates.len()];
    for i in 0..estimates.len() {
        if !mask[i] {
            continue;
        }
        if labels[i] <= 0.0 {
            return Err(Error::NonPositiveLabel(labels[i]));
        }
        let w = weights[i] / active;
        let diff = estimates[i] - labels[i];
        loss += w * diff.abs() / labels[i];
        grad[i] = w * diff.signum() / labels[i] / count as f64;
    }
    Ok((loss / count as f64, grad))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 1,
            patience: 5,
        }
    }
}

/// Adaptive-moment gradient descent with global-norm clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, clip_norm: f64) -> Self {
        let m = store.iter().map(|(_, t)| ArrayD::zeros(t.value.raw_dim())).collect();
        let v = store.iter().map(|(_, t)| ArrayD::zeros(t.value.raw_dim())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm, t: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        // global norm clip across every parameter group
        let norm: f64 = store
            .iter()
            .map(|(_, t)| t.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, tensor)) in store.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((p, g), (mi, vi)) in tensor
                .value
                .iter_mut()
                .zip(tensor.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Example preparation
// ---------------------------------------------------------------------------

/// A model-ready supervised sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: SeqInput,
    /// Cumulative-time labels for l = 2..=L.
    pub labels: Vec<f64>,
    /// Supervision mask for l = 2..=L; padded grids are masked out.
    pub mask: Vec<bool>,
    pub travel_time_s: f64,
    pub departure: i64,
    pub vehicle_id: String,
}

/// Whether driver ids may be allocated (training) or only looked up
/// (inference).
pub enum RegistryMode<'a> {
    Assign(&'a mut DriverRegistry),
    Frozen(&'a DriverRegistry),
}

/// Resolve a grid sequence into model indices: flow buckets from the
/// training flow table, attribute indices from the registries.
pub fn prepare_example(
    seq: &GridSequence,
    spec: &GridSpec,
    flow: &FlowTable,
    registry: &mut RegistryMode,
    clock: &ClockContext,
) -> Result<TrainExample> {
    if seq.len() < 2 {
        return Err(Error::SequenceTooShort(seq.len()));
    }
    let driver_idx = match registry {
        RegistryMode::Assign(r) => r.assign(&seq.vehicle_id),
        RegistryMode::Frozen(r) => r.lookup(&seq.vehicle_id),
    };
    let attrs = encode_attributes(seq.departure, driver_idx, seq.weather_code, clock);

    let mut steps = Vec::with_capacity(seq.len());
    for s in &seq.steps {
        if !spec.contains(s.cell) {
            return Err(Error::UnknownCell(s.cell));
        }
        let hour = clock.hour_of_day(seq.departure + s.enter_time_s.floor() as i64);
        steps.push(StepInput {
            cell_index: spec.cell_index(s.cell),
            direction: s.direction as usize,
            flow_bucket: flow_bucket(flow.get(s.cell, hour)),
        });
    }
    let labels: Vec<f64> = seq.steps[1..].iter().map(|s| s.cumulative_time_s).collect();
    let mask: Vec<bool> = seq.steps[1..]
        .iter()
        .map(|s| !s.padded && s.cumulative_time_s > 0.0)
        .collect();
    Ok(TrainExample {
        input: SeqInput { steps, attrs },
        labels,
        mask,
        travel_time_s: seq.travel_time_s(),
        departure: seq.departure,
        vehicle_id: seq.vehicle_id.clone(),
    })
}

/// Prepare a whole split, dropping sequences without any supervised
/// step.
pub fn prepare_examples(
    sequences: &[GridSequence],
    spec: &GridSpec,
    flow: &FlowTable,
    mut registry: RegistryMode,
    clock: &ClockContext,
) -> Result<Vec<TrainExample>> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let ex = prepare_example(seq, spec, flow, &mut registry, clock)?;
        if ex.mask.iter().any(|&m| m) {
            out.push(ex);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Whole-trip MAPE (percent) over the training pass.
    pub train_mape: f64,
    /// Whole-trip MAPE (percent) over the held-out split.
    pub eval_mape: f64,
    pub wall_s: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    pub epoch: usize,
    pub best_eval: f64,
    pub epochs_since_best: usize,
    pub history: Vec<EpochStats>,
    /// Parameters at the best evaluation epoch so far.
    pub best_store: Option<ParamStore>,
}

impl Trainer {
    pub fn new(model: &ModelState, config: TrainConfig) -> Self {
        Self {
            adam: Adam::new(&model.store, config.learning_rate, config.clip_norm),
            config,
            epoch: 0,
            best_eval: f64::INFINITY,
            epochs_since_best: 0,
            history: Vec::new(),
            best_store: None,
        }
    }

    /// One optimizer step over a batch; the batch loss is the mean of
    /// the per-sequence losses. Returns (batch loss, per-sequence
    /// whole-trip APE values).
    pub fn train_batch(
        &mut self,
        model: &mut ModelState,
        batch: &[&TrainExample],
        images: &ImageBank,
    ) -> Result<(f64, Vec<f64>)> {
        model.store.zero_grads();
        let mut conv_batch = ConvBatch::new(true);
        let inv = 1.0 / batch.len() as f64;
        let mut total_loss = 0.0;
        let mut apes = Vec::with_capacity(batch.len());
        for ex in batch {
            let fw = model.forward_seq(&ex.input, &mut conv_batch, images, true)?;
            let (loss, mut grad) = multitask_loss_grad(&fw.estimates, &ex.labels, &ex.mask)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { context: "batch loss".into() });
            }
            total_loss += loss * inv;
            for g in &mut grad {
                *g *= inv;
            }
            model.backward_seq(&fw, &grad, &mut conv_batch);
            let last = *fw.estimates.last().unwrap();
            apes.push((last - ex.travel_time_s).abs() / ex.travel_time_s);
        }
        conv_batch.backward_all(model);
        self.adam.step(&mut model.store);
        Ok((total_loss, apes))
    }

    /// Whole-trip MAPE (percent) of the current parameters on a split.
    pub fn evaluate(&self, model: &ModelState, examples: &[TrainExample], images: &ImageBank) -> Result<f64> {
        if examples.is_empty() {
            return Ok(f64::NAN);
        }
        let mut conv_batch = ConvBatch::new(false);
        let mut sum = 0.0;
        for ex in examples {
            let est = model.predict_seq(&ex.input, &mut conv_batch, images)?;
            let last = *est.last().unwrap();
            sum += (last - ex.travel_time_s).abs() / ex.travel_time_s;
        }
        Ok(100.0 * sum / examples.len() as f64)
    }

    /// Run remaining epochs with per-epoch shuffling, evaluation,
    /// best-checkpoint retention and early stopping.
    pub fn run(
        &mut self,
        model: &mut ModelState,
        train: &[TrainExample],
        eval: &[TrainExample],
        images: &ImageBank,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Empty("training split is empty".into()));
        }
        while self.epoch < self.config.epochs {
            let started = std::time::Instant::now();
            let epoch = self.epoch;

            // deterministic per-epoch shuffle stream, so resuming from
            // a checkpoint replays the identical batch order
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64 + 1);
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            let mut ape_sum = 0.0;
            let mut ape_n = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &train[i]).collect();
                let (loss, apes) = self.train_batch(model, &batch, images)?;
                loss_sum += loss;
                batches += 1;
                ape_sum += apes.iter().sum::<f64>();
                ape_n += apes.len();
            }
            if !model.store.all_finite() {
                return Err(Error::NonFinite { context: format!("parameters after epoch {epoch}") });
            }

            let eval_mape = self.evaluate(model, eval, images)?;
            let stats = EpochStats {
                epoch,
                train_loss: loss_sum / batches as f64,
                train_mape: 100.0 * ape_sum / ape_n as f64,
                eval_mape,
                wall_s: started.elapsed().as_secs_f64(),
            };
            self.history.push(stats);
            on_epoch(&stats);
            self.epoch += 1;

            if eval_mape.is_nan() {
                continue; // no eval split: never early-stop
            }
            if eval_mape < self.best_eval {
                self.best_eval = eval_mape;
                self.epochs_since_best = 0;
                self.best_store = Some(model.store.clone());
            } else {
                self.epochs_since_best += 1;
                if self.epochs_since_best >= self.config.patience {
                    log::info!("early stop at epoch {epoch} (best eval {:.3}%)", self.best_eval);
                    break;
                }
            }
        }
        Ok(())
    }
}
