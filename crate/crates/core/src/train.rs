//! Training: focal loss, AdamW with decoupled weight decay, the one-cycle
//! learning-rate schedule, data-parallel steps and checkpoints.
//!
//! A step computes each sample's gradient on its own graph (in parallel when
//! a thread pool is available) and reduces them in sample order, so results
//! are bit-identical for any thread count.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{check_params, forward, CameraView, ModelConfig, ParamStore};
use crate::scene::{Dataset, Sample};
use crate::tensor::bt1::{self, Bt1};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 20,
            max_lr: 1e-3,
            weight_decay: 1e-4,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.max_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("max_lr must be positive and weight_decay non-negative");
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) || self.div_factor <= 0.0 || self.final_div_factor <= 0.0 {
            return bad("pct_start must lie in (0, 1) and the divisors must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.focal_gamma < 0.0 || !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return bad("focal gamma must be non-negative and alpha within (0, 1]");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// Mean sigmoid focal loss over every cell of `logits`.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &Tensor<T>, gamma: f64, alpha: f64) -> Result<Var> {
    g.focal_loss(logits, target, T::lit(gamma), T::lit(alpha))
}

fn cos_interp(start: f64, end: f64, frac: f64) -> f64 {
    end + 0.5 * (start - end) * (1.0 + (PI * frac).cos())
}

/// Learning rate at `step` of a `total`-step one-cycle schedule: cosine
/// warm-up from `max_lr / div` to `max_lr` at step `pct_start·total`, then
/// cosine annealing to `max_lr / final_div` at the last step.
pub fn one_cycle_lr(step: usize, total: usize, max_lr: f64, pct_start: f64, div: f64, final_div: f64) -> Result<f64> {
    if step >= total {
        return Err(Error::invalid(
            "one_cycle_lr",
            format!("step {step} outside a {total}-step schedule"),
        ));
    }
    let start = max_lr / div;
    let end = max_lr / final_div;
    let peak = pct_start * total as f64;
    let s = step as f64;
    Ok(if s <= peak {
        cos_interp(start, max_lr, if peak > 0.0 { s / peak } else { 1.0 })
    } else {
        let span = (total as f64 - 1.0 - peak).max(f64::MIN_POSITIVE);
        cos_interp(max_lr, end, ((s - peak) / span).min(1.0))
    })
}

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        AdamW {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update. Weight decay shrinks parameters by `lr·wd` before, and
/// independently of, the bias-corrected adaptive step.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - lr * opt.weight_decay;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let m_new = opt.beta1 * *mi as f64 + (1.0 - opt.beta1) * gi;
            let v_new = opt.beta2 * *vi as f64 + (1.0 - opt.beta2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = (m_new / bc1) / ((v_new / bc2).sqrt() + opt.eps);
            *pi = (*pi as f64 * decay - lr * update) as f32;
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    params: &ParamStore,
    cfg: &ModelConfig,
    sample: &Sample,
    gamma: f64,
    alpha: f64,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, true);
    let views = CameraView::all(&sample.images, &sample.calibs);
    let out = forward(&mut g, &p, cfg, &views, false)?;
    let loss = focal_loss(&mut g, out.logits, &sample.label, gamma, alpha)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item() as f64, p.gradients(&grads)))
}

/// Mean focal loss over `samples` without gradient bookkeeping.
pub fn mean_loss(params: &ParamStore, cfg: &ModelConfig, samples: &[Sample], gamma: f64, alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("mean_loss", "no samples"));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::<f32>::new();
            let p = params.bind(&mut g, false);
            let out = forward(&mut g, &p, cfg, &CameraView::all(&s.images, &s.calibs), false)?;
            let loss = focal_loss(&mut g, out.logits, &s.label, gamma, alpha)?;
            Ok(g.value(loss).item() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Mean loss and mean gradient over `batch`, reduced in batch order.
pub fn batch_gradients(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &[&Sample],
    gamma: f64,
    alpha: f64,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let per_sample: Vec<(f64, Vec<Tensor<f32>>)> = batch
        .par_iter()
        .map(|s| sample_gradients(params, cfg, s, gamma, alpha))
        .collect::<Result<_>>()?;
    let n = batch.len() as f32;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut total) = iter
        .next()
        .ok_or_else(|| Error::invalid("batch_gradients", "empty batch"))?;
    for (l, gr) in iter {
        loss += l;
        for (acc, g) in total.iter_mut().zip(&gr) {
            acc.add_assign(g);
        }
    }
    for t in &mut total {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / batch.len() as f64, total))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou_vehicle: f64,
    pub val_iou_driveable: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_iou_vehicle,val_iou_driveable,lr";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.epoch, m.train_loss, m.val_iou_vehicle, m.val_iou_driveable, m.lr
        ));
    }
    out
}

/// Parameters, optimizer state and history after training.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub history: Vec<EpochMetrics>,
}

/// Trains from `params` for `train.epochs` epochs over `data.train`,
/// validating on `data.val` after each epoch. `on_epoch` sees every epoch's
/// metrics as soon as they are known.
pub fn train_run(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    params: ParamStore,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    model.validate()?;
    train.validate()?;
    check_params(model, &params)?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut params = params;
    let mut state = AdamState::new(&params);
    let opt = AdamW::from(train);
    let steps_per_epoch = train.steps_per_epoch(data.train.len());
    let total = steps_per_epoch * train.epochs;
    let mut history = Vec::with_capacity(train.epochs);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;
    for epoch in 0..train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(train.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, grads) = batch_gradients(&params, model, &batch, train.focal_gamma, train.focal_alpha)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { step });
            }
            lr = one_cycle_lr(
                step,
                total,
                train.max_lr,
                train.pct_start,
                train.div_factor,
                train.final_div_factor,
            )?;
            adamw_step(&mut params, &grads, &mut state, lr, &opt)?;
            loss_sum += loss;
            step += 1;
        }
        let (val_iou_vehicle, val_iou_driveable) = if data.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let iou = evaluate(&params, model, &data.val)?;
            (iou[0].iou, iou.get(1).map_or(f64::NAN, |c| c.iou))
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_iou_vehicle,
            val_iou_driveable,
            lr,
        };
        log::info!(
            "epoch {} loss {:.5} vehicle IoU {:.4} driveable IoU {:.4} lr {:.2e}",
            m.epoch,
            m.train_loss,
            m.val_iou_vehicle,
            m.val_iou_driveable,
            m.lr
        );
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome {
        params,
        optimizer: state,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerIndex {
    step: u64,
    m: Vec<String>,
    v: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    version: u32,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerIndex>,
}

const CHECKPOINT_FORMAT: &str = "cvt-checkpoint";

/// A model configuration with its parameters and, optionally, the optimizer
/// state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

/// Writes `params.json` and one BT1 file per tensor into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &ModelConfig,
    params: &ParamStore,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    check_params(model, params)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(params.len());
    for (i, (name, t)) in params.iter().enumerate() {
        let file = format!("param_{i:03}.bt1");
        bt1::write(&dir.join(&file), &bt1::encode_f32(t))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let optimizer = match optimizer {
        Some(s) => {
            let mut idx = OptimizerIndex {
                step: s.step,
                m: Vec::new(),
                v: Vec::new(),
            };
            for (i, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
                let (fm, fv) = (format!("adam_m_{i:03}.bt1"), format!("adam_v_{i:03}.bt1"));
                bt1::write(&dir.join(&fm), &bt1::encode_f32(m))?;
                bt1::write(&dir.join(&fv), &bt1::encode_f32(v))?;
                idx.m.push(fm);
                idx.v.push(fv);
            }
            Some(idx)
        }
        None => None,
    };
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        model: model.clone(),
        tensors,
        optimizer,
    };
    let path = dir.join("params.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::format("params.json", e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_tensor(dir: &Path, file: &str, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let stored = bt1::read(&dir.join(file)).map_err(|e| Error::format(name, format!("{file}: {e}")))?;
    match stored {
        Bt1::F32(t) if t.shape() == shape => Ok(t),
        other => Err(Error::format(
            name,
            format!(
                "{file} holds {:?} {:?}, index expects float32 {shape:?}",
                other.dtype(),
                other.shape()
            ),
        )),
    }
}

/// Loads a checkpoint. With `expected`, a different stored model
/// configuration is rejected before any tensor is read.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = dir.join("params.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    if index.format != CHECKPOINT_FORMAT || index.version != 1 {
        return Err(Error::format(
            path.display().to_string(),
            "not a version 1 checkpoint index",
        ));
    }
    if let Some(cfg) = expected {
        if *cfg != index.model {
            return Err(Error::Config(
                "checkpoint was saved with a different model configuration".into(),
            ));
        }
    }
    index.model.validate()?;
    let expected_shapes = index.model.param_shapes();
    if expected_shapes.len() != index.tensors.len() {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "{} tensors listed, model needs {}",
                index.tensors.len(),
                expected_shapes.len()
            ),
        ));
    }
    let mut params = ParamStore::new();
    for (entry, (name, shape)) in index.tensors.iter().zip(&expected_shapes) {
        if entry.name != *name || entry.shape != *shape {
            return Err(Error::format(
                entry.name.clone(),
                format!("index lists {:?}, model needs {name} {shape:?}", entry.shape),
            ));
        }
        params.insert(name.clone(), read_tensor(dir, &entry.file, name, shape)?)?;
    }
    let optimizer = match &index.optimizer {
        Some(o) => {
            if o.m.len() != params.len() || o.v.len() != params.len() {
                return Err(Error::format("optimizer", "moment count does not match parameters"));
            }
            let mut state = AdamState {
                step: o.step,
                m: Vec::new(),
                v: Vec::new(),
            };
            for ((fm, fv), (name, shape)) in o.m.iter().zip(&o.v).zip(&expected_shapes) {
                state.m.push(read_tensor(dir, fm, name, shape)?);
                state.v.push(read_tensor(dir, fv, name, shape)?);
            }
            Some(state)
        }
        None => None,
    };
    Ok(Checkpoint {
        model: index.model,
        params,
        optimizer,
    })
}
