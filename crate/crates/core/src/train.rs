//! Adam training with best-on-validation selection, and model checkpoints.
//!
//! Checkpoint layout (little-endian): `b"TFCK"`, `u32` version, `u32` byte
//! length of the canonical model-config JSON, the JSON, then named tensor
//! records (`u32` name length, UTF-8 name, TFTN record) in name order until
//! end of file. Optimizer state, when present, lives under `opt/`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Subset;
use crate::layers::ParamSet;
use crate::model::{l1_loss, ModelConfig, ModelError, TransFusionModel};
use crate::tensor::io::{check_magic, read_bytes, read_u32};
use crate::tensor::{read_tensor_from, write_tensor_to, DType, FormatError, Tape, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("gradient for {param} has {got} entries, parameter has {expected}")]
    GradientShape { param: String, got: usize, expected: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Forward {
        epoch: usize,
        batch: usize,
        source: ModelError,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the parameters of the epoch with the strictly lowest validation MAE.
    BestValMae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps_adam: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: Option<usize>,
    /// Global gradient-norm ceiling; off when `None`.
    pub grad_clip: Option<f64>,
    pub optimizer: Optimizer,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps_adam: 1e-8,
            max_epochs: 200,
            batch_size: 32,
            seed: 0,
            early_stop_patience: None,
            grad_clip: None,
            optimizer: Optimizer::Adam,
            selection: Selection::BestValMae,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(TrainError::Config(format!(
                "betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if !(self.eps_adam > 0.0) {
            return Err(TrainError::Config("eps_adam must be positive".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "max_epochs and batch_size must be at least 1".into(),
            ));
        }
        if self.early_stop_patience == Some(0) {
            return Err(TrainError::Config("early_stop_patience must be at least 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Config(format!(
            "{} gradients / {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let name = &params.names()[i];
        let expected = params.tensors()[i].numel();
        if g.len() != expected || state.m[i].len() != expected {
            return Err(TrainError::GradientShape {
                param: name.clone(),
                got: g.len(),
                expected,
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
    }

    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pj, gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            *pj -= cfg.lr * (*mj / c1) / ((*vj / c2).sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_mae: f64,
    pub val_mse: f64,
    pub is_best: bool,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_l1,val_mae,val_mse,is_best";

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_l1, r.val_mae, r.val_mse, r.is_best
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the best validation epoch.
    pub best: TransFusionModel,
    pub state: TrainState,
}

/// What the per-epoch observer sees.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a TransFusionModel,
    pub adam: &'a AdamState,
}

/// Gradient-free predictions over `subset`, in chunks of `batch_size`.
pub fn predict_subset(model: &TransFusionModel, subset: &Subset, batch_size: usize) -> Result<Vec<f64>, TrainError> {
    let mut preds = Vec::with_capacity(subset.len());
    for batch in subset.batches(batch_size.max(1), None, 0)? {
        preds.extend(model.predict(&batch.x_w, &batch.x_v)?);
    }
    Ok(preds)
}

fn mae_mse(preds: &[f64], labels: &[f64]) -> (f64, f64) {
    let m = preds.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, y) in preds.iter().zip(labels) {
        abs += (p - y).abs();
        sq += (p - y) * (p - y);
    }
    (abs / m, sq / m)
}

fn global_clip(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Mean L1 loss and its gradient over one batch.
///
/// Each sample is recorded on its own tape with loss `|y - ŷ| / B`; the
/// per-sample gradients are summed in batch order, which equals the
/// gradient of the batch-mean loss.
pub fn batch_gradients(
    model: &TransFusionModel,
    x_w: &[Tensor],
    x_v: &[Tensor],
    y: &[f64],
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let params = model.params();
    let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let scale = 1.0 / y.len() as f64;
    let mut loss = 0.0;
    for ((xw, xv), &label) in x_w.iter().zip(x_v).zip(y) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let pred = model.forward_batch(&mut tape, &bound, std::slice::from_ref(xw), std::slice::from_ref(xv))?;
        let target = tape.constant(Tensor::from_vec(vec![label])?)?;
        let l = l1_loss(&mut tape, pred, target)?;
        let l = tape.scalar_mul(l, scale)?;
        loss += tape.value(l)[0];
        let g = tape.backward(l)?;
        for (acc, &var) in grads.iter_mut().zip(bound.vars()) {
            if let Some(gv) = g.get(var) {
                acc.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((loss, grads))
}

pub fn fit(model: TransFusionModel, train: &Subset, val: &Subset, cfg: &TrainConfig) -> Result<FitOutcome, TrainError> {
    fit_with(model, train, val, cfg, |_| Ok(()))
}

/// Trains `model` and returns the snapshot with the lowest validation MAE.
/// `observer` runs after every epoch, so callers can persist the best
/// snapshot as soon as it appears.
pub fn fit_with<F>(
    mut model: TransFusionModel,
    train: &Subset,
    val: &Subset,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<FitOutcome, TrainError>
where
    F: FnMut(&EpochEvent<'_>) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut adam = AdamState::new(model.params());
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, TransFusionModel)> = None;
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for (b, batch) in train.batches(cfg.batch_size, Some(cfg.seed), epoch as u64)?.enumerate() {
            let (loss, mut grads) =
                batch_gradients(&model, &batch.x_w, &batch.x_v, &batch.y).map_err(|source| match source {
                    ModelError::Numeric { .. } => TrainError::Forward {
                        epoch,
                        batch: b,
                        source,
                    },
                    other => TrainError::Model(other),
                })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            if let Some(c) = cfg.grad_clip {
                global_clip(&mut grads, c);
            }
            adam_step(model.params_mut(), &grads, &mut adam, cfg)?;
            loss_sum += loss * batch.y.len() as f64;
        }

        let preds = predict_subset(&model, val, cfg.batch_size)?;
        let (val_mae, val_mse) = mae_mse(&preds, &val.ys);
        let is_best = best.as_ref().is_none_or(|(_, mae, _)| val_mae < *mae);
        if is_best {
            best = Some((epoch, val_mae, model.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let record = EpochRecord {
            epoch,
            train_l1: loss_sum / train.len() as f64,
            val_mae,
            val_mse,
            is_best,
        };
        observer(&EpochEvent {
            record: &record,
            model: &model,
            adam: &adam,
        })?;
        log.push(record);
        if cfg.early_stop_patience.is_some_and(|p| stale >= p) {
            break;
        }
    }

    let (best_epoch, best_val_mae, best_model) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        best: best_model,
        state: TrainState {
            adam,
            log,
            best_epoch: Some(best_epoch),
            best_val_mae,
        },
    })
}

fn write_named<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), FormatError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    write_tensor_to(w, t, DType::F64)
}

/// Serializes `model` (and optionally the optimizer state) to checkpoint bytes.
pub fn encode_checkpoint(model: &TransFusionModel, adam: Option<&AdamState>) -> Result<Vec<u8>, FormatError> {
    let mut named: BTreeMap<String, Tensor> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone().with_grad(false)))
        .collect();
    if let Some(st) = adam {
        named.insert("opt/t".into(), Tensor::scalar(st.t as f64));
        for (i, (name, t)) in model.params().iter().enumerate() {
            named.insert(format!("opt/m/{name}"), Tensor::new(t.shape(), st.m[i].clone())?);
            named.insert(format!("opt/v/{name}"), Tensor::new(t.shape(), st.v[i].clone())?);
        }
    }
    let json = model.config().to_canonical_json();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());
    for (name, t) in &named {
        write_named(&mut buf, name, t)?;
    }
    Ok(buf)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(model: &TransFusionModel, adam: Option<&AdamState>, path: &Path) -> Result<(), TrainError> {
    let bytes = encode_checkpoint(model, adam)?;
    let tmp = path.with_extension("tfck.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&bytes)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn decode_checkpoint<R: BufRead>(r: &mut R) -> Result<(TransFusionModel, Option<AdamState>), TrainError> {
    check_magic(r, CHECKPOINT_MAGIC)?;
    let version = read_u32(r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let len = read_u32(r, "config length")? as usize;
    let json = read_bytes(r, len, "config")?;
    let cfg: ModelConfig =
        serde_json::from_slice(&json).map_err(|e| FormatError::Corrupted(format!("model config: {e}")))?;

    let mut named = BTreeMap::new();
    while !r.fill_buf()?.is_empty() {
        let n = read_u32(r, "tensor name length")? as usize;
        if n > 4096 {
            return Err(FormatError::Corrupted(format!("implausible tensor name length {n}")).into());
        }
        let name = String::from_utf8(read_bytes(r, n, "tensor name")?)
            .map_err(|_| FormatError::Corrupted("tensor name is not UTF-8".into()))?;
        let t = read_tensor_from(r)?;
        if named.insert(name.clone(), t).is_some() {
            return Err(FormatError::Corrupted(format!("duplicate tensor {name}")).into());
        }
    }

    let t_opt = named.remove("opt/t");
    let mut moments = BTreeMap::new();
    let mut params = Vec::new();
    for (name, t) in named {
        if name.starts_with("opt/") {
            moments.insert(name, t);
        } else {
            params.push((name, t));
        }
    }
    let model = TransFusionModel::from_named_params(&cfg, params)?;
    let adam = match t_opt {
        None if moments.is_empty() => None,
        None => return Err(FormatError::Corrupted("optimizer moments without step count".into()).into()),
        Some(t) => {
            let mut take = |kind: &str, name: &str| {
                moments
                    .remove(&format!("opt/{kind}/{name}"))
                    .map(Tensor::into_data)
                    .ok_or_else(|| FormatError::Corrupted(format!("missing opt/{kind}/{name}")))
            };
            let mut m = Vec::new();
            let mut v = Vec::new();
            for name in model.params().names() {
                m.push(take("m", name)?);
                v.push(take("v", name)?);
            }
            Some(AdamState {
                t: t.data()[0] as u64,
                m,
                v,
            })
        }
    };
    Ok((model, adam))
}

pub fn load_checkpoint(path: &Path) -> Result<(TransFusionModel, Option<AdamState>), TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    decode_checkpoint(&mut r)
}
