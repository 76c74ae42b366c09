//! Binary cross-entropy, RMSprop and the deterministic training loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{BackwardOptions, ModelGraph, Source};
use crate::layers::{ForwardCtx, LayerConfig};
use crate::real::Real;
use crate::rng::{shuffle_permutation, DetRng};
use crate::tensor::Tensor;
use crate::weights::{self, Record};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` before the log.
pub const P_CLAMP: f32 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub rho: f32,
    pub epsilon: f32,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-7,
            seed: 1001,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be a positive number");
        }
        if self.threads == 0 {
            return bad("threads must be >= 1");
        }
        Ok(())
    }
}

/// Metrics of one epoch. `epoch` counts from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_acc: f32,
    pub val_loss: f32,
    pub val_acc: f32,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// One JSON line without the wall time, so repeated runs produce
    /// byte-identical metric files.
    pub fn metrics_line(&self) -> String {
        serde_json::json!({
            "epoch": self.epoch,
            "train_acc": self.train_acc,
            "train_loss": self.train_loss,
            "val_acc": self.val_acc,
            "val_loss": self.val_loss,
        })
        .to_string()
    }
}

fn check_pair(pred: &Tensor, label: &Tensor) -> Result<()> {
    if pred.shape() != label.shape() {
        return Err(Error::ShapeMismatch {
            left: pred.shape().clone(),
            right: label.shape().clone(),
        });
    }
    Ok(())
}

fn clamp_p(p: f32) -> f32 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}

/// Mean of `-(y ln p + (1-y) ln(1-p))` over the batch, summed in index order.
pub fn bce_loss(pred: &Tensor, label: &Tensor) -> Result<f32> {
    check_pair(pred, label)?;
    let mut sum = 0.0f32;
    for (&p, &y) in pred.data().iter().zip(label.data()) {
        let p = clamp_p(p);
        sum += -(y * p.det_ln() + (1.0 - y) * (1.0 - p).det_ln());
    }
    Ok(sum / pred.len() as f32)
}

/// Gradient of [`bce_loss`] with respect to the probabilities.
pub fn bce_grad(pred: &Tensor, label: &Tensor) -> Result<Tensor> {
    check_pair(pred, label)?;
    let n = pred.len() as f32;
    let g = pred
        .data()
        .iter()
        .zip(label.data())
        .map(|(&p, &y)| {
            if p != clamp_p(p) {
                return 0.0;
            }
            (p - y) / (p * (1.0 - p)) / n
        })
        .collect();
    Tensor::new(pred.dims().to_vec(), g)
}

/// Gradient of the loss with respect to the logits feeding a sigmoid:
/// `(p - y) / N`.
pub fn bce_logit_grad(pred: &Tensor, label: &Tensor) -> Result<Tensor> {
    check_pair(pred, label)?;
    let n = pred.len() as f32;
    let g = pred
        .data()
        .iter()
        .zip(label.data())
        .map(|(&p, &y)| (p - y) / n)
        .collect();
    Tensor::new(pred.dims().to_vec(), g)
}

/// Fraction of `round(p) == y`, where `p == 0.5` counts as class 1.
pub fn accuracy(pred: &Tensor, label: &Tensor) -> Result<f32> {
    Ok(correct(pred, label)? as f32 / pred.len() as f32)
}

fn correct(pred: &Tensor, label: &Tensor) -> Result<usize> {
    check_pair(pred, label)?;
    Ok(pred
        .data()
        .iter()
        .zip(label.data())
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count())
}

/// `ms = rho ms + (1 - rho) g^2; param -= lr g / (sqrt(ms) + eps)`.
pub fn rmsprop_step(param: &mut Tensor, grad: &Tensor, ms: &mut Tensor, cfg: &TrainConfig) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != ms.shape() {
        return Err(Error::ShapeMismatch {
            left: param.shape().clone(),
            right: grad.shape().clone(),
        });
    }
    let (rho, lr, eps) = (cfg.rho, cfg.learning_rate, cfg.epsilon);
    for ((p, &g), m) in param.data_mut().iter_mut().zip(grad.data()).zip(ms.data_mut()) {
        *m = rho * *m + (1.0 - rho) * (g * g);
        *p -= lr * g / (m.sqrt() + eps);
    }
    Ok(())
}

/// RMSprop accumulators, one per trainable registry entry.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub entries: Vec<(String, Tensor)>,
}

impl OptimizerState {
    pub fn new(g: &ModelGraph) -> Self {
        OptimizerState {
            entries: g
                .registry()
                .iter()
                .filter(|e| e.trainable)
                .map(|e| (e.key(), Tensor::from_shape(e.shape.clone(), vec![0.0; e.shape.numel()]).expect("registry shape")))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let records: Vec<Record> = self
            .entries
            .iter()
            .map(|(id, t)| Record {
                id: id.clone(),
                flags: 0,
                tensor: t.clone(),
            })
            .collect();
        weights::encode(&records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(OptimizerState {
            entries: weights::decode(bytes)?
                .into_iter()
                .map(|r| (r.id, r.tensor))
                .collect(),
        })
    }
}

/// Loss seed for a batch: at the sigmoid input when the model ends in a
/// sigmoid (the numerically stable fused form), else at the output.
fn loss_seed(g: &ModelGraph, pred: &Tensor, label: &Tensor) -> Result<(usize, Tensor)> {
    let Source::Node(out) = g.output() else {
        return Err(Error::InvalidGraph("model output is the raw input".into()));
    };
    let node = &g.nodes()[out];
    if let (LayerConfig::Sigmoid, [Source::Node(logits)]) = (&node.config, node.inputs.as_slice()) {
        return Ok((*logits, bce_logit_grad(pred, label)?));
    }
    Ok((out, bce_grad(pred, label)?))
}

/// Loss and accuracy over a whole dataset in inference mode.
pub fn evaluate(g: &ModelGraph, ds: &Dataset, batch_size: usize) -> Result<(f32, f32)> {
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut loss_sum = 0.0f32;
    let mut hits = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch(chunk)?;
        let (pred, _) = g.forward(&x, &ForwardCtx::infer())?;
        loss_sum += bce_loss(&pred, &y)? * chunk.len() as f32;
        hits += correct(&pred, &y)?;
    }
    Ok((loss_sum / ds.len() as f32, hits as f32 / ds.len() as f32))
}

/// Class-1 probabilities for a batch of images.
pub fn predict(g: &ModelGraph, x: &Tensor) -> Result<Tensor> {
    Ok(g.forward(x, &ForwardCtx::infer())?.0)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
}

/// Train `g` in place.
///
/// Each epoch draws a permutation from stream `(seed, "shuffle/<epoch>")`
/// and walks it in batches, keeping the final partial batch. Validation runs
/// in inference mode after every epoch. All arithmetic runs inside a pool of
/// `threads` workers, and no result depends on that number.
pub fn train(g: &mut ModelGraph, train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Dataset("training and validation sets must be non-empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| train_inner(g, train_ds, val_ds, cfg))
}

fn train_inner(g: &mut ModelGraph, train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let registry = g.registry();
    let mut opt = OptimizerState::new(g);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = DetRng::new(cfg.seed, format!("shuffle/{epoch}"));
        let order = shuffle_permutation(&mut rng, train_ds.len());
        let mut loss_sum = 0.0f32;
        let mut hits = 0usize;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let abort = Error::NumericAbort { epoch, batch };
            let (x, y) = train_ds.batch(chunk)?;
            let ctx = ForwardCtx::train(cfg.seed, epoch, batch);
            let (pred, cache) = match g.forward(&x, &ctx) {
                Err(e) if matches!(e.root(), Error::NonFinite { .. }) => return Err(abort),
                r => r?,
            };
            let loss = bce_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(abort);
            }
            loss_sum += loss * chunk.len() as f32;
            hits += correct(&pred, &y)?;
            let (seed_node, seed_grad) = loss_seed(g, &pred, &y)?;
            let grads = g.backward(&cache, seed_node, seed_grad, BackwardOptions::PARAMS)?;
            g.update_batch_stats(&cache)?;
            for (entry, (_, ms)) in registry.iter().filter(|e| e.trainable).zip(&mut opt.entries) {
                let grad = grads.params[entry.node]
                    .get(&entry.name)
                    .ok_or_else(|| Error::InvalidGraph(format!("no gradient for {}", entry.key())))?;
                if !grad.all_finite() {
                    return Err(abort);
                }
                rmsprop_step(g.tensor_mut(entry), grad, ms, cfg)?;
            }
        }
        let (val_loss, val_acc) = evaluate(g, val_ds, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NumericAbort {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_ds.len() as f32,
            train_acc: hits as f32 / train_ds.len() as f32,
            val_loss,
            val_acc,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        records,
        optimizer: opt,
    })
}
