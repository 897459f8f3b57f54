//! Cross-entropy loss, AdamW with decoupled weight decay, gradient
//! accumulation and the epoch-driven training loop.
//!
//! The loss is computed from logits in log-sum-exp form for stability; its
//! equality with the direct -log P form is a tested invariant. The AdamW
//! update follows
//! `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`,
//! with bias-corrected moments, frozen parameters skipped entirely and
//! weight decay skipped for biases and normalization gains.

use std::fmt::Write as _;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can::LabeledRecord;
use crate::dataset::{BatchPlan, DatasetBundle, DatasetError};
use crate::derive_seed;
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsError, MetricsReport};
use crate::model::{ModelError, ProbVector, TransformerModel};
use crate::nn::Tensor;
use crate::textify::{encode_batch, TextifyError, TokenSequence};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("class index {class} out of range for {n_classes} logits")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error(transparent)]
    Textify(#[from] TextifyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// -log P_true from an already-materialized probability vector.
pub fn cross_entropy_probs(probs: &ProbVector, true_class: usize) -> f64 {
    -(probs.values()[true_class].max(f64::MIN_POSITIVE)).ln()
}

/// -log softmax(logits)[true_class], evaluated as logsumexp(logits) minus
/// the true logit.
pub fn cross_entropy_from_logits(logits: &[f64], true_class: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[true_class]
}

/// Mean batch loss and its gradient with respect to the logits
/// (softmax minus one-hot, scaled by 1/N).
pub fn batch_loss_and_dlogits(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor), TrainError> {
    let n = labels.len();
    let c = logits.last_dim();
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(TrainError::ClassOutOfRange {
                class: label,
                n_classes: c,
            });
        }
        let row = logits.row(r);
        total += cross_entropy_from_logits(row, label);
        let probs = crate::nn::softmax(row);
        let drow = dlogits.row_mut(r);
        for j in 0..c {
            drow[j] = (probs[j] - f64::from(u8::from(j == label))) / n as f64;
        }
    }
    Ok((total / n as f64, dlogits))
}

/// AdamW optimizer state: per-parameter first/second moments keyed by
/// parameter name, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Step counter; increments once per optimizer step, not per
    /// accumulation micro-batch.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Opens a new optimizer step (increments t).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies the AdamW update to one parameter using its accumulated
    /// gradient. Call [`AdamW::begin_step`] first. Frozen parameters are
    /// skipped; weight decay applies only to `decay` tensors.
    pub fn update_param(&mut self, param: &mut crate::nn::Param) -> Result<(), TrainError> {
        if param.frozen {
            return Ok(());
        }
        let n = param.value.elem_count();
        let (m, v) = self
            .moments
            .entry(param.name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = if param.decay { self.weight_decay } else { 0.0 };
        let values = param.value.data_mut();
        let grads = param.grad.data();
        for i in 0..n {
            let g = grads[i];
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(param.name.clone()));
            }
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps) + self.lr * decay * values[i];
        }
        Ok(())
    }

    /// One full optimizer step over every model parameter.
    pub fn step_model(&mut self, model: &mut TransformerModel) -> Result<(), TrainError> {
        self.begin_step();
        let mut failure = None;
        model.visit_params_mut(&mut |p| {
            if failure.is_none() {
                if let Err(e) = self.update_param(p) {
                    failure = Some(e);
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Training hyperparameters: batch 4, weight decay 0.01, 10 epochs,
/// learning rate 5e-5 for the encoder and 3e-5 (with accumulation 4) for
/// the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_batch_size: usize,
    pub accum_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn encoder_default(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            val_batch_size: 32,
            accum_steps: 1,
            lr: 5e-5,
            weight_decay: 0.01,
            seed,
        }
    }

    pub fn decoder_default(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            val_batch_size: 16,
            accum_steps: 4,
            lr: 3e-5,
            weight_decay: 0.01,
            seed,
        }
    }
}

/// One epoch row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub ba: f64,
    pub prec: f64,
    pub dr: f64,
    pub f1: f64,
}

/// Per-epoch training and validation curves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<EpochStats>,
}

impl TrainHistory {
    /// CSV rendering: `epoch,train_loss,val_loss,ba,prec,dr,f1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,ba,prec,dr,f1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.train_loss, r.val_loss, r.ba, r.prec, r.dr, r.f1
            );
        }
        out
    }

    /// Minimal SVG line plot of the six curves.
    pub fn to_svg(&self) -> String {
        type Series = (&'static str, &'static str, fn(&EpochStats) -> f64);
        let (w, h, pad) = (720.0, 360.0, 40.0);
        let n = self.rows.len().max(2) as f64;
        let series: [Series; 6] = [
            ("train_loss", "#d62728", |r| r.train_loss),
            ("val_loss", "#ff7f0e", |r| r.val_loss),
            ("ba", "#2ca02c", |r| r.ba),
            ("prec", "#1f77b4", |r| r.prec),
            ("dr", "#9467bd", |r| r.dr),
            ("f1", "#8c564b", |r| r.f1),
        ];
        let max_y = self
            .rows
            .iter()
            .flat_map(|r| series.iter().map(move |(_, _, f)| f(r)))
            .fold(1.0f64, f64::max);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
             viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
            h - pad,
            w - pad,
            h - pad
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
            h - pad
        );
        for (si, (name, color, f)) in series.iter().enumerate() {
            let points: Vec<String> = self
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let x = pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
                    let y = (h - pad) - (h - 2.0 * pad) * (f(r) / max_y);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                points.join(" ")
            );
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{name}</text>",
                w - pad + 4.0 - 60.0,
                pad + 14.0 * si as f64
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Evaluation result on a labeled record set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

/// Eval-mode inference over a record set: mean loss, confusion matrix and
/// the metrics report. Chunks run in parallel; results are reduced in chunk
/// order, so the output is deterministic.
pub fn evaluate(
    model: &TransformerModel,
    records: &[LabeledRecord],
    batch_size: usize,
) -> Result<Evaluation, TrainError> {
    let n_classes = model.config.n_classes;
    let chunk = batch_size.max(1);
    let partials: Result<Vec<(f64, ConfusionMatrix)>, TrainError> = records
        .par_chunks(chunk)
        .map(|recs| {
            let (seqs, labels) =
                encode_batch(recs, model.config.arch, model.config.max_len, &model.vocab)?;
            let pooled = model.forward_eval(&seqs)?;
            let probs = model.classify(&pooled);
            let mut cm = ConfusionMatrix::new(n_classes);
            let mut loss = 0.0;
            for (p, label) in probs.iter().zip(&labels) {
                loss += cross_entropy_probs(p, label.index());
                cm.record(label.index(), p.argmax())?;
            }
            Ok((loss, cm))
        })
        .collect();
    let mut cm = ConfusionMatrix::new(n_classes);
    let mut loss = 0.0;
    for (l, part) in partials? {
        loss += l;
        cm.merge(&part);
    }
    let report = compute_metrics(&cm)?;
    Ok(Evaluation {
        loss: loss / records.len().max(1) as f64,
        confusion: cm,
        report,
    })
}

/// Result of a training run: the history, the best checkpoint (highest
/// validation balanced accuracy, ties to the later epoch) and its epoch.
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub best: TransformerModel,
    pub best_epoch: usize,
}

/// Epoch-driven training with shuffled batches, gradient accumulation and
/// per-epoch validation. Deterministic under a fixed config: batch order,
/// dropout and the optimizer all derive from `config.seed`.
pub fn train_run(
    model: &mut TransformerModel,
    bundle: &DatasetBundle,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if bundle.train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let (train_seqs, train_labels) = encode_batch(
        &bundle.train,
        model.config.arch,
        model.config.max_len,
        &model.vocab,
    )?;
    let plan = BatchPlan::new(
        train_seqs.len(),
        config.batch_size,
        derive_seed(config.seed, 0x0ba7c4),
        false,
    )?;
    let mut optimizer = AdamW::new(config.lr, config.weight_decay);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xd407));
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, TransformerModel)> = None;

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut pending = 0usize;
        model.zero_grads();
        let batches = plan.epoch(epoch);
        let n_batches = batches.len();
        for (batch_idx, indices) in batches.into_iter().enumerate() {
            let batch: Vec<TokenSequence> =
                indices.iter().map(|&i| train_seqs[i].clone()).collect();
            let labels: Vec<usize> = indices.iter().map(|&i| train_labels[i].index()).collect();
            let (pooled, cache) = model.forward_train(&batch, &mut dropout_rng)?;
            let (logits, head_cache) = model.head_forward_train(&pooled);
            let (loss, dlogits) = batch_loss_and_dlogits(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let dpooled = model.head_backward(&head_cache, &dlogits);
            model.backward(&cache, &dpooled);
            epoch_loss += loss * labels.len() as f64;
            seen += labels.len();
            pending += 1;
            if pending == config.accum_steps || batch_idx + 1 == n_batches {
                // Average the accumulated micro-batch gradients before the
                // shared step.
                if pending > 1 {
                    let scale = 1.0 / pending as f64;
                    model.visit_params_mut(&mut |p| {
                        if !p.frozen {
                            p.grad.scale(scale);
                        }
                    });
                }
                optimizer.step_model(model)?;
                model.zero_grads();
                pending = 0;
            }
        }
        let val = evaluate(model, &bundle.validation, config.val_batch_size)?;
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / seen.max(1) as f64,
            val_loss: val.loss,
            ba: val.report.balanced_accuracy,
            prec: val.report.precision,
            dr: val.report.detection_rate,
            f1: val.report.f1,
        };
        history.rows.push(stats);
        let replace = match &best {
            Some((ba, _, _)) => stats.ba >= *ba,
            None => true,
        };
        if replace {
            best = Some((stats.ba, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
    })
}
