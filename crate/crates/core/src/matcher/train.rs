//! Data loading, training loops, and evaluation.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{extract_patches, MatcherModel, Patches};
use super::optim::{adam_step, cosine_lr, AdamState};
use super::{BiasSource, Fusion};
use crate::correspondence::{normalize, CorrespondenceMatrix, DEFAULT_GT_THRESHOLD};
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::image::load_drr;
use crate::metrics::{
    classification_metrics, correspondence_metrics, mean_report, ClassificationReport, EvalReport,
    DEFAULT_PRED_THRESHOLD,
};
use crate::volume::write_file;

/// One view pair ready for the model. Images are scaled by their own max.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub view1: Patches,
    pub view2: Patches,
    /// Normalized ground-truth correspondence, view-1 by view-2 tokens.
    pub gt: CorrespondenceMatrix,
    pub label: Option<bool>,
}

impl Example {
    pub fn from_images(
        id: impl Into<String>,
        img1: (&[f64], usize, usize),
        img2: (&[f64], usize, usize),
        gt: &CorrespondenceMatrix,
        label: Option<bool>,
        patch: usize,
    ) -> Result<Self> {
        let prep = |(px, nu, nv): (&[f64], usize, usize)| {
            let max = px.iter().cloned().fold(0.0, f64::max);
            let scaled: Vec<f64> = if max > 0.0 {
                px.iter().map(|v| v / max).collect()
            } else {
                px.to_vec()
            };
            extract_patches(&scaled, nu, nv, patch)
        };
        let view1 = prep(img1)?;
        let view2 = prep(img2)?;
        if gt.shape() != (view1.len(), view2.len()) {
            return Err(Error::invalid(format!(
                "correspondence {:?} does not match the {}x{} token grids; patch size must equal k",
                gt.shape(),
                view1.len(),
                view2.len()
            )));
        }
        Ok(Example {
            id: id.into(),
            view1,
            view2,
            gt: normalize(gt),
            label,
        })
    }

    pub fn target(&self) -> Array2<f64> {
        Array2::from_shape_vec(self.gt.shape(), self.gt.to_dense()).expect("shape matches")
    }
}

/// Loads the samples of one split (or all samples) listed in a manifest.
pub fn load_examples(
    dir: &Path,
    manifest: &Manifest,
    split: Option<Split>,
    patch: usize,
) -> Result<Vec<Example>> {
    manifest
        .samples
        .par_iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .map(|s| {
            let (nu1, nv1, px1) = load_drr(&dir.join(&s.view1))?;
            let (nu2, nv2, px2) = load_drr(&dir.join(&s.view2))?;
            let gt = CorrespondenceMatrix::load(&dir.join(&s.corr))?;
            Example::from_images(
                s.id.clone(),
                (&px1, nu1, nv1),
                (&px2, nu2, nv2),
                &gt,
                s.label,
                patch,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean AP for correspondence training, accuracy for classification.
    pub val_metric: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    /// Parameters with the lowest validation loss.
    pub model: MatcherModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient; `model`
    /// is then the best checkpoint recorded before the failure.
    pub diverged: Option<Error>,
}

/// CSV with columns `epoch,lr,train_loss,val_loss,<metric>`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord], metric: &str) -> Result<()> {
    let mut s = format!("epoch,lr,train_loss,val_loss,{metric}\n");
    for r in history {
        s.push_str(&format!(
            "{},{:e},{:.9e},{:.9e},{:.6}\n",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_metric
        ));
    }
    write_file(path, s.as_bytes())
}

type LossGrad<'a> = dyn Fn(&MatcherModel, usize) -> Result<(f64, MatcherModel)> + Sync + 'a;
type Validate<'a> = dyn Fn(&MatcherModel) -> Result<(f64, f64)> + 'a;

/// Shared mini-batch loop: Adam with a per-step cosine schedule, batch
/// items evaluated in parallel and summed in batch order. The kept
/// checkpoint has the lowest validation loss, or with `by_metric` the
/// highest validation metric with ties going to the lower loss.
fn fit(
    init: MatcherModel,
    n: usize,
    lr0: f64,
    mask: Option<Vec<bool>>,
    by_metric: bool,
    loss_grad: &LossGrad<'_>,
    validate: &Validate<'_>,
) -> Result<TrainResult> {
    if n == 0 {
        return Err(Error::invalid("training split is empty"));
    }
    let cfg = init.config.clone();
    let mut model = init;
    let mut params = model.flatten();
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_0A11);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), (f64::INFINITY, f64::INFINITY), 0usize);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = lr0;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, lr0);
            let parts: Vec<(f64, MatcherModel)> = batch
                .par_iter()
                .map(|&i| loss_grad(&model, i))
                .collect::<Result<_>>()?;
            let mut grads = model.zeros_like();
            let mut batch_loss = 0.0;
            for (l, g) in &parts {
                batch_loss += l;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            let bad = if !batch_loss.is_finite() {
                Some("non-finite loss".to_string())
            } else {
                grads
                    .first_non_finite()
                    .map(|name| format!("non-finite gradient in {name}"))
            };
            if let Some(reason) = bad {
                log::error!("epoch {epoch}: {reason}");
                return Ok(TrainResult {
                    model: best.0,
                    best_epoch: best.2,
                    history,
                    diverged: Some(Error::Diverged { epoch, reason }),
                });
            }
            loss_sum += batch_loss;
            adam_step(&mut params, &grads.flatten(), &mut state, lr, mask.as_deref());
            model.assign_flat(&params);
            step += 1;
        }
        let train_loss = loss_sum / n as f64;
        let (val_loss, val_metric) = validate(&model)?;
        let loss = if val_loss.is_finite() { val_loss } else { train_loss };
        let select = if by_metric && val_metric.is_finite() { (-val_metric, loss) } else { (loss, 0.0) };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.5e} val {val_loss:.5e} metric {val_metric:.4}"
        );
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_metric,
        });
        if select < best.1 {
            best = (model.clone(), select, epoch);
        }
    }
    Ok(TrainResult {
        model: best.0,
        best_epoch: best.2,
        history,
        diverged: None,
    })
}

/// Minimizes MSE against the normalized ground-truth matrices. The model's
/// own config supplies epochs, batch size, and seed.
pub fn train_correspondence(
    init: MatcherModel,
    train: &[Example],
    val: &[Example],
    lr0: f64,
) -> Result<TrainResult> {
    let loss_grad = |m: &MatcherModel, i: usize| {
        let ex = &train[i];
        m.correspondence_loss_grad(&ex.view1, &ex.view2, &ex.target())
    };
    let validate = |m: &MatcherModel| -> Result<(f64, f64)> {
        if val.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let (report, _) = evaluate_correspondence(m, val, DEFAULT_GT_THRESHOLD, DEFAULT_PRED_THRESHOLD)?;
        Ok((report.mse, report.average_precision))
    };
    fit(init, train.len(), lr0, None, false, &loss_grad, &validate)
}

/// Predicted correspondence used as an attention bias.
pub fn predict_bias(model: &MatcherModel, ex: &Example) -> Result<Array2<f64>> {
    model.predict_correspondence(&ex.view1, &ex.view2)
}

fn resolve_biases(
    examples: &[Example],
    fusion: Fusion,
    source: BiasSource,
    bias_model: Option<&MatcherModel>,
) -> Result<Vec<Option<Array2<f64>>>> {
    if fusion != Fusion::Early || source == BiasSource::None {
        return Ok(vec![None; examples.len()]);
    }
    match source {
        BiasSource::GroundTruth => Ok(examples.iter().map(|e| Some(e.target())).collect()),
        BiasSource::Predicted => {
            let m = bias_model
                .ok_or_else(|| Error::invalid("predicted bias requires a correspondence model"))?;
            examples.par_iter().map(|e| predict_bias(m, e).map(Some)).collect()
        }
        BiasSource::None => unreachable!(),
    }
}

fn labels(examples: &[Example]) -> Result<Vec<bool>> {
    examples
        .iter()
        .map(|e| {
            e.label
                .ok_or_else(|| Error::invalid(format!("sample {} has no label", e.id)))
        })
        .collect()
}

fn trainable_mask(model: &MatcherModel) -> Vec<bool> {
    model
        .tensors()
        .into_iter()
        .flat_map(|(name, _, data)| {
            let keep = name == "cls" || name.starts_with("head.") || name.ends_with(".alpha");
            std::iter::repeat(keep).take(data.len())
        })
        .collect()
}

/// Fine-tunes the classification head (and, unless the config freezes it,
/// the trunk) with binary cross-entropy. `bias_model` supplies predicted
/// correspondences when the bias source is `Predicted`.
pub fn train_classifier(
    init: MatcherModel,
    train: &[Example],
    val: &[Example],
    fusion: Fusion,
    bias_source: BiasSource,
    bias_model: Option<&MatcherModel>,
    lr0: f64,
) -> Result<TrainResult> {
    let y = labels(train)?;
    let bias = resolve_biases(train, fusion, bias_source, bias_model)?;
    let val_bias = resolve_biases(val, fusion, bias_source, bias_model)?;
    let val_y = labels(val)?;
    let mask = init.config.freeze_trunk.then(|| trainable_mask(&init));
    let loss_grad = |m: &MatcherModel, i: usize| {
        let ex = &train[i];
        m.class_loss_grad(&ex.view1, &ex.view2, y[i], fusion, bias[i].as_ref())
    };
    let validate = |m: &MatcherModel| -> Result<(f64, f64)> {
        if val.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let losses: Vec<(f64, f64)> = val
            .par_iter()
            .zip(&val_bias)
            .zip(&val_y)
            .map(|((ex, b), &label)| {
                let logits = m.class_logits(&ex.view1, &ex.view2, fusion, b.as_ref())?;
                let n = logits.len() as f64;
                let loss = logits.iter().map(|&z| super::nn::bce_loss(z, label)).sum::<f64>() / n;
                let p = logits.iter().map(|&z| super::nn::sigmoid(z)).sum::<f64>() / n;
                Ok((loss, p))
            })
            .collect::<Result<_>>()?;
        let loss = losses.iter().map(|l| l.0).sum::<f64>() / val.len() as f64;
        let probs: Vec<f64> = losses.iter().map(|l| l.1).collect();
        let acc = classification_metrics(&probs, &val_y, 0.5)?.accuracy;
        Ok((loss, acc))
    };
    fit(init, train.len(), lr0, mask, true, &loss_grad, &validate)
}

/// Mean correspondence metrics and the per-sample reports.
pub fn evaluate_correspondence(
    model: &MatcherModel,
    examples: &[Example],
    tau_gt: f64,
    tau_pred: f64,
) -> Result<(EvalReport, Vec<EvalReport>)> {
    let reports: Vec<EvalReport> = examples
        .par_iter()
        .map(|ex| {
            let pred = model.predict_correspondence(&ex.view1, &ex.view2)?;
            correspondence_metrics(pred.as_slice().unwrap(), &ex.gt, tau_gt, tau_pred)
        })
        .collect::<Result<_>>()?;
    let mean = mean_report(&reports).ok_or_else(|| Error::invalid("no samples to evaluate"))?;
    Ok((mean, reports))
}

/// Classification metrics and per-sample probabilities.
pub fn evaluate_classifier(
    model: &MatcherModel,
    examples: &[Example],
    fusion: Fusion,
    bias_source: BiasSource,
    bias_model: Option<&MatcherModel>,
) -> Result<(ClassificationReport, Vec<f64>)> {
    let y = labels(examples)?;
    let bias = resolve_biases(examples, fusion, bias_source, bias_model)?;
    let probs: Vec<f64> = examples
        .par_iter()
        .zip(&bias)
        .map(|(ex, b)| model.classify(&ex.view1, &ex.view2, fusion, b.as_ref()))
        .collect::<Result<_>>()?;
    Ok((classification_metrics(&probs, &y, 0.5)?, probs))
}

/// MSE of predicting 0.5 everywhere, averaged over samples.
pub fn constant_baseline_mse(examples: &[Example]) -> f64 {
    let total: f64 = examples
        .iter()
        .map(|ex| {
            let t = ex.target();
            t.iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>() / t.len() as f64
        })
        .sum();
    total / examples.len().max(1) as f64
}
