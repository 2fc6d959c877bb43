//! Single SGD steps on the full objective and held-out evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::GradTape;
use crate::dataset::Dataset;
use crate::detector::{decode, forward, yolo_loss, yolo_loss_value, GridTarget, LossBreakdown, LossConfig, ModelParams};
use crate::error::{Error, Result};
use crate::evaluation::{average_precision, nms, EvalResult};
use crate::sparsifier::l1_penalty;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub detection: LossBreakdown,
    pub penalty: f64,
}

impl StepOutcome {
    /// Full objective `L + λ·Σ|γ|`.
    pub fn objective(&self) -> f64 {
        self.detection.total + self.penalty
    }
}

/// One forward/backward/update on a batch: `w ← w − α·∇(L + λ·Σ|γ|)`.
pub fn train_step(
    params: &mut ModelParams,
    images: &Tensor,
    targets: &[GridTarget],
    loss_cfg: &LossConfig,
    lambda: f64,
    learning_rate: f64,
) -> Result<StepOutcome> {
    let mut tape = GradTape::new();
    let x = tape.constant(images.clone());
    let pass = forward(&mut tape, params, x, true)?;
    let (det, breakdown) = yolo_loss(&mut tape, pass.output, targets, loss_cfg)?;
    let (loss, penalty) = if lambda > 0.0 {
        let pen = l1_penalty(&mut tape, &pass.vars, lambda)?;
        let value = tape.value(pen).item()?;
        (tape.add(det, pen)?, value)
    } else {
        (det, 0.0)
    };
    let outcome = StepOutcome { detection: breakdown, penalty };
    if !outcome.objective().is_finite() {
        return Err(Error::invalid(format!("non-finite loss {}", outcome.objective())));
    }
    let grads = tape.backward(loss)?;
    params.set_grads(&pass.vars, &grads)?;
    params.sgd_step(learning_rate)?;
    params.update_running_stats(&pass.batch_stats);
    Ok(outcome)
}

/// Decoding and matching thresholds used for mAP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { conf_threshold: 0.25, nms_iou: 0.45, match_iou: 0.5, batch_size: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean detection loss per image (no penalty term).
    pub loss: f64,
    pub metrics: EvalResult,
}

/// Inference-mode loss and mAP over a dataset.
pub fn evaluate(params: &ModelParams, data: &Dataset, loss_cfg: &LossConfig, settings: &EvalSettings) -> Result<Evaluation> {
    let mut detections = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(settings.batch_size.max(1)) {
        let (images, targets) = data.batch(chunk);
        let pred = params.predict(&images)?;
        let (l, _) = yolo_loss_value(&pred, &targets, loss_cfg)?;
        loss_sum += l.total * chunk.len() as f64;
        for dets in decode(&pred, params.config(), settings.conf_threshold)? {
            detections.push(nms(&dets, settings.nms_iou)?);
        }
    }
    let metrics = average_precision(&detections, &data.ground_truths(), settings.match_iou)?;
    Ok(Evaluation { loss: loss_sum / data.len() as f64, metrics })
}
