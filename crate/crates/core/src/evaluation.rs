//! Box overlap, non-maximum suppression and mean average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }
}

/// Intersection over union; 0 when either box has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A scored, classified box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Indices of `scores` sorted descending; equal scores keep their input order.
fn descending_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy per-class suppression. A box is kept iff its IoU with every already kept
/// box of the same class is at most `iou_threshold`. Output is in score order.
pub fn nms(boxes: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::invalid(format!("NMS threshold {iou_threshold} outside [0, 1]")));
    }
    let mut kept: Vec<Detection> = Vec::new();
    for i in descending_order(boxes.iter().map(|b| b.score)) {
        let cand = boxes[i];
        if kept
            .iter()
            .filter(|k| k.class == cand.class)
            .all(|k| iou(&k.bbox, &cand.bbox) <= iou_threshold)
        {
            kept.push(cand);
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    /// Average precision on a 0–100 scale.
    pub ap: f64,
    pub num_ground_truth: usize,
    /// `(recall, precision)` after each ranked detection.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class: Vec<ClassAp>,
    /// Mean of the per-class APs over classes that have ground truth, 0–100.
    pub map: f64,
}

/// All-point interpolated area under a PR curve given in ranking order.
fn all_point_ap(curve: &[(f64, f64)]) -> f64 {
    let mut recall = Vec::with_capacity(curve.len() + 2);
    let mut precision = Vec::with_capacity(curve.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    for &(r, p) in curve {
        recall.push(r);
        precision.push(p);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Per-class AP and mAP over a set of images. `detections[i]` and `ground_truths[i]`
/// belong to image `i`.
pub fn average_precision(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<GroundTruth>],
    iou_threshold: f64,
) -> Result<EvalResult> {
    if detections.len() != ground_truths.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truths.len()
        )));
    }
    let max_class = detections
        .iter()
        .flatten()
        .map(|d| d.class)
        .chain(ground_truths.iter().flatten().map(|g| g.class))
        .max();
    let Some(max_class) = max_class else {
        return Ok(EvalResult { per_class: Vec::new(), map: 0.0 });
    };
    let mut per_class = Vec::new();
    for class in 0..=max_class {
        let num_gt = ground_truths.iter().flatten().filter(|g| g.class == class).count();
        if num_gt == 0 {
            log::debug!("class {class} has no ground truth; excluded from mAP");
            continue;
        }
        let ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (img, d)))
            .collect();
        let order = descending_order(ranked.iter().map(|(_, d)| d.score));
        let mut matched: Vec<Vec<bool>> = ground_truths.iter().map(|g| vec![false; g.len()]).collect();
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut curve = Vec::with_capacity(order.len());
        for idx in order {
            let (img, det) = ranked[idx];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in ground_truths[img].iter().enumerate() {
                if gt.class != class || matched[img][gi] {
                    continue;
                }
                let o = iou(&det.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, o)) if o >= iou_threshold => {
                    matched[img][gi] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            curve.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
        per_class.push(ClassAp { class, ap: 100.0 * all_point_ap(&curve), num_ground_truth: num_gt, pr_curve: curve });
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(EvalResult { per_class, map })
}
