use serde::{Deserialize, Serialize};

use super::DetectorConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evaluation::{BBox, Detection};

/// One predicted box in cell-relative form, as laid out in the prediction tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub class_probs: Vec<f64>,
}

fn check(pred: &Tensor, cfg: &DetectorConfig) -> Result<usize> {
    let s = cfg.grid_size;
    match *pred.shape() {
        [n, a, b, d] if a == s && b == s && d == cfg.cell_depth() => Ok(n),
        ref other => Err(Error::shape(format!(
            "expected predictions [N, {s}, {s}, {}], got {other:?}",
            cfg.cell_depth()
        ))),
    }
}

/// Reads the raw box `b` of cell `(row, col)` of image `img`.
pub fn read_box(pred: &Tensor, cfg: &DetectorConfig, img: usize, row: usize, col: usize, b: usize) -> DetectionBox {
    let s = cfg.grid_size;
    let depth = cfg.cell_depth();
    let base = ((img * s + row) * s + col) * depth;
    let cell = &pred.data()[base..base + depth];
    let o = b * 5;
    DetectionBox {
        x: cell[o],
        y: cell[o + 1],
        w: cell[o + 2],
        h: cell[o + 3],
        confidence: cell[o + 4],
        class_probs: cell[cfg.boxes_per_cell * 5..].to_vec(),
    }
}

/// Converts predictions to pixel-space detections per image. Boxes whose confidence is
/// below `conf_threshold` are dropped; the class is the argmax probability and the
/// score is `confidence · max(P)`.
pub fn decode(pred: &Tensor, cfg: &DetectorConfig, conf_threshold: f64) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::invalid(format!("confidence threshold {conf_threshold} outside [0, 1]")));
    }
    let n = check(pred, cfg)?;
    let s = cfg.grid_size;
    let (img_h, img_w) = (cfg.input_size.0 as f64, cfg.input_size.1 as f64);
    let (cell_h, cell_w) = (img_h / s as f64, img_w / s as f64);
    let mut out = Vec::with_capacity(n);
    for img in 0..n {
        let mut dets = Vec::new();
        for row in 0..s {
            for col in 0..s {
                for b in 0..cfg.boxes_per_cell {
                    let bx = read_box(pred, cfg, img, row, col, b);
                    if bx.confidence < conf_threshold {
                        continue;
                    }
                    let (class, p) = bx
                        .class_probs
                        .iter()
                        .copied()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (k, p)| if p > best.1 { (k, p) } else { best });
                    let bbox = BBox::from_center(
                        (col as f64 + bx.x) * cell_w,
                        (row as f64 + bx.y) * cell_h,
                        bx.w * img_w,
                        bx.h * img_h,
                    );
                    dets.push(Detection { bbox, class, score: bx.confidence * p });
                }
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Builds a single-image prediction tensor that decodes back to `detections`: each box
/// goes to the cell holding its center, one-hot class probability, confidence = score.
pub fn encode_detections(detections: &[Detection], cfg: &DetectorConfig) -> Result<Tensor> {
    let s = cfg.grid_size;
    let depth = cfg.cell_depth();
    let (img_h, img_w) = (cfg.input_size.0 as f64, cfg.input_size.1 as f64);
    let (cell_h, cell_w) = (img_h / s as f64, img_w / s as f64);
    let mut pred = Tensor::zeros(&[1, s, s, depth]);
    let mut used = vec![0usize; s * s];
    let mut cell_class: Vec<Option<usize>> = vec![None; s * s];
    for d in detections {
        let (cx, cy) = d.bbox.center();
        let col = ((cx / cell_w).floor() as isize).clamp(0, s as isize - 1) as usize;
        let row = ((cy / cell_h).floor() as isize).clamp(0, s as isize - 1) as usize;
        let cell = row * s + col;
        if used[cell] == cfg.boxes_per_cell {
            return Err(Error::invalid(format!("more than {} boxes in cell ({row}, {col})", cfg.boxes_per_cell)));
        }
        if d.class >= cfg.num_classes || cell_class[cell].is_some_and(|c| c != d.class) {
            return Err(Error::invalid(format!("class {} cannot be encoded in cell ({row}, {col})", d.class)));
        }
        let base = cell * depth;
        let o = base + used[cell] * 5;
        let data = pred.data_mut();
        data[o] = cx / cell_w - col as f64;
        data[o + 1] = cy / cell_h - row as f64;
        data[o + 2] = d.bbox.width() / img_w;
        data[o + 3] = d.bbox.height() / img_h;
        data[o + 4] = d.score;
        data[base + cfg.boxes_per_cell * 5 + d.class] = 1.0;
        cell_class[cell] = Some(d.class);
        used[cell] += 1;
    }
    Ok(pred)
}
