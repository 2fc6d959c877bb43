use serde::{Deserialize, Serialize};

use super::target::{CellTarget, GridTarget};
use crate::autodiff::{GradTape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::{iou, BBox};

/// What the responsible box's confidence is regressed towards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceTarget {
    #[default]
    One,
    /// IoU between the responsible box and the ground truth (held constant).
    Iou,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_class: f64,
    pub lambda_conf: f64,
    /// Weight of the confidence penalty on boxes that are not responsible for an object.
    pub lambda_noobj: f64,
    pub confidence_target: ConfidenceTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_class: 1.0,
            lambda_conf: 1.0,
            lambda_noobj: 0.5,
            confidence_target: ConfidenceTarget::One,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_coord, self.lambda_class, self.lambda_conf, self.lambda_noobj];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("loss weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Unweighted loss components summed over the batch, and the weighted total averaged
/// over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub coord: f64,
    pub class: f64,
    pub conf: f64,
    pub noobj: f64,
    /// Number of times a nonpositive width/height reached the square root.
    pub sqrt_clamps: usize,
}

const LOG_FLOOR: f64 = 1e-12;

/// Box `b` of a cell in image-relative units.
fn cell_box(cell: &[f64], b: usize, row: usize, col: usize, s: f64) -> BBox {
    let o = b * 5;
    BBox::from_center((col as f64 + cell[o]) / s, (row as f64 + cell[o + 1]) / s, cell[o + 2], cell[o + 3])
}

fn target_box(t: &CellTarget, row: usize, col: usize, s: f64) -> BBox {
    BBox::from_center((col as f64 + t.x) / s, (row as f64 + t.y) / s, t.w, t.h)
}

/// Index of the predicted box with the highest IoU against `target`; ties go to the
/// lowest index.
pub fn responsible_box(cell: &[f64], boxes: usize, target: &CellTarget, row: usize, col: usize, s: usize) -> (usize, f64) {
    let gt = target_box(target, row, col, s as f64);
    let mut best = (0, f64::NEG_INFINITY);
    for b in 0..boxes {
        let o = iou(&cell_box(cell, b, row, col, s as f64), &gt);
        if o > best.1 {
            best = (b, o);
        }
    }
    best
}

/// `(√p − √t)²` and its derivative in `p`; a nonpositive `p` is clamped to zero.
fn sqrt_term(p: f64, t: f64, clamps: &mut usize) -> (f64, f64) {
    if p <= 0.0 {
        *clamps += 1;
        let d = t.max(0.0).sqrt();
        return (d * d, 0.0);
    }
    let sp = p.sqrt();
    let d = sp - t.max(0.0).sqrt();
    (d * d, d / sp)
}

/// Binary cross-entropy of prediction `p` against target `t` and its derivative in `p`.
/// Terms with zero weight are skipped, so exact 0/1 predictions on a 0/1 target give 0.
fn bce(p: f64, t: f64) -> (f64, f64) {
    let mut v = 0.0;
    let mut d = 0.0;
    if t > 0.0 {
        let q = p.max(LOG_FLOOR);
        v -= t * q.ln();
        if p > LOG_FLOOR {
            d -= t / p;
        }
    }
    if t < 1.0 {
        let q = (1.0 - p).max(LOG_FLOOR);
        v -= (1.0 - t) * q.ln();
        if 1.0 - p > LOG_FLOOR {
            d += (1.0 - t) / (1.0 - p);
        }
    }
    (v, d)
}

fn check_shapes(pred: &Tensor, targets: &[GridTarget]) -> Result<(usize, usize, usize, usize)> {
    let &[n, s1, s2, depth] = pred.shape() else {
        return Err(Error::shape(format!("predictions must be [N, S, S, D], got {:?}", pred.shape())));
    };
    if targets.len() != n {
        return Err(Error::shape(format!("{n} predictions but {} targets", targets.len())));
    }
    let Some(first) = targets.first() else {
        return Err(Error::shape("empty batch"));
    };
    let (s, classes) = (first.grid_size(), first.num_classes());
    if s1 != s || s2 != s || targets.iter().any(|t| t.grid_size() != s || t.num_classes() != classes) {
        return Err(Error::shape(format!("prediction grid {s1}x{s2} does not match target grid {s}x{s}")));
    }
    if depth < classes + 5 || (depth - classes) % 5 != 0 {
        return Err(Error::shape(format!("cell depth {depth} incompatible with {classes} classes")));
    }
    Ok((n, s, (depth - classes) / 5, classes))
}

/// Loss value and its gradient with respect to every prediction entry.
pub fn yolo_loss_value(pred: &Tensor, targets: &[GridTarget], cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    cfg.validate()?;
    let (n, s, boxes, classes) = check_shapes(pred, targets)?;
    let depth = boxes * 5 + classes;
    let data = pred.data();
    let mut grad = vec![0.0; data.len()];
    let mut out = LossBreakdown::default();
    let scale = 1.0 / n as f64;
    for (img, target) in targets.iter().enumerate() {
        for row in 0..s {
            for col in 0..s {
                let base = ((img * s + row) * s + col) * depth;
                let cell = &data[base..base + depth];
                let g = &mut grad[base..base + depth];
                let responsible = match target.cell(row, col) {
                    None => None,
                    Some(t) => {
                        let (r, overlap) = responsible_box(cell, boxes, t, row, col, s);
                        let o = r * 5;
                        let dx = cell[o] - t.x;
                        let dy = cell[o + 1] - t.y;
                        let (tw, gw) = sqrt_term(cell[o + 2], t.w, &mut out.sqrt_clamps);
                        let (th, gh) = sqrt_term(cell[o + 3], t.h, &mut out.sqrt_clamps);
                        out.coord += dx * dx + dy * dy + tw + th;
                        let kc = cfg.lambda_coord * scale;
                        g[o] += kc * 2.0 * dx;
                        g[o + 1] += kc * 2.0 * dy;
                        g[o + 2] += kc * gw;
                        g[o + 3] += kc * gh;

                        let c_target = match cfg.confidence_target {
                            ConfidenceTarget::One => 1.0,
                            ConfidenceTarget::Iou => overlap,
                        };
                        let dc = cell[o + 4] - c_target;
                        out.conf += dc * dc;
                        g[o + 4] += cfg.lambda_conf * scale * 2.0 * dc;

                        for k in 0..classes {
                            let p = cell[boxes * 5 + k];
                            let (v, d) = bce(p, if k == t.class { 1.0 } else { 0.0 });
                            out.class += v;
                            g[boxes * 5 + k] += cfg.lambda_class * scale * d;
                        }
                        Some(r)
                    }
                };
                for b in (0..boxes).filter(|&b| Some(b) != responsible) {
                    let c = cell[b * 5 + 4];
                    out.noobj += c * c;
                    g[b * 5 + 4] += cfg.lambda_noobj * scale * 2.0 * c;
                }
            }
        }
    }
    out.total = scale
        * (cfg.lambda_coord * out.coord
            + cfg.lambda_class * out.class
            + cfg.lambda_conf * out.conf
            + cfg.lambda_noobj * out.noobj);
    Ok((out, grad))
}

/// Records the detection loss of `pred` on the tape.
pub fn yolo_loss(tape: &mut GradTape, pred: Var, targets: &[GridTarget], cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let (breakdown, grad) = yolo_loss_value(tape.value(pred), targets, cfg)?;
    let var = tape.custom_scalar(pred, breakdown.total, grad)?;
    Ok((var, breakdown))
}
