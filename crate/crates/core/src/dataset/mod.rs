//! Synthetic shape-detection data, client partitioning and grid targets.

mod format;
mod synth;

pub use format::{
    load_split, read_annotations, read_images, save_split, write_annotations, write_images, ANNOTATION_SUFFIX,
    IMAGE_MAGIC, IMAGE_SUFFIX,
};
pub use synth::{generate, generate_one, SceneSpec, ShapeClass};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::detector::{CellTarget, GridTarget};
use crate::error::{Error, Result};
use crate::evaluation::{BBox, GroundTruth};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub class: usize,
    pub bbox: BBox,
}

/// Objects of one image; boxes in pixels, `(x_min, y_min, x_max, y_max)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub objects: Vec<AnnotatedObject>,
}

impl Annotation {
    pub fn validate(&self, (h, w): (usize, usize)) -> Result<()> {
        for o in &self.objects {
            let b = o.bbox;
            if !(b.x_min < b.x_max && b.y_min < b.y_max) {
                return Err(Error::invalid(format!("degenerate box {b:?}")));
            }
            if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > w as f64 || b.y_max > h as f64 {
                return Err(Error::invalid(format!("box {b:?} outside {w}x{h} image")));
            }
        }
        Ok(())
    }

    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.objects.iter().map(|o| GroundTruth { bbox: o.bbox, class: o.class }).collect()
    }
}

/// One image `[C, H, W]` with its annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub annotation: Annotation,
}

/// Splits `len` items into `num_clients` disjoint, equal-size random subsets of indices.
/// The `len mod num_clients` leftover items are unassigned.
pub fn partition<R: Rng + ?Sized>(len: usize, num_clients: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if num_clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if len < num_clients {
        return Err(Error::invalid(format!("{len} images cannot be split across {num_clients} clients")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    let per = len / num_clients;
    Ok(idx.chunks_exact(per).take(num_clients).map(|c| c.to_vec()).collect())
}

/// Assigns each object to the cell containing its box center.
pub fn encode_grid_target(
    annotation: &Annotation,
    grid_size: usize,
    (h, w): (usize, usize),
    num_classes: usize,
) -> Result<GridTarget> {
    let mut t = GridTarget::empty(grid_size, num_classes);
    let (cell_w, cell_h) = (w as f64 / grid_size as f64, h as f64 / grid_size as f64);
    for o in &annotation.objects {
        let (cx, cy) = o.bbox.center();
        let col = ((cx / cell_w).floor() as usize).min(grid_size - 1);
        let row = ((cy / cell_h).floor() as usize).min(grid_size - 1);
        t.set(
            row,
            col,
            CellTarget {
                x: cx / cell_w - col as f64,
                y: cy / cell_h - row as f64,
                w: o.bbox.width() / w as f64,
                h: o.bbox.height() / h as f64,
                class: o.class,
            },
        )?;
    }
    Ok(t)
}

/// Samples with their precomputed grid targets.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub targets: Vec<GridTarget>,
    image_shape: [usize; 3],
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, grid_size: usize, num_classes: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty dataset"))?;
        let image_shape: [usize; 3] = first
            .image
            .shape()
            .try_into()
            .map_err(|_| Error::shape(format!("images must be [C, H, W], got {:?}", first.image.shape())))?;
        let mut targets = Vec::with_capacity(samples.len());
        for s in &samples {
            if s.image.shape() != image_shape {
                return Err(Error::shape(format!("mixed image shapes {:?} and {image_shape:?}", s.image.shape())));
            }
            s.annotation.validate((image_shape[1], image_shape[2]))?;
            targets.push(encode_grid_target(&s.annotation, grid_size, (image_shape[1], image_shape[2]), num_classes)?);
        }
        Ok(Self { samples, targets, image_shape })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    /// Stacks the images at `indices` into `[N, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<GridTarget>) {
        let per: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
            targets.push(self.targets[i].clone());
        }
        let [c, h, w] = self.image_shape;
        (Tensor::from_parts(vec![indices.len(), c, h, w], data), targets)
    }

    pub fn ground_truths(&self) -> Vec<Vec<GroundTruth>> {
        self.samples.iter().map(|s| s.annotation.ground_truths()).collect()
    }
}
