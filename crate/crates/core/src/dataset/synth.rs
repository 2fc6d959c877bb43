use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedObject, Annotation, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evaluation::BBox;
use crate::rng::derive_seed;

/// Shape classes and their class ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle = 0,
    Square = 1,
    Triangle = 2,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn id(self) -> usize {
        self as usize
    }

    /// Fill color (RGB) of the class.
    fn color(self) -> [f64; 3] {
        match self {
            ShapeClass::Circle => [0.95, 0.25, 0.2],
            ShapeClass::Square => [0.2, 0.85, 0.3],
            ShapeClass::Triangle => [0.25, 0.35, 0.95],
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.trim() {
            "circle" => Some(Self::Circle),
            "square" => Some(Self::Square),
            "triangle" => Some(Self::Triangle),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }
}

/// Parameters of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ShapeClass>,
    /// Object side length as a fraction of the smaller image side.
    pub size_range: (f64, f64),
    /// Amplitude of uniform background noise.
    pub noise: f64,
    /// Grid used to enforce one object center per cell.
    pub grid_size: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            min_objects: 1,
            max_objects: 3,
            classes: ShapeClass::ALL.to_vec(),
            size_range: (0.2, 0.4),
            noise: 0.1,
            grid_size: 4,
            seed: 0,
        }
    }
}

const BACKGROUND: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 200;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 4 || w < 4 {
            return Err(Error::Generation(format!("image size {h}x{w} too small")));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Generation("min_objects exceeds max_objects".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Generation("no shape classes".into()));
        }
        if self.grid_size == 0 || self.max_objects > self.grid_size * self.grid_size {
            return Err(Error::Generation(format!(
                "{} objects cannot have distinct centers on a {}x{} grid",
                self.max_objects, self.grid_size, self.grid_size
            )));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Generation(format!("size range ({lo}, {hi}) must satisfy 0 < lo ≤ hi < 1")));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Generation("noise amplitude must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Pixels covered by one shape, and their exact extent.
struct Raster {
    pixels: Vec<(usize, usize)>,
    bbox: BBox,
}

fn rasterize(class: ShapeClass, cx: f64, cy: f64, side: f64, (h, w): (usize, usize)) -> Option<Raster> {
    let half = side / 2.0;
    let inside = |px: f64, py: f64| -> bool {
        match class {
            ShapeClass::Square => (px - cx).abs() <= half && (py - cy).abs() <= half,
            ShapeClass::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= half * half,
            ShapeClass::Triangle => {
                // apex up, base down
                let t = (py - (cy - half)) / side;
                (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * half
            }
        }
    };
    let x0 = (cx - half).floor().max(0.0) as usize;
    let y0 = (cy - half).floor().max(0.0) as usize;
    let x1 = ((cx + half).ceil() as usize).min(w - 1);
    let y1 = ((cy + half).ceil() as usize).min(h - 1);
    let mut pixels = Vec::new();
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                pixels.push((x, y));
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    if pixels.is_empty() {
        return None;
    }
    let bbox = BBox::new(min_x as f64, min_y as f64, (max_x + 1) as f64, (max_y + 1) as f64);
    Some(Raster { pixels, bbox })
}

fn cell_of(bbox: &BBox, grid: usize, (h, w): (usize, usize)) -> usize {
    let (cx, cy) = bbox.center();
    let col = ((cx / (w as f64 / grid as f64)) as usize).min(grid - 1);
    let row = ((cy / (h as f64 / grid as f64)) as usize).min(grid - 1);
    row * grid + col
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x_min < b.x_max + 1.0 && b.x_min < a.x_max + 1.0 && a.y_min < b.y_max + 1.0 && b.y_min < a.y_max + 1.0
}

/// Renders image `index` of the stream described by `spec`.
pub fn generate_one(spec: &SceneSpec, index: usize) -> Result<Sample> {
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5343_454e, index as u64]));
    let mut pixels: Vec<f64> = Vec::with_capacity(3 * h * w);
    for _ in 0..3 * h * w {
        let n = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
        pixels.push((BACKGROUND + n).clamp(0.0, 1.0));
    }
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let min_side = h.min(w) as f64;
    let mut placed: Vec<(ShapeClass, Raster)> = Vec::with_capacity(count);
    let mut used_cells = Vec::with_capacity(count);
    for _ in 0..count {
        let class = spec.classes[rng.gen_range(0..spec.classes.len())];
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = (rng.gen_range(spec.size_range.0..=spec.size_range.1) * min_side).max(3.0);
            let half = side / 2.0;
            if side + 2.0 >= min_side {
                continue;
            }
            let cx = rng.gen_range(half + 1.0..=w as f64 - half - 1.0);
            let cy = rng.gen_range(half + 1.0..=h as f64 - half - 1.0);
            let Some(r) = rasterize(class, cx, cy, side, (h, w)) else { continue };
            let cell = cell_of(&r.bbox, spec.grid_size, (h, w));
            if used_cells.contains(&cell) || placed.iter().any(|(_, p)| overlaps(&p.bbox, &r.bbox)) {
                continue;
            }
            ok = Some((r, cell));
            break;
        }
        let (raster, cell) = ok.ok_or_else(|| {
            Error::Generation(format!("could not place {count} objects in image {index} without overlap"))
        })?;
        used_cells.push(cell);
        placed.push((class, raster));
    }
    let mut objects = Vec::with_capacity(placed.len());
    for (class, raster) in placed {
        let color = class.color();
        for &(x, y) in &raster.pixels {
            for (ch, &c) in color.iter().enumerate() {
                let n = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) * 0.5 } else { 0.0 };
                pixels[(ch * h + y) * w + x] = (c + n).clamp(0.0, 1.0);
            }
        }
        objects.push(AnnotatedObject { class: class.id(), bbox: raster.bbox });
    }
    // stored values are exactly representable in the on-disk f32 format
    pixels.iter_mut().for_each(|v| *v = *v as f32 as f64);
    let image = Tensor::new(vec![3, h, w], pixels)?;
    Ok(Sample { image, annotation: Annotation { objects } })
}

/// Generates `count` images deterministically from `spec.seed`.
pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Generation("count must be at least 1".into()));
    }
    (0..count).map(|i| generate_one(spec, i)).collect()
}
