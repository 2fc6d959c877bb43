use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground truth assigned to the grid cell containing an object's center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTarget {
    /// Center offset within the cell, in `[0, 1]`.
    pub x: f64,
    pub y: f64,
    /// Width/height relative to the full image, in `[0, 1]`.
    pub w: f64,
    pub h: f64,
    pub class: usize,
}

/// Per-image training target: at most one object per cell, row-major over the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTarget {
    grid_size: usize,
    num_classes: usize,
    cells: Vec<Option<CellTarget>>,
}

impl GridTarget {
    pub fn empty(grid_size: usize, num_classes: usize) -> Self {
        Self { grid_size, num_classes, cells: vec![None; grid_size * grid_size] }
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&CellTarget> {
        self.cells[row * self.grid_size + col].as_ref()
    }

    pub fn cells(&self) -> &[Option<CellTarget>] {
        &self.cells
    }

    /// Places an object; fails if the cell is already occupied or the class is unknown.
    pub fn set(&mut self, row: usize, col: usize, target: CellTarget) -> Result<()> {
        if row >= self.grid_size || col >= self.grid_size {
            return Err(Error::invalid(format!("cell ({row}, {col}) outside {0}x{0} grid", self.grid_size)));
        }
        if target.class >= self.num_classes {
            return Err(Error::invalid(format!("class {} ≥ {} classes", target.class, self.num_classes)));
        }
        let slot = &mut self.cells[row * self.grid_size + col];
        if slot.is_some() {
            return Err(Error::invalid(format!("two objects centered in cell ({row}, {col})")));
        }
        *slot = Some(target);
        Ok(())
    }

    pub fn object_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}
