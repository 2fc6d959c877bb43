use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the grid detector: `channel_widths.len()` conv blocks, each halving
/// the spatial size, followed by a 1×1 head producing `B·5 + classes` values per cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub grid_size: usize,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
    pub channel_widths: Vec<usize>,
    /// `(height, width)` of input images in pixels.
    pub input_size: (usize, usize),
    pub in_channels: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            boxes_per_cell: 2,
            num_classes: 3,
            channel_widths: vec![16, 32, 64, 64],
            input_size: (64, 64),
            in_channels: 3,
        }
    }
}

impl DetectorConfig {
    /// Values predicted per grid cell.
    pub fn cell_depth(&self) -> usize {
        self.boxes_per_cell * 5 + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.boxes_per_cell == 0 || self.num_classes == 0 {
            return Err(Error::invalid(
                "grid_size, boxes_per_cell and num_classes must all be at least 1",
            ));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels must be at least 1"));
        }
        if self.channel_widths.is_empty() {
            return Err(Error::Build { block: 0, reason: "at least one conv block is required".into() });
        }
        let (mut h, mut w) = self.input_size;
        for (block, &width) in self.channel_widths.iter().enumerate() {
            if width == 0 {
                return Err(Error::Build { block, reason: "channel width must be positive".into() });
            }
            if h < 2 || w < 2 {
                return Err(Error::Build {
                    block,
                    reason: format!("spatial size {h}x{w} too small to pool"),
                });
            }
            h /= 2;
            w /= 2;
        }
        if h != self.grid_size || w != self.grid_size {
            return Err(Error::Build {
                block: self.channel_widths.len() - 1,
                reason: format!(
                    "final spatial size {h}x{w} does not match grid {0}x{0} for input {1}x{2}",
                    self.grid_size, self.input_size.0, self.input_size.1
                ),
            });
        }
        Ok(())
    }
}
