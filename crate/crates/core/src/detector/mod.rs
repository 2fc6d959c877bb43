//! Grid detector: conv → batch norm → leaky ReLU → max-pool blocks and a 1×1 head
//! predicting `B` boxes plus class probabilities per cell.

mod config;
mod decode;
mod loss;
mod model;
mod params;
mod target;

pub use config::DetectorConfig;
pub use decode::{decode, encode_detections, read_box, DetectionBox};
pub use loss::{responsible_box, yolo_loss, yolo_loss_value, ConfidenceTarget, LossBreakdown, LossConfig};
pub use model::{forward, ForwardPass};
pub use params::{build_model, ConvBlock, DetectionHead, ModelParams, ParamVars, Slot, GAMMA_INIT};
pub use target::{CellTarget, GridTarget};
