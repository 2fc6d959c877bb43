//! Model checkpoints: magic `FWM1`, little-endian `u32` tensor count, then for each
//! tensor `u32` rank, `u32` dims and `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::detector::{DetectorConfig, ModelParams, Slot};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWM1";

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn u32_of(n: usize, path: &Path) -> Result<[u8; 4]> {
    u32::try_from(n).map(u32::to_le_bytes).map_err(|_| bad(path, format!("{n} does not fit in u32")))
}

/// Writes every tensor of `params` (running statistics included) in slot order.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let slots = params.slots();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&u32_of(slots.len(), path)?)?;
    for slot in slots {
        let t = params.get(slot);
        w.write_all(&u32_of(t.shape().len(), path)?)?;
        for &d in t.shape() {
            w.write_all(&u32_of(d, path)?)?;
        }
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut word = [0u8; 4];
    let mut next = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut word).map_err(|_| bad(path, "truncated"))?;
        Ok(u32::from_le_bytes(word))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad(path, "truncated"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(path, "missing FWM1 magic"));
    }
    let count = next(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let rank = next(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(path, format!("tensor {i} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| next(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes).map_err(|_| bad(path, format!("tensor {i} truncated")))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| bad(path, format!("tensor {i}: {e}")))?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad(path, "trailing bytes"));
    }
    Ok(tensors)
}

/// Rebuilds a model from checkpoint tensors. Widths and class count are recovered from
/// the kernel shapes; `boxes_per_cell` and the input size are not stored and must be given.
pub fn model_from_tensors(tensors: Vec<Tensor>, boxes_per_cell: usize, input_size: (usize, usize)) -> Result<ModelParams> {
    if tensors.len() < 7 || !(tensors.len() - 2).is_multiple_of(5) {
        return Err(Error::Architecture {
            layer: "model".into(),
            reason: format!("{} tensors is not 5 per block plus a head", tensors.len()),
        });
    }
    let blocks = (tensors.len() - 2) / 5;
    let kernel_shape = |i: usize| tensors[i * 5].shape().to_vec();
    let mut widths = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let s = kernel_shape(b);
        if s.len() != 4 {
            return Err(Error::Architecture { layer: Slot::Kernel(b).name(), reason: format!("shape {s:?}") });
        }
        widths.push(s[0]);
    }
    let head = tensors[blocks * 5].shape().to_vec();
    let depth = head[0];
    if depth <= boxes_per_cell * 5 {
        return Err(Error::Architecture {
            layer: Slot::HeadKernel.name(),
            reason: format!("{depth} outputs per cell leave no classes for {boxes_per_cell} boxes"),
        });
    }
    let config = DetectorConfig {
        grid_size: input_size.0 >> blocks,
        boxes_per_cell,
        num_classes: depth - boxes_per_cell * 5,
        channel_widths: widths,
        input_size,
        in_channels: kernel_shape(0)[1],
    };
    ModelParams::from_tensors(&config, tensors)
}
