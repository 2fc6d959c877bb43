//! On-disk formats.
//!
//! Images: magic `FDS1`, then little-endian `u32` count, channels, height, width, then
//! `count·C·H·W` little-endian `f32` values, row-major.
//!
//! Annotations: one JSON array of `{"image_index": i, "objects": [{"class": c,
//! "box": [x_min, y_min, x_max, y_max]}]}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedObject, Annotation, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::evaluation::BBox;

pub const IMAGE_MAGIC: &[u8; 4] = b"FDS1";
pub const IMAGE_SUFFIX: &str = "fds";
pub const ANNOTATION_SUFFIX: &str = "json";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn write_images(path: &Path, images: &[Tensor]) -> Result<()> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("no images to write"));
    };
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("images must be [C, H, W], got {shape:?}")));
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(IMAGE_MAGIC)?;
    for v in [images.len(), shape[0], shape[1], shape[2]] {
        let v = u32::try_from(v).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        out.write_all(&v.to_le_bytes())?;
    }
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(format!("mixed image shapes {:?} and {shape:?}", img.shape())));
        }
        for &v in img.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_images(path: &Path) -> Result<Vec<Tensor>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != IMAGE_MAGIC {
        return Err(format_err(path, "missing FDS1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (count, c, h, w) = (word(0), word(1), word(2), word(3));
    let per = c * h * w;
    let expected = 20 + 4 * count * per;
    if bytes.len() != expected {
        return Err(format_err(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut values = bytes[20..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64);
    (0..count)
        .map(|_| Tensor::new(vec![c, h, w], values.by_ref().take(per).collect()))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    class: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    image_index: usize,
    objects: Vec<ObjectRecord>,
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let records: Vec<AnnotationRecord> = annotations
        .iter()
        .enumerate()
        .map(|(i, a)| AnnotationRecord {
            image_index: i,
            objects: a
                .objects
                .iter()
                .map(|o| ObjectRecord { class: o.class, bbox: [o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max] })
                .collect(),
        })
        .collect();
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &records)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Reads annotations for `count` images; images without a record have no objects.
pub fn read_annotations(path: &Path, count: usize) -> Result<Vec<Annotation>> {
    let records: Vec<AnnotationRecord> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let mut out = vec![Annotation::default(); count];
    for r in records {
        let slot = out
            .get_mut(r.image_index)
            .ok_or_else(|| format_err(path, format!("image_index {} ≥ {count}", r.image_index)))?;
        slot.objects.extend(r.objects.into_iter().map(|o| AnnotatedObject {
            class: o.class,
            bbox: BBox::new(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]),
        }));
    }
    Ok(out)
}

fn split_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.{IMAGE_SUFFIX}")), dir.join(format!("{name}.{ANNOTATION_SUFFIX}")))
}

/// Writes `<dir>/<name>.fds` and `<dir>/<name>.json`.
pub fn save_split(dir: &Path, name: &str, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (img, ann) = split_paths(dir, name);
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    write_images(&img, &images)?;
    let anns: Vec<Annotation> = samples.iter().map(|s| s.annotation.clone()).collect();
    write_annotations(&ann, &anns)
}

pub fn load_split(dir: &Path, name: &str) -> Result<Vec<Sample>> {
    let (img, ann) = split_paths(dir, name);
    let images = read_images(&img)?;
    let anns = read_annotations(&ann, images.len())?;
    Ok(images.into_iter().zip(anns).map(|(image, annotation)| Sample { image, annotation }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fds");
        std::fs::write(&p, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_images(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.fds");
        write_images(&p, &[Tensor::full(&[1, 2, 3], 0.5)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FDS1");
        assert_eq!(&bytes[4..20], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 6 * 4);
    }
}
