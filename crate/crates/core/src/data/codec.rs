//! Dataset file format: magic "FSDS", u32 version, u32 example count,
//! u16 C/H/W, u16 class count, class-name table (u16 length + bytes each),
//! then per example a u16 label followed by `C*H*W` raw u8 pixels. All
//! integers little-endian. One file per split.

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

use super::Dataset;

const DATASET_MAGIC: &[u8; 4] = b"FSDS";
const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    for (what, value) in [
        ("examples", dataset.len()),
        ("channels", dataset.channels()),
        ("height", dataset.height()),
        ("width", dataset.width()),
        ("classes", dataset.classes()),
    ] {
        let limit = if what == "examples" {
            u32::MAX as usize
        } else {
            u16::MAX as usize
        };
        if value > limit {
            return Err(Error::Config(format!(
                "{what} count {value} exceeds the format limit {limit}"
            )));
        }
    }
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(dataset.len() as u32);
    w.u16(dataset.channels() as u16);
    w.u16(dataset.height() as u16);
    w.u16(dataset.width() as u16);
    w.u16(dataset.classes() as u16);
    for name in dataset.class_names() {
        if name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("class name '{name}' is too long")));
        }
        w.u16(name.len() as u16);
        w.bytes(name.as_bytes());
    }
    let size = dataset.example_size();
    for i in 0..dataset.len() {
        w.u16(dataset.labels()[i]);
        w.bytes(&dataset.raw_pixels()[i * size..(i + 1) * size]);
    }
    Ok(w.into_vec())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC, "dataset")?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.fail(format!("unsupported dataset version {version}")));
    }
    let count = r.u32()? as usize;
    let channels = r.u16()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let classes = r.u16()? as usize;
    if channels == 0 || height == 0 || width == 0 {
        return Err(r.fail(format!(
            "image extents must be positive, got {channels}x{height}x{width}"
        )));
    }
    let mut class_names = Vec::with_capacity(classes);
    for _ in 0..classes {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.fail("class name is not valid UTF-8"))?
            .to_string();
        class_names.push(name);
    }
    let size = channels * height * width;
    let mut labels = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count * size);
    for i in 0..count {
        let label_offset = r.offset();
        let label = r.u16()?;
        if label as usize >= classes {
            return Err(Error::Format {
                offset: label_offset,
                msg: format!("example {i} has label {label}, but there are {classes} classes"),
            });
        }
        labels.push(label);
        images.extend_from_slice(r.take(size)?);
    }
    r.finish()?;
    Dataset::new(channels, height, width, images, labels, class_names)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_dataset(dataset)?)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
