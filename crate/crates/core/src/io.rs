//! Binary field (`LEF1`) and labeling (`LEL1`) files.
//!
//! Both formats are little-endian: a four-byte magic, three `u32` header
//! words, then the payload. `LEF1` stores `height, width, channels` followed
//! by `f32` values row-major with the channel innermost; `LEL1` stores
//! `height, width, num_instances` followed by one `u16` label per pixel.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{FieldF32, InstanceLabeling};

pub const FIELD_MAGIC: &[u8; 4] = b"LEF1";
pub const LABELING_MAGIC: &[u8; 4] = b"LEL1";

pub fn write_field<W: Write>(mut w: W, field: &FieldF32) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + field.data().len() * 4);
    buf.extend_from_slice(FIELD_MAGIC);
    for v in [field.height(), field.width(), field.channels()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in field.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_field<R: Read>(mut r: R) -> Result<FieldF32> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| format_err("LEF1", e.to_string()))?;
    decode_field(&bytes)
}

pub fn decode_field(bytes: &[u8]) -> Result<FieldF32> {
    let [h, w, c] = header(bytes, FIELD_MAGIC, "LEF1")?;
    let n = h * w * c;
    let payload = &bytes[16..];
    if payload.len() != n * 4 {
        return Err(format_err(
            "LEF1",
            format!("expected {} payload bytes, found {}", n * 4, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    FieldF32::from_vec(h, w, c, data)
}

pub fn write_labeling<W: Write>(mut w: W, labeling: &InstanceLabeling) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + labeling.labels().len() * 2);
    buf.extend_from_slice(LABELING_MAGIC);
    for v in [labeling.height(), labeling.width(), labeling.num_instances()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for l in labeling.labels() {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_labeling<R: Read>(mut r: R) -> Result<InstanceLabeling> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| format_err("LEL1", e.to_string()))?;
    decode_labeling(&bytes)
}

pub fn decode_labeling(bytes: &[u8]) -> Result<InstanceLabeling> {
    let [h, w, k] = header(bytes, LABELING_MAGIC, "LEL1")?;
    let payload = &bytes[16..];
    if payload.len() != h * w * 2 {
        return Err(format_err(
            "LEL1",
            format!("expected {} payload bytes, found {}", h * w * 2, payload.len()),
        ));
    }
    let labels = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    InstanceLabeling::new(h, w, k, labels)
}

pub fn save_field(path: impl AsRef<Path>, field: &FieldF32) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_field(&mut bytes, field).expect("writing to a Vec cannot fail");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<FieldF32> {
    let path = path.as_ref();
    decode_field(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_labeling(path: impl AsRef<Path>, labeling: &InstanceLabeling) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_labeling(&mut bytes, labeling).expect("writing to a Vec cannot fail");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_labeling(path: impl AsRef<Path>) -> Result<InstanceLabeling> {
    let path = path.as_ref();
    decode_labeling(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn header(bytes: &[u8], magic: &[u8; 4], format: &'static str) -> Result<[usize; 3]> {
    if bytes.len() < 16 {
        return Err(format_err(format, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(format_err(format, "bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    Ok([word(0), word(1), word(2)])
}

fn format_err(format: &'static str, reason: String) -> Error {
    Error::Format { format, reason }
}
