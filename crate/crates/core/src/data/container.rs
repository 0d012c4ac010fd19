//! On-disk sample container ("DGDS") for generated datasets.
//!
//! Layout, little-endian after the magic:
//!
//! ```text
//! magic           4 bytes  "DGDS"
//! version         u16      (currently 1)
//! truth_kind      u8       0 = class labels, 1 = landmarks
//! reserved        u8       0
//! sample_count    u32
//! height          u16
//! width           u16
//! channels        u16
//! rng_seed        u64
//! name_len        u16      followed by that many UTF-8 bytes
//! per sample:
//!   domain_tag    u8
//!   truth         class: u32 label | landmarks: 17 x 2 x f64
//!   pixels        h*w*c x u8   (value 255 == 1.0; quantized for storage)
//! ```
//!
//! Pixels are stored quantized to u8 — this is an inspection and transport
//! container, and the training pipeline dequantizes at the flow input
//! anyway. Reads and writes are deterministic.

use super::{DatasetSplit, DomainTag, ImageSample, Truth, LANDMARK_COUNT};
use crate::error::{DegiaError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DGDS";
const VERSION: u16 = 1;

pub fn write_dgds(split: &DatasetSplit, path: &Path) -> Result<()> {
    let first = split
        .samples
        .first()
        .ok_or_else(|| DegiaError::contract("write_dgds", "empty split".to_string()))?;
    let truth_kind = match first.truth {
        Truth::Class(_) => 0u8,
        Truth::Landmarks(_) => 1u8,
    };
    let (h, w, c) = (first.height, first.width, first.channels);

    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_u16::<LittleEndian>(VERSION)?;
    buf.write_u8(truth_kind)?;
    buf.write_u8(0)?;
    buf.write_u32::<LittleEndian>(split.len() as u32)?;
    buf.write_u16::<LittleEndian>(h as u16)?;
    buf.write_u16::<LittleEndian>(w as u16)?;
    buf.write_u16::<LittleEndian>(c as u16)?;
    buf.write_u64::<LittleEndian>(split.rng_seed)?;
    let name = split.split_name.as_bytes();
    buf.write_u16::<LittleEndian>(name.len() as u16)?;
    buf.write_all(name)?;

    for (i, s) in split.samples.iter().enumerate() {
        if (s.height, s.width, s.channels) != (h, w, c) {
            return Err(DegiaError::Consistency(format!(
                "sample {i} shape {}x{}x{} differs from split shape {h}x{w}x{c}",
                s.height, s.width, s.channels
            )));
        }
        buf.write_u8(s.domain.as_u8())?;
        match (&s.truth, truth_kind) {
            (Truth::Class(label), 0) => buf.write_u32::<LittleEndian>(*label as u32)?,
            (Truth::Landmarks(pts), 1) => {
                for p in pts {
                    buf.write_f64::<LittleEndian>(p[0])?;
                    buf.write_f64::<LittleEndian>(p[1])?;
                }
            }
            _ => {
                return Err(DegiaError::Consistency(format!(
                    "sample {i} truth kind differs from split truth kind"
                )))
            }
        }
        for &p in &s.pixels {
            buf.write_u8((p.clamp(0.0, 1.0) * 255.0).round() as u8)?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_dgds(path: &Path) -> Result<DatasetSplit> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor::new(bytes.as_slice());

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| DegiaError::Length(format!("{}: shorter than magic", path.display())))?;
    if &magic != MAGIC {
        return Err(DegiaError::Format(format!(
            "{}: bad magic {magic:?} at byte offset 0, expected {MAGIC:?}",
            path.display()
        )));
    }
    let truncated = |what: &str| DegiaError::Length(format!("{}: truncated at {what}", path.display()));
    let version = cur.read_u16::<LittleEndian>().map_err(|_| truncated("version"))?;
    if version != VERSION {
        return Err(DegiaError::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let truth_kind = cur.read_u8().map_err(|_| truncated("truth_kind"))?;
    let _reserved = cur.read_u8().map_err(|_| truncated("reserved"))?;
    let count = cur.read_u32::<LittleEndian>().map_err(|_| truncated("count"))? as usize;
    let h = cur.read_u16::<LittleEndian>().map_err(|_| truncated("height"))? as usize;
    let w = cur.read_u16::<LittleEndian>().map_err(|_| truncated("width"))? as usize;
    let c = cur.read_u16::<LittleEndian>().map_err(|_| truncated("channels"))? as usize;
    let rng_seed = cur.read_u64::<LittleEndian>().map_err(|_| truncated("rng_seed"))?;
    let name_len = cur.read_u16::<LittleEndian>().map_err(|_| truncated("name_len"))? as usize;
    let mut name_bytes = vec![0u8; name_len];
    cur.read_exact(&mut name_bytes).map_err(|_| truncated("split name"))?;
    let split_name = String::from_utf8(name_bytes)
        .map_err(|_| DegiaError::Format(format!("{}: split name is not UTF-8", path.display())))?;

    let mut split = DatasetSplit::new(split_name, rng_seed);
    split.samples.reserve(count);
    for i in 0..count {
        let domain = DomainTag::from_u8(cur.read_u8().map_err(|_| truncated(&format!("sample {i} tag")))?)?;
        let truth = match truth_kind {
            0 => Truth::Class(
                cur.read_u32::<LittleEndian>()
                    .map_err(|_| truncated(&format!("sample {i} label")))? as usize,
            ),
            1 => {
                let mut pts = Vec::with_capacity(LANDMARK_COUNT);
                for _ in 0..LANDMARK_COUNT {
                    let x = cur
                        .read_f64::<LittleEndian>()
                        .map_err(|_| truncated(&format!("sample {i} landmarks")))?;
                    let y = cur
                        .read_f64::<LittleEndian>()
                        .map_err(|_| truncated(&format!("sample {i} landmarks")))?;
                    pts.push([x, y]);
                }
                Truth::Landmarks(pts)
            }
            k => return Err(DegiaError::Format(format!("{}: unknown truth kind {k}", path.display()))),
        };
        let mut raw = vec![0u8; h * w * c];
        cur.read_exact(&mut raw).map_err(|_| truncated(&format!("sample {i} pixels")))?;
        split.samples.push(ImageSample {
            height: h,
            width: w,
            channels: c,
            pixels: raw.iter().map(|&b| f32::from(b) / 255.0).collect(),
            truth,
            domain,
        });
    }
    Ok(split)
}
