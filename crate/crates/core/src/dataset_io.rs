//! On-disk dataset layout:
//! `<root>/<split>/{person,garment,mask,skeleton,flow,target}/<sample_id>.<ext>`.
//!
//! Images are 8-bit PNG (RGB, or grayscale for masks) holding unit-range
//! values; flows are raw little-endian `f32` with a 16-byte header.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::data_model::{AgnosticMask, Array3, DenseFlow, ImageTensor, SkeletonMap, TryOnSample, ValueRange};
use crate::error::{invalid, FiaError, Result};

pub const FLOW_MAGIC: &[u8; 8] = b"FIAFLOW1";
pub const PARTS: [&str; 6] = ["person", "garment", "mask", "skeleton", "flow", "target"];

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes channel-major unit-range data as an 8-bit PNG (1 or 3 channels).
pub fn encode_png(array: &Array3) -> Result<Vec<u8>> {
    let (c, h, w) = (array.channels(), array.height(), array.width());
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return invalid(format!("cannot store {c}-channel array as PNG")),
    };
    let mut pixels = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                pixels.push(to_u8(array.get(ch, y, x)));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&pixels)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale or RGB PNG into unit-range channel-major data.
pub fn decode_png(bytes: &[u8]) -> Result<Array3> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| FiaError::InvalidInput("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return invalid("only 8-bit PNG images are supported");
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return invalid(format!("unsupported PNG color type {other:?}")),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let keep = c.min(3);
    let data = &buf[..info.buffer_size()];
    Ok(Array3::from_fn(keep, h, w, |ch, y, x| {
        data[(y * w + x) * c + ch] as f32 / 255.0
    }))
}

pub fn write_png(path: &Path, array: &Array3) -> Result<()> {
    fs::write(path, encode_png(array)?)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Array3> {
    decode_png(&fs::read(path)?)
}

pub fn encode_flow(flow: &DenseFlow) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + flow.data().len() * 4);
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<DenseFlow> {
    if bytes.len() < 16 || &bytes[..8] != FLOW_MAGIC {
        return invalid("not a flow file (bad magic)");
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != h * w * 2 * 4 {
        return invalid(format!("flow file body has {} bytes, expected {}", body.len(), h * w * 8));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    DenseFlow::new(data, h, w)
}

pub fn write_flow(path: &Path, flow: &DenseFlow) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_flow(flow))?;
    f.flush()?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<DenseFlow> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_flow(&bytes)
}

fn part_path(root: &Path, split: &str, part: &str, id: &str) -> PathBuf {
    let ext = if part == "flow" { "flow" } else { "png" };
    root.join(split).join(part).join(format!("{id}.{ext}"))
}

/// Writes every sample under `<root>/<split>/…`; returns the written paths.
pub fn write_split(root: &Path, split: &str, samples: &[TryOnSample]) -> Result<Vec<PathBuf>> {
    for part in PARTS {
        fs::create_dir_all(root.join(split).join(part))?;
    }
    let mut written = Vec::new();
    for s in samples {
        let mut put_png = |part: &str, arr: &Array3| -> Result<()> {
            let p = part_path(root, split, part, &s.sample_id);
            write_png(&p, arr)?;
            written.push(p);
            Ok(())
        };
        put_png("person", s.person.to_unit().array())?;
        put_png("garment", s.garment.to_unit().array())?;
        put_png("mask", &Array3::new(s.mask.data().to_vec(), 1, s.mask.height(), s.mask.width())?)?;
        put_png("skeleton", s.skeleton.image().array())?;
        if let Some(t) = &s.target {
            put_png("target", t.to_unit().array())?;
        }
        if let Some(f) = &s.flow_gt {
            let p = part_path(root, split, "flow", &s.sample_id);
            write_flow(&p, f)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Sample ids present in a split (from the person directory), sorted.
pub fn list_split(root: &Path, split: &str) -> Result<Vec<String>> {
    let dir = root.join(split).join("person");
    if !dir.is_dir() {
        return invalid(format!("no dataset split at {}", dir.display()));
    }
    let mut ids: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("png"))
                .then(|| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
                .flatten()
        })
        .collect();
    ids.sort();
    Ok(ids)
}

fn load_image(path: &Path) -> Result<ImageTensor> {
    ImageTensor::new(read_png(path)?, ValueRange::Unit)
}

/// Loads one sample; `flow` and `target` are optional on disk.
pub fn read_sample(root: &Path, split: &str, id: &str) -> Result<TryOnSample> {
    let person = load_image(&part_path(root, split, "person", id))?;
    let garment = load_image(&part_path(root, split, "garment", id))?;
    let m = read_png(&part_path(root, split, "mask", id))?;
    let mask = AgnosticMask::new(m.channel(0).iter().map(|&v| (v >= 0.5) as u8 as f32).collect(), m.height(), m.width())?;
    let skeleton = SkeletonMap::new(load_image(&part_path(root, split, "skeleton", id))?)?;
    let fp = part_path(root, split, "flow", id);
    let flow_gt = if fp.exists() { Some(read_flow(&fp)?) } else { None };
    let tp = part_path(root, split, "target", id);
    let target = if tp.exists() { Some(load_image(&tp)?) } else { None };
    Ok(TryOnSample {
        sample_id: id.to_string(),
        person,
        garment,
        mask,
        skeleton,
        flow_gt,
        target,
    })
}

pub fn read_split(root: &Path, split: &str) -> Result<Vec<TryOnSample>> {
    list_split(root, split)?
        .iter()
        .map(|id| read_sample(root, split, id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthetic_data::generate_dataset;

    #[test]
    fn flow_round_trip_and_header() {
        let f = DenseFlow::from_fn(3, 5, |y, x| (x as f32 * 0.1, -(y as f32) * 0.05)).unwrap();
        let b = encode_flow(&f);
        assert_eq!(&b[..8], b"FIAFLOW1");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 5);
        assert_eq!(b.len(), 16 + 3 * 5 * 2 * 4);
        assert_eq!(decode_flow(&b).unwrap(), f);
        assert!(decode_flow(b"NOTAFLOW12345678").is_err());
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let cfg = ModelConfig::desk();
        let ds = generate_dataset(2, &cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_split(dir.path(), "train", &ds).unwrap();
        let back = read_split(dir.path(), "train").unwrap();
        assert_eq!(back, ds);
    }
}
