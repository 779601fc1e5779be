//! Sample files, the dataset manifest and PNG export.
//!
//! Sample layout, integers `u64` and payloads `f32`, all little-endian:
//!
//! ```text
//! "PSSAMP1" h w c m lights[m*3] mask[h*w] normals[h*w*3] images[m*h*w*c] crc32:u32
//! ```
//!
//! An all-zero normal block means the sample carries no ground truth. The
//! CRC covers every preceding byte.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::ParseError;
use crate::model::{NormalMap, PhotoSample};
use crate::{Error, Result};

const MAGIC: &[u8; 7] = b"PSSAMP1";
const MAGIC_STEM: &[u8; 6] = b"PSSAMP";
pub const MANIFEST_HEADER: &str = "PSDATA v1";
const MANIFEST_NAME: &str = "manifest.txt";

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_sample(s: &PhotoSample) -> Result<Vec<u8>> {
    s.validate()?;
    let (h, w, c, m) = (s.height, s.width, s.channels, s.light_count());
    let mut out = Vec::with_capacity(7 + 32 + 4 * (m * 3 + h * w * 4 + m * h * w * c) + 4);
    out.extend_from_slice(MAGIC);
    for v in [h, w, c, m] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for l in &s.lights {
        put_f32s(&mut out, l);
    }
    put_f32s(&mut out, &s.mask);
    match &s.normals {
        Some(n) => put_f32s(&mut out, n),
        None => out.resize(out.len() + h * w * 3 * 4, 0),
    }
    put_f32s(&mut out, &s.images);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_sample(bytes: &[u8]) -> Result<PhotoSample, ParseError> {
    if bytes.len() < MAGIC.len() {
        return Err(ParseError::Truncated);
    }
    if &bytes[..7] != MAGIC {
        if &bytes[..6] == MAGIC_STEM {
            return Err(ParseError::VersionMismatch(
                String::from_utf8_lossy(&bytes[..7]).into_owned(),
            ));
        }
        return Err(ParseError::BadMagic);
    }
    if bytes.len() < 7 + 32 + 4 {
        return Err(ParseError::Truncated);
    }
    let dim = |i: usize| {
        let at = 7 + 8 * i;
        u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
    };
    let (h, w, c, m) = (dim(0), dim(1), dim(2), dim(3));
    let floats = (|| {
        let hw = h.checked_mul(w)?;
        let imgs = m.checked_mul(hw)?.checked_mul(c)?;
        m.checked_mul(3)?
            .checked_add(hw.checked_mul(4)?)?
            .checked_add(imgs)
    })()
    .ok_or(ParseError::Truncated)?;
    let payload_end = (floats as u128) * 4 + 39;
    if (bytes.len() as u128) < payload_end + 4 {
        return Err(ParseError::Truncated);
    }
    let payload_end = payload_end as usize;
    if bytes.len() > payload_end + 4 {
        return Err(ParseError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - payload_end - 4
        )));
    }
    let stored = u32::from_le_bytes(bytes[payload_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(ParseError::Checksum { stored, computed });
    }
    let (h, w, c, m) = (h as usize, w as usize, c as usize, m as usize);
    let mut pos = 39;
    let mut take = |n: usize| {
        let v: Vec<f32> = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        pos += 4 * n;
        v
    };
    let lights = take(m * 3).chunks(3).map(|l| [l[0], l[1], l[2]]).collect();
    let mask = take(h * w);
    let normals = take(h * w * 3);
    let images = take(m * h * w * c);
    let normals = normals.iter().any(|&v| v.to_bits() != 0).then_some(normals);
    let sample = PhotoSample {
        height: h,
        width: w,
        channels: c,
        images,
        lights,
        mask,
        normals,
    };
    sample
        .validate()
        .map_err(|e| ParseError::Malformed(e.to_string()))?;
    Ok(sample)
}

pub fn write_sample(path: &Path, s: &PhotoSample) -> Result<()> {
    let bytes = encode_sample(s)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<PhotoSample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes).map_err(|k| Error::parse(path, k))
}

/// Index of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    /// Generation settings echoed as `# key = value` lines.
    pub config: Vec<(String, String)>,
    /// Sample files relative to the directory.
    pub paths: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut text = format!("{MANIFEST_HEADER}\n");
    for (k, v) in &manifest.config {
        text.push_str(&format!("# {k} = {v}\n"));
    }
    for p in &manifest.paths {
        text.push_str(&p.to_string_lossy());
        text.push('\n');
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(MANIFEST_HEADER) => {}
        Some(other) if other.starts_with("PSDATA") => {
            return Err(Error::parse(&path, ParseError::VersionMismatch(other.to_string())))
        }
        Some(_) => return Err(Error::parse(&path, ParseError::BadMagic)),
        None => return Err(Error::parse(&path, ParseError::Truncated)),
    }
    let mut manifest = DatasetManifest::default();
    for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(echo) = line.strip_prefix('#') {
            if let Some((k, v)) = echo.split_once('=') {
                manifest.config.push((k.trim().to_string(), v.trim().to_string()));
            }
        } else {
            manifest.paths.push(PathBuf::from(line));
        }
    }
    Ok(manifest)
}

/// Reads the manifest and every sample it lists.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PhotoSample>)> {
    let manifest = read_manifest(dir)?;
    if manifest.is_empty() {
        return Err(Error::EmptySet(format!("{} lists no samples", dir.display())));
    }
    let samples = manifest
        .paths
        .iter()
        .map(|p| read_sample(&dir.join(p)))
        .collect::<Result<_>>()?;
    Ok((manifest, samples))
}

/// RGB PNG with `round((n + 1) / 2 * 255)` inside the mask and black outside.
pub fn write_normal_png(path: &Path, map: &NormalMap) -> Result<()> {
    let mut rgb = Vec::with_capacity(map.normals.len() * 3);
    for (n, &inside) in map.normals.iter().zip(&map.mask) {
        for &v in n {
            let byte = if inside {
                ((v.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0 * 255.0).round() as u8
            } else {
                0
            };
            rgb.push(byte);
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&rgb))
        .map_err(to_io)
}
