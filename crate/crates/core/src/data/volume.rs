//! VVOL volume files and the tab-separated dataset manifest.

use std::path::{Path, PathBuf};

use crate::binio::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::eval::BinaryMask;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VVOL";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Image(Tensor<f32>),
    Mask(BinaryMask),
}

fn header(dtype: Dtype, shape: [usize; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(3);
    for d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn dims3(t: &Tensor<f32>) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(t.shape()).map_err(|_| Error::InvalidShape {
        shape: t.shape().to_vec(),
        reason: "volumes are [slices, height, width]".into(),
    })
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let mut out = header(Dtype::F32, dims3(image)?);
    out.reserve(image.numel() * 4);
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path.as_ref(), &out)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let mut out = header(Dtype::U8, mask.shape());
    out.extend_from_slice(mask.data());
    write_file(path.as_ref(), &out)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    if r.take(4)? != MAGIC {
        return Err(r.format_error("not a VVOL file (bad magic)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.format_error(format!("unsupported VVOL version {version}")));
    }
    let dtype = r.u8()?;
    let rank = r.u8()?;
    if rank != 3 {
        return Err(r.format_error(format!("expected rank 3, found {rank}")));
    }
    let shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let n: usize = shape.iter().product();
    let volume = match dtype {
        0 => {
            let data = r.f32s(n)?;
            Volume::Image(
                Tensor::from_vec(shape.to_vec(), data).map_err(|e| r.format_error(e.to_string()))?,
            )
        }
        1 => Volume::Mask(BinaryMask::new(shape, r.take(n)?.to_vec())?),
        other => return Err(r.format_error(format!("unknown dtype code {other}"))),
    };
    if r.remaining() != 0 {
        return Err(r.format_error(format!("{} trailing bytes", r.remaining())));
    }
    Ok(volume)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    match read_volume(path)? {
        Volume::Image(t) => Ok(t),
        Volume::Mask(_) => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected a 32-bit float image, found an 8-bit mask".into(),
        }),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    match read_volume(path)? {
        Volume::Mask(m) => Ok(m),
        Volume::Image(_) => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected an 8-bit mask, found a 32-bit float image".into(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Reads `id<TAB>image<TAB>mask` lines. Relative paths are resolved against
/// the manifest's directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, image, mask] = fields[..] else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: expected 3 tab-separated fields, found {}", i + 1, fields.len()),
            });
        };
        out.push(ManifestEntry {
            id: id.to_string(),
            image: base.join(image),
            mask: base.join(mask),
        });
    }
    Ok(out)
}

/// Writes entries with paths relative to the manifest directory when
/// possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        text.push_str(&format!("{}\t{}\t{}\n", e.id, rel(&e.image), rel(&e.mask)));
    }
    write_file(path, text.as_bytes())
}
