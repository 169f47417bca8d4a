//! Little-endian binary containers.
//!
//! ```text
//! FVID: "FVID" | version u32 | T u32 | H u32 | W u32 | spacing_x f64 | spacing_y f64 | T·H·W f32
//! FMSK: "FMSK" | version u32 | H u32 | W u32 | spacing_x f64 | spacing_y f64 | H·W u8
//! FCKP: "FCKP" | version u32 | count u32 | count × (name_len u32 | name utf-8 | ndim u32 | dims u32[ndim] | f64[∏dims])
//! ```
//!
//! Readers reject trailing bytes as well as truncation.

use std::fs;
use std::path::{Path, PathBuf};

use super::Video;
use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::net::ParamSet;
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.clone(),
            offset: offset as u64,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => self.fail(
                self.pos,
                format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            ),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return self.fail(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)));
        }
        let at = self.pos;
        let version = self.u32("version")?;
        if version != VERSION {
            return self.fail(at, format!("unsupported version {version}"));
        }
        Ok(())
    }

    fn count(&mut self, dims: &[u32], elem: usize, what: &str) -> Result<usize> {
        let at = self.pos;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        match n.and_then(|n| n.checked_mul(elem)) {
            Some(bytes) if bytes <= self.bytes.len() - self.pos => Ok(n.expect("checked")),
            _ => self.fail(at, format!("truncated: {what} of dims {dims:?} exceeds file size")),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.fail(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} = {v} does not fit in u32")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_video(video: &Video) -> Result<Vec<u8>> {
    let (t, h, w) = video.dims();
    let mut out = Vec::with_capacity(36 + 4 * video.raw().len());
    out.extend_from_slice(b"FVID");
    for v in [VERSION, dim_u32(t, "T")?, dim_u32(h, "H")?, dim_u32(w, "W")?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&video.pixel_spacing_mm.0.to_le_bytes());
    out.extend_from_slice(&video.pixel_spacing_mm.1.to_le_bytes());
    for v in video.raw() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes an FVID image. `path` is used for error messages and the video id
/// (its file stem).
pub fn decode_video(bytes: &[u8], path: &Path) -> Result<Video> {
    let mut r = Reader::new(bytes, path);
    r.header(b"FVID")?;
    let dims = [r.u32("T")?, r.u32("H")?, r.u32("W")?];
    let spacing = (r.f64("spacing_x")?, r.f64("spacing_y")?);
    let n = r.count(&dims, 4, "frames")?;
    let at = r.pos;
    let frames: Vec<f32> = r
        .take(4 * n, "frames")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    r.finish()?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Video::new(id, (dims[0] as usize, dims[1] as usize, dims[2] as usize), frames, spacing)
        .or_else(|e| r.fail(at, e.to_string()))
}

pub fn write_video(path: &Path, video: &Video) -> Result<()> {
    write_file(path, &encode_video(video)?)
}

pub fn read_video(path: &Path) -> Result<Video> {
    decode_video(&read_file(path)?, path)
}

pub fn encode_mask(mask: &LabelMask) -> Result<Vec<u8>> {
    let (h, w) = mask.dims();
    let mut out = Vec::with_capacity(32 + mask.labels().len());
    out.extend_from_slice(b"FMSK");
    for v in [VERSION, dim_u32(h, "H")?, dim_u32(w, "W")?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&mask.pixel_spacing_mm.0.to_le_bytes());
    out.extend_from_slice(&mask.pixel_spacing_mm.1.to_le_bytes());
    out.extend_from_slice(mask.labels());
    Ok(out)
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<LabelMask> {
    let mut r = Reader::new(bytes, path);
    r.header(b"FMSK")?;
    let dims = [r.u32("H")?, r.u32("W")?];
    let spacing = (r.f64("spacing_x")?, r.f64("spacing_y")?);
    let n = r.count(&dims, 1, "labels")?;
    let at = r.pos;
    let labels = r.take(n, "labels")?.to_vec();
    r.finish()?;
    LabelMask::new((dims[0] as usize, dims[1] as usize), labels, spacing).or_else(|e| r.fail(at, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write_file(path, &encode_mask(mask)?)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    decode_mask(&read_file(path)?, path)
}

pub fn encode_checkpoint(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 8 * params.num_scalars());
    out.extend_from_slice(b"FCKP");
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(params.len(), "tensor count")?.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&dim_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&dim_u32(t.ndim(), "ndim")?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&dim_u32(d, "dim")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamSet> {
    let mut r = Reader::new(bytes, path);
    r.header(b"FCKP")?;
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_string(),
            Err(e) => return r.fail(at + 4, format!("name is not UTF-8: {e}")),
        };
        let ndim = r.u32("ndim")? as usize;
        r.count(&[ndim as u32], 4, "dims")?;
        let dims = (0..ndim).map(|_| r.u32("dim")).collect::<Result<Vec<u32>>>()?;
        let n = r.count(&dims, 8, "tensor data")?;
        let data: Vec<f64> = r
            .take(8 * n, "tensor data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        let tensor = Tensor::new(&shape, data).or_else(|e| r.fail(at, e.to_string()))?;
        params.insert(name, tensor).or_else(|e| r.fail(at, e.to_string()))?;
    }
    r.finish()?;
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    write_file(path, &encode_checkpoint(params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    decode_checkpoint(&read_file(path)?, path)
}
