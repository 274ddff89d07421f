//! On-disk formats: PNG frame directories, single-file APNG animations and
//! the little-endian tensor container used for weights and latents.
//!
//! Tensor container layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "MCTC"
//! version  u32      1
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8     0 = float32
//!   ndim     u32, dims u64 x ndim
//!   payload  float32 x prod(dims)
//! ```
//!
//! PNG output quantises `[0, 1]` floats to 8-bit with round-half-away-from-zero
//! after clamping. Video files are RGB (or grayscale for single-channel
//! videos); APNG frames play at 8 fps and loop forever.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::video::{Video, VideoShape};

pub const CONTAINER_MAGIC: &[u8; 4] = b"MCTC";
pub const CONTAINER_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
pub const APNG_FPS: u16 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_video(name: &str, v: &Video) -> Self {
        let s = v.shape();
        Self { name: name.into(), shape: vec![s.frames, s.channels, s.height, s.width], data: v.data().to_vec() }
    }

    pub fn to_video(&self) -> Result<Video> {
        match self.shape[..] {
            [f, c, h, w] => Video::from_vec(VideoShape::new(f, c, h, w), self.data.clone()),
            _ => Err(Error::invalid(&self.name, format!("expected 4 dims, found {:?}", self.shape))),
        }
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let bad = |reason: &str| Error::Container { path: path.to_path_buf(), reason: reason.into() };
    let mut r = Cursor::new(bytes);
    let mut take = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        r.read_exact(&mut buf).map_err(|_| bad("truncated"))?;
        Ok(buf)
    };
    if take(4)? != CONTAINER_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32_of(take(4)?) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_of(take(4)?) as usize;
        let name = String::from_utf8(take(len)?).map_err(|_| bad("name is not UTF-8"))?;
        if take(1)?[0] != DTYPE_F32 {
            return Err(bad(&format!("tensor {name}: unsupported dtype")));
        }
        let ndim = u32_of(take(4)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok(tensors)
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    std::fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    decode_tensors(&std::fs::read(path)?, path)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn color_type(channels: usize) -> Result<png::ColorType> {
    match channels {
        1 => Ok(png::ColorType::Grayscale),
        3 => Ok(png::ColorType::Rgb),
        c => Err(Error::invalid("channels", format!("cannot store {c}-channel video as PNG"))),
    }
}

fn interleave(v: &Video, f: usize) -> Vec<u8> {
    let s = v.shape();
    let mut out = Vec::with_capacity(s.frame_len());
    for y in 0..s.height {
        for x in 0..s.width {
            for c in 0..s.channels {
                out.push(quantize(v.at(f, c, y, x)));
            }
        }
    }
    out
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), reason: e.to_string() }
}

/// PNG bytes of a single frame.
pub fn encode_frame_png(v: &Video, f: usize) -> Result<Vec<u8>> {
    let s = v.shape();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, s.width as u32, s.height as u32);
        enc.set_color(color_type(s.channels)?);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| png_err(Path::new("<memory>"), e))?;
        w.write_image_data(&interleave(v, f)).map_err(|e| png_err(Path::new("<memory>"), e))?;
    }
    Ok(buf)
}

/// Lays frames side by side in one image.
pub fn frame_strip(v: &Video) -> Video {
    let s = v.shape();
    let mut out = Video::zeros(VideoShape::new(1, s.channels, s.height, s.width * s.frames));
    for f in 0..s.frames {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    out.set(0, c, y, f * s.width + x, v.at(f, c, y, x));
                }
            }
        }
    }
    out
}

pub fn frame_file_name(f: usize) -> String {
    format!("frame_{f:04}.png")
}

/// One PNG per frame, named `frame_0000.png`, `frame_0001.png`, ...
pub fn write_png_frames(dir: &Path, v: &Video) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in 0..v.shape().frames {
        std::fs::write(dir.join(frame_file_name(f)), encode_frame_png(v, f)?)?;
    }
    Ok(())
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Vec<Video>> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let frames = reader.info().animation_control().map(|a| a.num_frames as usize).unwrap_or(1);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src_ch = info.color_type.samples();
        let data = &buf[..info.buffer_size()];
        let channels = if src_ch <= 2 { 1 } else { 3 };
        let mut v = Video::zeros(VideoShape::new(1, channels, h, w));
        for y in 0..h {
            for x in 0..w {
                let px = &data[(y * w + x) * src_ch..(y * w + x + 1) * src_ch];
                for c in 0..channels {
                    v.set(0, c, y, x, px[c] as f32 / 255.0);
                }
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// Reads a still image (first frame of an animation) as a one-frame video.
/// Gray images stay single-channel; alpha is dropped.
pub fn read_image(path: &Path) -> Result<Video> {
    let bytes = std::fs::read(path).map_err(|e| png_err(path, e))?;
    decode_png(&bytes, path)?.into_iter().next().ok_or_else(|| png_err(path, "no frames"))
}

fn collect_frames(frames: Vec<Video>, path: &Path) -> Result<Video> {
    let refs: Vec<&Video> = frames.iter().collect();
    Video::concat_frames(&refs).map_err(|e| png_err(path, e))
}

pub fn read_png_frames(dir: &Path) -> Result<Video> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(png_err(dir, "no frame_*.png files"));
    }
    let frames = files.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;
    collect_frames(frames, dir)
}

pub fn encode_apng(v: &Video) -> Result<Vec<u8>> {
    let s = v.shape();
    let mem = Path::new("<apng>");
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, s.width as u32, s.height as u32);
        enc.set_color(color_type(s.channels)?);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_animated(s.frames as u32, 0).map_err(|e| png_err(mem, e))?;
        enc.set_frame_delay(1, APNG_FPS).map_err(|e| png_err(mem, e))?;
        let mut w = enc.write_header().map_err(|e| png_err(mem, e))?;
        for f in 0..s.frames {
            w.write_image_data(&interleave(v, f)).map_err(|e| png_err(mem, e))?;
        }
        w.finish().map_err(|e| png_err(mem, e))?;
    }
    Ok(buf)
}

pub fn write_apng(path: &Path, v: &Video) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_apng(v)?)?;
    f.flush()?;
    Ok(())
}

pub fn read_apng(path: &Path) -> Result<Video> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    collect_frames(decode_png(&bytes, path)?, path)
}

/// Reads a video from an APNG file or a directory of PNG frames.
pub fn read_video(path: &Path) -> Result<Video> {
    if path.is_dir() {
        read_png_frames(path)
    } else {
        read_apng(path)
    }
}

/// Writes a directory of PNG frames when `path` has no extension, an APNG otherwise.
pub fn write_video(path: &Path, v: &Video) -> Result<()> {
    if path.extension().is_some() {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_apng(path, v)
    } else {
        write_png_frames(path, v)
    }
}

/// Rounds a video to the values an 8-bit PNG stores.
pub fn quantized(v: &Video) -> Video {
    v.map(|x| quantize(x) as f32 / 255.0)
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn content_hash<T: serde::Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
