//! `.flo`, KITTI 16-bit flow png, and 8-bit RGB png files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use crate::error::{io_err, FlowError, Result};
use crate::types::{FlowField, Image, ValidMask};

const FLO_MAGIC: f32 = 202021.25;
/// Largest accepted side of a `.flo` file.
const FLO_MAX_SIDE: usize = 1 << 16;

fn format_err(path: &Path, reason: impl Into<String>) -> FlowError {
    FlowError::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// Middlebury `.flo`: magic, width, height, then interleaved `(u, v)` rows, little-endian.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * flow.height * flow.width);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (u, v) = flow.get(y, x);
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    parse_flo(&bytes).map_err(|reason| format_err(path, reason))
}

fn parse_flo(bytes: &[u8]) -> std::result::Result<FlowField, String> {
    if bytes.len() < 12 {
        return Err("truncated header".into());
    }
    let word = |i: usize| [bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(format!("bad magic {magic}"));
    }
    let (w, h) = (i32::from_le_bytes(word(1)), i32::from_le_bytes(word(2)));
    if w <= 0 || h <= 0 || w as usize > FLO_MAX_SIDE || h as usize > FLO_MAX_SIDE {
        return Err(format!("invalid dimensions {w}x{h}"));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + 8 * w * h;
    if bytes.len() != need {
        return Err(format!("expected {need} bytes for {w}x{h}, found {}", bytes.len()));
    }
    let mut flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = 3 + 2 * (y * w + x);
            flow.set(y, x, (f32::from_le_bytes(word(i)), f32::from_le_bytes(word(i + 1))));
        }
    }
    Ok(flow)
}

fn encoder(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth) -> Result<png::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header().map_err(|e| format_err(path, e.to_string()))
}

fn finish(path: &Path, mut writer: png::Writer<BufWriter<File>>, data: &[u8]) -> Result<()> {
    writer.write_image_data(data).map_err(|e| format_err(path, e.to_string()))?;
    writer.finish().map_err(|e| format_err(path, e.to_string()))
}

fn decode(path: &Path, transform: png::Transformations) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(transform);
    let mut reader = dec.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Quantizes one flow component to the KITTI 16-bit encoding.
fn kitti_encode(x: f32) -> u16 {
    (x as f64 * 64.0 + 32768.0).round().clamp(0.0, 65535.0) as u16
}

/// KITTI flow png: 16-bit RGB with `u = (R - 2^15) / 64`, `v = (G - 2^15) / 64`, valid = `B > 0`.
pub fn write_kitti_png(path: &Path, flow: &FlowField, valid: &ValidMask) -> Result<()> {
    if (valid.height, valid.width) != (flow.height, flow.width) {
        return Err(format_err(path, "valid mask size differs from the flow"));
    }
    let mut data = Vec::with_capacity(6 * flow.height * flow.width);
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (u, v) = flow.get(y, x);
            let ok = valid.get(y, x);
            let px = if ok { [kitti_encode(u), kitti_encode(v), 1] } else { [0, 0, 0] };
            for c in px {
                data.extend_from_slice(&c.to_be_bytes());
            }
        }
    }
    let w = encoder(path, flow.width, flow.height, png::ColorType::Rgb, png::BitDepth::Sixteen)?;
    finish(path, w, &data)
}

pub fn read_kitti_png(path: &Path) -> Result<(FlowField, ValidMask)> {
    let (info, buf) = decode(path, png::Transformations::IDENTITY)?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Rgb {
        return Err(format_err(path, format!("expected 16-bit RGB, found {:?} {:?}", info.bit_depth, info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut flow = FlowField::zeros(h, w);
    let mut valid = ValidMask { height: h, width: w, data: vec![false; h * w] };
    for y in 0..h {
        for x in 0..w {
            let o = 6 * (y * w + x);
            let ch = |c: usize| u16::from_be_bytes([buf[o + 2 * c], buf[o + 2 * c + 1]]);
            let ok = ch(2) > 0;
            valid.data[y * w + x] = ok;
            if ok {
                let f = |v: u16| ((v as f64 - 32768.0) / 64.0) as f32;
                flow.set(y, x, (f(ch(0)), f(ch(1))));
            }
        }
    }
    Ok((flow, valid))
}

/// 8-bit RGB png from planar values in [0, 1].
pub fn write_rgb_png(path: &Path, image: &Image) -> Result<()> {
    let mut data = Vec::with_capacity(3 * image.height * image.width);
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                data.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let w = encoder(path, image.width, image.height, png::ColorType::Rgb, png::BitDepth::Eight)?;
    finish(path, w, &data)
}

/// Reads an 8- or 16-bit gray, gray-alpha, RGB, RGBA or palette png; alpha is dropped.
pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let (info, buf) = decode(path, png::Transformations::EXPAND | png::Transformations::STRIP_16)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(format_err(path, "palette was not expanded")),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut image = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let o = channels * (y * w + x);
            for c in 0..3 {
                let src = if channels < 3 { 0 } else { c };
                image.set(c, y, x, buf[o + src] as f32 / 255.0);
            }
        }
    }
    Ok(image)
}
