use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::vit::write_atomic;
use std::path::Path;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Raw integer samples of a single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// Largest representable sample (255, 65535, or a PGM maxval).
    pub max_value: u32,
    pub samples: Vec<u32>,
}

impl RawImage {
    /// Samples divided by `max_value`.
    pub fn to_unit(&self) -> GrayImage {
        let s = 1.0 / self.max_value as f64;
        GrayImage::new(self.width, self.height, self.samples.iter().map(|&v| v as f64 * s).collect())
            .expect("sample count matches extent")
    }
}

fn luminance(r: u32, g: u32, b: u32) -> u32 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u32
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<RawImage> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    if reader.info().animation_control.is_some_and(|a| a.num_frames > 1) {
        return Err(Error::format(path, "multi-frame images are not supported"));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let sixteen = frame.bit_depth == png::BitDepth::Sixteen;
    let channels = frame.color_type.samples();
    let sample = |i: usize| -> u32 {
        if sixteen {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as u32
        } else {
            buf[i] as u32
        }
    };
    let mut samples = Vec::with_capacity(w * h);
    let line = frame.line_size / if sixteen { 2 } else { 1 };
    for y in 0..h {
        for x in 0..w {
            let base = y * line + x * channels;
            samples.push(match channels {
                1 | 2 => sample(base),
                _ => luminance(sample(base), sample(base + 1), sample(base + 2)),
            });
        }
    }
    match channels {
        2 => log::warn!("{}: alpha channel ignored", path.display()),
        3 | 4 => log::warn!("{}: color image converted to luminance", path.display()),
        _ => {}
    }
    Ok(RawImage { width: w, height: h, max_value: if sixteen { 65535 } else { 255 }, samples })
}

fn decode_pgm(bytes: &[u8], path: &Path) -> Result<RawImage> {
    let bad = |d: &str| Error::format(path, d.to_string());
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed PGM header"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("PGM extent or maxval out of range"));
    }
    let n = w as usize * h as usize;
    let mut samples = Vec::with_capacity(n);
    let rest;
    if &bytes[..2] == b"P5" {
        pos += 1;
        let width = if maxval < 256 { 1 } else { 2 };
        let end = pos + n * width;
        if bytes.len() < end {
            return Err(bad("truncated PGM raster"));
        }
        for i in 0..n {
            let at = pos + i * width;
            samples.push(if width == 1 { bytes[at] as u32 } else { u16::from_be_bytes([bytes[at], bytes[at + 1]]) as u32 });
        }
        rest = &bytes[end..];
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| bad("non-ASCII plain PGM"))?;
        let mut it = text.split_ascii_whitespace();
        for _ in 0..n {
            samples.push(it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("truncated plain PGM raster"))?);
        }
        if it.next().is_some() {
            return Err(bad("multi-frame images are not supported"));
        }
        rest = &[];
    }
    if rest.iter().any(|b| !b.is_ascii_whitespace()) {
        return Err(bad("multi-frame images are not supported"));
    }
    if samples.iter().any(|&s| s > maxval) {
        return Err(bad("sample above maxval"));
    }
    Ok(RawImage { width: w as usize, height: h as usize, max_value: maxval, samples })
}

/// Decodes an 8- or 16-bit PNG or a PGM (`P5`/`P2`) into raw samples.
/// Color PNGs are reduced to Rec. 601 luminance with a warning.
pub fn load_raw(path: &Path) -> Result<RawImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes, path)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        decode_pgm(&bytes, path)
    } else {
        Err(Error::format(path, "neither PNG nor PGM"))
    }
}

/// Pixel grid in `[0, 1]`: samples divided by `2^bits − 1` (the maxval
/// for PGM).
pub fn load_image(path: &Path) -> Result<GrayImage> {
    Ok(load_raw(path)?.to_unit())
}

/// Integer class map, e.g. a segmentation mask with one label per pixel.
pub fn load_label_map(path: &Path) -> Result<(usize, usize, Vec<usize>)> {
    let raw = load_raw(path)?;
    Ok((raw.width, raw.height, raw.samples.into_iter().map(|v| v as usize).collect()))
}

/// Writes a grayscale PNG, quantizing `[0, 1]` values to 8 or 16 bits.
pub fn save_png(img: &GrayImage, path: &Path, sixteen: bool) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(if sixteen { png::BitDepth::Sixteen } else { png::BitDepth::Eight });
        let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        let data: Vec<u8> = if sixteen {
            img.pixels()
                .iter()
                .flat_map(|p| ((p.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
                .collect()
        } else {
            img.pixels().iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
        };
        w.write_image_data(&data).map_err(|e| Error::format(path, e.to_string()))?;
    }
    write_atomic(path, &out)
}

/// Writes raw 8-bit samples as a binary PGM.
pub fn save_pgm_u8(width: usize, height: usize, samples: &[u8], path: &Path) -> Result<()> {
    if samples.len() != width * height {
        return Err(Error::shape("save_pgm", "sample count does not match extent"));
    }
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(samples);
    write_atomic(path, &out)
}
