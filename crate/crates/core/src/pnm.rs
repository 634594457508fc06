//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Shape, Tensor};

/// A decoded image, samples interleaved per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

fn header_fields(data: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < count {
        while i < data.len() && data[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < data.len() && data[i] == b'#' {
            while i < data.len() && data[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < data.len() && !data[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&data[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= data.len() {
        return Err(Error::Format("PNM header has no raster".into()));
    }
    Ok((fields, i + 1))
}

pub fn decode(data: &[u8]) -> Result<Pnm> {
    let (fields, start) = header_fields(data, 4)?;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic '{m}', expected P5 or P6"))),
    };
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PNM {what} '{s}'")))
    };
    let width = num(&fields[1], "width")?;
    let height = num(&fields[2], "height")?;
    let maxval = num(&fields[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("maxval {maxval} is not an 8-bit depth")));
    }
    let len = width * height * channels;
    let raster = &data[start..];
    if raster.len() < len {
        return Err(Error::Format(format!(
            "PNM raster has {} bytes, expected {len}",
            raster.len()
        )));
    }
    let samples = raster[..len]
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
        .collect();
    Ok(Pnm {
        width,
        height,
        channels,
        samples,
    })
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.samples);
    out
}

pub fn read(path: &Path) -> Result<Pnm> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}

/// Mask pixels are samples ≥ 128 of a single-channel image.
pub fn to_mask(img: &Pnm) -> Result<BinaryMask> {
    if img.channels != 1 {
        return Err(Error::Format("masks must be single-channel PGM".into()));
    }
    BinaryMask::from_bits(
        img.height,
        img.width,
        img.samples.iter().map(|&v| v >= 128).collect(),
    )
}

pub fn from_mask(m: &BinaryMask) -> Pnm {
    Pnm {
        width: m.width(),
        height: m.height(),
        channels: 1,
        samples: m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    to_mask(&read(path)?)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write(path, &from_mask(m))
}

/// Planar CHW tensor with samples scaled to [0, 1].
pub fn to_tensor(img: &Pnm) -> Result<Tensor> {
    let (c, h, w) = (img.channels, img.height, img.width);
    Ok(Tensor::from_fn(Shape::new(c, h, w), |ch, y, x| {
        img.samples[(y * w + x) * c + ch] as f32 / 255.0
    }))
}
