//! Lossless 8-bit PNG read/write. Values are quantized as `round(255 x)`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::codec::{ImageRaster, Mask};
use crate::error::{Error, Result};

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

fn read_png(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit samples"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

pub fn save_image(image: &ImageRaster, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize(v)).collect();
    write_png(path, image.width, image.height, png::ColorType::Rgb, &bytes)
}

pub fn load_image(path: &Path) -> Result<ImageRaster> {
    let (width, height, color, bytes) = read_png(path)?;
    let data: Vec<f32> = match color {
        png::ColorType::Rgb => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        png::ColorType::Rgba => bytes
            .chunks(4)
            .flat_map(|p| p[..3].iter().map(|&b| b as f32 / 255.0))
            .collect(),
        png::ColorType::Grayscale => bytes
            .iter()
            .flat_map(|&b| [b as f32 / 255.0; 3])
            .collect(),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    ImageRaster::new(height, width, data)
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| quantize(v)).collect();
    write_png(path, mask.width, mask.height, png::ColorType::Grayscale, &bytes)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let (width, height, color, bytes) = read_png(path)?;
    if color != png::ColorType::Grayscale {
        return Err(Error::format(path, "mask must be 8-bit grayscale"));
    }
    Mask::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
}
