use std::io::Cursor;

use super::{DataError, IMAGE_SIZE};
use crate::raster::bilinear_resize;

/// Decoded 8-bit pixels, `height × width × channels`, channels 1 (gray) or 3 (RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// `c·a + 255·(1 − a)` with `a` the 8-bit alpha, rounded.
fn over_white(c: u8, a: u8) -> u8 {
    let (c, a) = (c as u32, a as u32);
    ((c * a + 255 * (255 - a) + 127) / 255) as u8
}

/// Decodes a PNG stream; alpha is composited over a white background.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage, DataError> {
    let corrupt = |e: png::DecodingError| DataError::CorruptImage(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| DataError::CorruptImage("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let mut pixels = Vec::with_capacity(width * height * 3);
    let mut channels = 0;
    for row in buf.chunks(info.line_size).take(height) {
        let row = &row[..width * src_channels];
        match info.color_type {
            png::ColorType::Grayscale => {
                channels = 1;
                pixels.extend_from_slice(row);
            }
            png::ColorType::GrayscaleAlpha => {
                channels = 1;
                pixels.extend(row.chunks(2).map(|p| over_white(p[0], p[1])));
            }
            png::ColorType::Rgb => {
                channels = 3;
                pixels.extend_from_slice(row);
            }
            png::ColorType::Rgba => {
                channels = 3;
                for p in row.chunks(4) {
                    pixels.extend(p[..3].iter().map(|&c| over_white(c, p[3])));
                }
            }
            png::ColorType::Indexed => {
                return Err(DataError::CorruptImage("palette was not expanded".into()));
            }
        }
    }
    Ok(RawImage {
        width,
        height,
        channels,
        pixels,
    })
}

/// Grayscale conversion (0.299 R + 0.587 G + 0.114 B), scaling to `[0, 1]`
/// and corner-aligned bilinear resize to 32×32.
pub fn preprocess(img: &RawImage) -> Vec<f32> {
    let gray: Vec<f32> = match img.channels {
        1 => img.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        _ => img
            .pixels
            .chunks(img.channels)
            .map(|p| {
                let l = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                (l / 255.0).clamp(0.0, 1.0) as f32
            })
            .collect(),
    };
    bilinear_resize(&gray, img.height, img.width, IMAGE_SIZE, IMAGE_SIZE)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

/// 8-bit grayscale PNG of values in `[0, 1]`, rounded to the nearest level.
pub fn encode_gray_png(values: &[f32], width: usize, height: usize) -> Vec<u8> {
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(width, height, png::ColorType::Grayscale, &bytes).expect("in-memory PNG encoding")
}

/// 8-bit RGB PNG from interleaved bytes.
pub fn encode_rgb_png(rgb: &[u8], width: usize, height: usize) -> Vec<u8> {
    encode(width, height, png::ColorType::Rgb, rgb).expect("in-memory PNG encoding")
}
