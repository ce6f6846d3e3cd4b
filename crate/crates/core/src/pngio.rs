//! Thin wrappers over the `png` crate for 8-bit gray and RGB rasters.

use std::fs::File;
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLayout {
    Gray,
    Rgb,
}

impl PixelLayout {
    pub fn channels(self) -> usize {
        match self {
            PixelLayout::Gray => 1,
            PixelLayout::Rgb => 3,
        }
    }
}

pub fn encode(
    out: impl Write,
    width: usize,
    height: usize,
    layout: PixelLayout,
    pixels: &[u8],
) -> std::result::Result<(), png::EncodingError> {
    let mut enc = png::Encoder::new(out, width as u32, height as u32);
    enc.set_color(match layout {
        PixelLayout::Gray => png::ColorType::Grayscale,
        PixelLayout::Rgb => png::ColorType::Rgb,
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(pixels)?;
    writer.finish()
}

pub fn encode_to_vec(width: usize, height: usize, layout: PixelLayout, pixels: &[u8]) -> Vec<u8> {
    let mut buf = Vec::new();
    encode(&mut buf, width, height, layout, pixels).expect("in-memory png encoding");
    buf
}

pub fn write(path: &Path, width: usize, height: usize, layout: PixelLayout, pixels: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    encode(BufWriter::new(file), width, height, layout, pixels).map_err(|e| Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decoded 8-bit image: `(height, width, layout, interleaved samples)`.
pub struct Decoded {
    pub height: usize,
    pub width: usize,
    pub layout: PixelLayout,
    pub pixels: Vec<u8>,
}

pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<Decoded> {
    let err = |reason: String| Error::Png {
        path: path.to_path_buf(),
        reason,
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (height, width) = (info.height as usize, info.width as usize);
    let (layout, pixels) = match info.color_type {
        png::ColorType::Grayscale => (PixelLayout::Gray, buf),
        png::ColorType::GrayscaleAlpha => (PixelLayout::Gray, buf.chunks(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (PixelLayout::Rgb, buf),
        png::ColorType::Rgba => (
            PixelLayout::Rgb,
            buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        ),
        other => return Err(err(format!("unsupported color type {other:?}"))),
    };
    Ok(Decoded {
        height,
        width,
        layout,
        pixels,
    })
}

pub fn read(path: &Path) -> Result<Decoded> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_bytes(&bytes, path)
}
