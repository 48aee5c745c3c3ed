//! 8-bit grayscale PNG encoding of glyphs and glyph grids.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use glyphforge_core::corpus::GlyphImage;

use crate::error::{Error, Result};

/// Intensity `v` in `[0, 1]` as the nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Reads an 8-bit grayscale PNG as `(width, height, bytes)`.
pub fn read_gray(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("expected 8-bit grayscale, found {:?} at {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width, info.height);
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    buf.truncate(frame.buffer_size());
    Ok((w, h, buf))
}

pub fn write_gray(path: &Path, width: u32, height: u32, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut enc = png::Encoder::new(&mut w, width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
    writer.write_image_data(data).map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a glyph, rejecting non-square and non-power-of-two images.
pub fn read_glyph(path: &Path) -> Result<GlyphImage> {
    let (w, h, data) = read_gray(path)?;
    if w != h || !w.is_power_of_two() {
        return Err(Error::format(path, format!("glyph must be square with power-of-two side, found {w}x{h}")));
    }
    GlyphImage::new(w as usize, data.into_iter().map(dequantize).collect()).map_err(|e| Error::format(path, e))
}

pub fn write_glyph(path: &Path, g: &GlyphImage) -> Result<()> {
    let bytes: Vec<u8> = g.pixels().iter().map(|&v| quantize(v)).collect();
    write_gray(path, g.side() as u32, g.side() as u32, &bytes)
}

/// Tiles `grid[row][col]` into one image with no gutters.
pub fn write_grid(path: &Path, grid: &[Vec<GlyphImage>]) -> Result<()> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    let side = grid.first().and_then(|r| r.first()).map_or(0, GlyphImage::side);
    if rows == 0 || cols == 0 || grid.iter().any(|r| r.len() != cols) {
        return Err(Error::Usage("interpolation grid must be a non-empty rectangle".into()));
    }
    let width = cols * side;
    let mut bytes = vec![0u8; rows * side * width];
    for (r, row) in grid.iter().enumerate() {
        for (c, g) in row.iter().enumerate() {
            for (y, line) in g.pixels().chunks(side).enumerate() {
                let start = (r * side + y) * width + c * side;
                for (dst, &v) in bytes[start..start + side].iter_mut().zip(line) {
                    *dst = quantize(v);
                }
            }
        }
    }
    write_gray(path, width as u32, (rows * side) as u32, &bytes)
}
