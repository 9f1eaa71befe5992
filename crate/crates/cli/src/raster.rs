use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use tp4d_core::image::Image;
use tp4d_core::{Error, Result};

fn format_error(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes an 8-bit RGB PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let side = img.side() as u32;
    let mut enc = png::Encoder::new(w, side, side);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_error(path, e))?;
    writer.write_image_data(&img.to_rgb8()).map_err(|e| format_error(path, e))?;
    writer.finish().map_err(|e| format_error(path, e))?;
    Ok(())
}

/// Reads a square 8-bit RGB or RGBA PNG.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| format_error(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| format_error(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_error(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_error(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_error(path, "only 8-bit images are supported"));
    }
    if info.width != info.height {
        return Err(format_error(path, format!("image is {}x{}, not square", info.width, info.height)));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format_error(path, format!("unsupported color type {other:?}"))),
    };
    let rgb: Vec<u8> = buf[..info.buffer_size()]
        .chunks_exact(stride)
        .flat_map(|px| px[..3].to_vec())
        .collect();
    Image::from_rgb8(info.width as usize, &rgb)
}
