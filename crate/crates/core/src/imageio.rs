//! PNG reading and writing, and contact sheets.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::codec::ImageTensor;
use crate::error::{Error, Result};

fn encode(path: &Path, bytes: &[u8], w: usize, h: usize, color: png::ColorType) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut buf), w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(bytes)?;
    }
    crate::checkpoint::write_atomic(path, &buf)
}

/// Writes interleaved 8-bit RGB.
pub fn save_rgb(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    encode(path, rgb, w, h, png::ColorType::Rgb)
}

pub fn save_gray(path: &Path, gray: &[u8], w: usize, h: usize) -> Result<()> {
    encode(path, gray, w, h, png::ColorType::Grayscale)
}

/// Reads an 8-bit RGB or grayscale PNG as interleaved RGB, with its size.
pub fn load_rgb(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Invalid(format!("{}: only 8-bit PNGs are supported", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&v| [v, v, v]).collect(),
        other => return Err(Error::Invalid(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    Ok((rgb, w, h))
}

/// Quantizes a `[0, 1]` plane to bytes.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays out `rows` of images (all the same size) on a grid with a 2 px gap.
pub fn contact_sheet(rows: &[Vec<ImageTensor>]) -> Result<(Vec<u8>, usize, usize)> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Invalid("contact sheet needs at least one image".into()))?;
    let (h, w) = (first.height(), first.width());
    let gap = 2;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (sw, sh) = (cols * (w + gap) + gap, rows.len() * (h + gap) + gap);
    let mut sheet = vec![255u8; sw * sh * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(Error::Shape("contact sheet images differ in size".into()));
            }
            let rgb = img.to_rgb8(0);
            let (ox, oy) = (gap + c * (w + gap), gap + r * (h + gap));
            for y in 0..h {
                let dst = ((oy + y) * sw + ox) * 3;
                sheet[dst..dst + w * 3].copy_from_slice(&rgb[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    Ok((sheet, sw, sh))
}
