//! Image and mask files.
//!
//! Linear images are stored as 16-bit RGB PNG (`v = sample / 65535`) or as a
//! lossless text raster with the `.pfa` extension:
//!
//! ```text
//! PFA
//! <width> <height>
//! r g b r g b ...   (one line per row, top row first)
//! ```
//!
//! Masks are 8-bit grayscale PNG where any nonzero sample marks an excluded pixel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use c4_core::LinearImage;
use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{C4Error, Result};

const PFA_MAGIC: &str = "PFA";

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> C4Error + '_ {
    move |source| C4Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_png16(path: &Path) -> Result<LinearImage> {
    let rgb = image::open(path).map_err(image_err(path))?.into_rgb16();
    let (w, h) = rgb.dimensions();
    let data = rgb
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v) / 65535.0)
        .collect();
    Ok(LinearImage::new(h as usize, w as usize, data)?)
}

/// Quantizes to 16 bits after clipping to `[0, 1]`; the mask is not stored.
pub fn write_png16(path: &Path, image: &LinearImage) -> Result<()> {
    let raw: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Rgb<u16>, _> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, raw)
            .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

pub fn read_mask(path: &Path, height: usize, width: usize) -> Result<Vec<bool>> {
    let gray = image::open(path).map_err(image_err(path))?.into_luma8();
    if gray.dimensions() != (width as u32, height as u32) {
        let (w, h) = gray.dimensions();
        return Err(C4Error::format(
            path,
            format!("mask is {h}x{w} but the image is {height}x{width}"),
        ));
    }
    Ok(gray.into_raw().into_iter().map(|v| v != 0).collect())
}

pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let raw = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| C4Error::format(path, "mask length does not match dimensions"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

pub fn write_pfa(path: &Path, image: &LinearImage) -> Result<()> {
    let mut out = format!("{PFA_MAGIC}\n{} {}\n", image.width(), image.height());
    for row in image.data().chunks(image.width() * 3) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a string");
    }
    fs::write(path, out).map_err(|e| C4Error::io(path, e))
}

pub fn read_pfa(path: &Path) -> Result<LinearImage> {
    let text = fs::read_to_string(path).map_err(|e| C4Error::io(path, e))?;
    let bad = |line: usize, message: String| C4Error::Line {
        path: path.to_path_buf(),
        line: line as u64,
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some(PFA_MAGIC) {
        return Err(bad(1, format!("expected {PFA_MAGIC} header")));
    }
    let dims: Vec<usize> = lines
        .next()
        .unwrap_or_default()
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| bad(2, format!("bad dimensions: {e}")))?;
    let [width, height] = dims[..] else {
        return Err(bad(2, "expected `<width> <height>`".into()));
    };
    let mut data = Vec::with_capacity(width * height * 3);
    for (i, line) in lines.enumerate() {
        let row = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(i + 3, format!("bad sample: {e}")))?;
        if row.len() != width * 3 {
            return Err(bad(
                i + 3,
                format!("expected {} samples, found {}", width * 3, row.len()),
            ));
        }
        data.extend(row);
    }
    if data.len() != width * height * 3 {
        return Err(C4Error::format(
            path,
            format!(
                "expected {height} rows, found {}",
                data.len() / (width * 3).max(1)
            ),
        ));
    }
    Ok(LinearImage::new(height, width, data)?)
}

/// Reads a linear image, choosing the format by extension (`.pfa`, else PNG).
pub fn read_image(path: &Path) -> Result<LinearImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("pfa") => read_pfa(path),
        _ => read_png16(path),
    }
}

pub fn write_image(path: &Path, image: &LinearImage) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("pfa") => write_pfa(path, image),
        _ => write_png16(path, image),
    }
}
