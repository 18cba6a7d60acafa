//! 8-bit grayscale image and mask files: binary PGM (P5) and PNG.

use std::fs;
use std::path::Path;

use super::{Image, Mask};
use crate::error::{Error, Result};

/// Threshold at which stored 8-bit mask values count as foreground.
pub const MASK_THRESHOLD: u8 = 128;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pgm_bytes(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_pgm_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::format(path, format!("expected P5 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, format!("bad PGM header field {s:?}")));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("only 8-bit PGM is supported, maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let pixels = bytes.get(pos..pos + width * height).ok_or_else(|| Error::format(path, "truncated PGM raster"))?;
    Ok((height, width, pixels.to_vec()))
}

fn write_png_bytes(path: &Path, height: usize, width: usize, pixels: Vec<u8>) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::format(path, "pixel buffer does not match image size"))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png_bytes(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

fn read_any(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm_bytes(path),
        _ => read_png_bytes(path),
    }
}

fn write_any(path: &Path, height: usize, width: usize, pixels: Vec<u8>) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => write_pgm_bytes(path, height, width, &pixels),
        Some("png") => write_png_bytes(path, height, width, pixels),
        _ => Err(Error::format(path, "unsupported image extension (use .pgm or .png)")),
    }
}

/// Save an image with values in `[0, 1]` as 8-bit PGM or PNG, chosen by extension.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    write_any(path, img.height, img.width, img.values.iter().map(|&v| quantize(v)).collect())
}

/// Load an 8-bit PGM or PNG image, scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let (height, width, px) = read_any(path)?;
    Ok(Image { height, width, values: px.iter().map(|&p| f64::from(p) / 255.0).collect() })
}

/// Save a mask as 0/255.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_any(path, mask.height, mask.width, mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect())
}

/// Load a mask, binarized at [`MASK_THRESHOLD`].
pub fn load_mask(path: &Path) -> Result<Mask> {
    let (height, width, px) = read_any(path)?;
    Ok(Mask { height, width, data: px.iter().map(|&p| p >= MASK_THRESHOLD).collect() })
}

/// Write `values` as PGM after min-max normalization (a constant field maps to 0).
pub fn save_pgm_normalized(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let px: Vec<u8> = values
        .iter()
        .map(|&v| if span > 0.0 { quantize((v - lo) / span) } else { 0 })
        .collect();
    write_pgm_bytes(path, height, width, &px)
}
