//! Grayscale image files: binary PGM/PPM always, PNG with the `png` feature.
//!
//! Color inputs are reduced to BT.601 luminance.

use std::fs;
use std::path::Path;

use priorfuse::metrics::GrayImage;
use priorfuse::{Error, Result};

fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round().clamp(0.0, 255.0) as u8
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn read(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(b"\x89PNG") {
        return read_png(path, &bytes);
    }
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, img: &GrayImage) -> Result<()> {
    if is_png(path) {
        return write_png(path, img);
    }
    fs::write(path, encode_pgm(img)).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Header fields are whitespace-separated; `#` starts a comment up to end of line.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Input(format!("malformed header: bad {what}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<GrayImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Input("not a binary PGM (P5) or PPM (P6) file".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Input(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Input(format!("only 8-bit images are supported, maxval is {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Input("malformed header: missing separator before raster".into()));
    }
    let raster = &bytes[h.pos + 1..];
    let need = width * height * channels;
    if raster.len() < need {
        return Err(Error::Input(format!(
            "truncated raster: {width}x{height} needs {need} bytes, found {}",
            raster.len()
        )));
    }
    let scale = |v: u8| if maxval == 255 { v } else { ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8 };
    let pixels = if channels == 1 {
        raster[..need].iter().map(|&v| scale(v)).collect()
    } else {
        raster[..need].chunks_exact(3).map(|p| luma(scale(p[0]), scale(p[1]), scale(p[2]))).collect()
    };
    GrayImage::new(width, height, pixels)
}

#[cfg(feature = "png")]
fn read_png(path: &Path, bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| luma(p[0], p[1], p[2])).collect();
    GrayImage::new(w as usize, h as usize, pixels)
}

#[cfg(not(feature = "png"))]
fn read_png(path: &Path, _: &[u8]) -> Result<GrayImage> {
    Err(Error::Input(format!("{}: PNG support is not compiled in (enable the `png` feature)", path.display())))
}

#[cfg(feature = "png")]
fn write_png(path: &Path, img: &GrayImage) -> Result<()> {
    image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .expect("pixel count matches")
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

#[cfg(not(feature = "png"))]
fn write_png(path: &Path, _: &GrayImage) -> Result<()> {
    Err(Error::Input(format!("{}: PNG support is not compiled in (enable the `png` feature)", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::from_fn(5, 3, |r, c| (r * 40 + c) as u8);
        assert_eq!(decode_pnm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn header_comments_and_maxval() {
        let mut bytes = b"P5\n# made by hand\n2 1 # size\n15\n".to_vec();
        bytes.extend([0, 15]);
        assert_eq!(decode_pnm(&bytes).unwrap().pixels, vec![0, 255]);
    }

    #[test]
    fn ppm_becomes_luminance() {
        let mut bytes = b"P6 2 1 255\n".to_vec();
        bytes.extend([255, 0, 0, 10, 10, 10]);
        assert_eq!(decode_pnm(&bytes).unwrap().pixels, vec![76, 10]);
    }

    #[test]
    fn truncated_and_wrong_magic() {
        assert!(matches!(decode_pnm(b"P5 4 4 255\n\0\0"), Err(Error::Input(_))));
        assert!(matches!(decode_pnm(b"P2 1 1 255\n0"), Err(Error::Input(_))));
        assert!(matches!(decode_pnm(b"P5 1 1 65535\n\0\0"), Err(Error::Input(_))));
    }
}
