//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenize::Image;

pub fn image_to_bytes(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::UnsupportedFormat(format!("{c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::CorruptHeader(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::CorruptHeader(format!("{what} out of range")))
    }
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::UnsupportedFormat("not a PNM file".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        d => return Err(Error::UnsupportedFormat(format!("P{}", d as char))),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::CorruptHeader("zero dimension".into()));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::CorruptHeader("missing separator before raster".into())),
    }
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::CorruptHeader("dimensions overflow".into()))?;
    let raster = &bytes[h.pos..];
    if raster.len() != n {
        return Err(Error::CorruptHeader(format!("expected {n} raster bytes, found {}", raster.len())));
    }
    Image::new(height, width, channels, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn load_image(path: &Path) -> Result<Image> {
    image_from_bytes(&std::fs::read(path)?)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    super::write_atomic(path, &image_to_bytes(img)?)
}
