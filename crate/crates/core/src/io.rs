//! Netpbm (P5/P6) and PFM image files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Real;

/// Quantizes a [0,1] value to 8 bits, rounding half to even.
pub fn quantize_u8<T: Real>(v: T) -> u8 {
    let v = v.as_f64();
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round_ties_even() as u8
}

pub fn dequantize_u8<T: Real>(v: u8) -> T {
    T::lit(f64::from(v) / 255.0)
}

/// Encodes a 3-channel image as binary PPM (P6).
pub fn encode_ppm<T: Real>(img: &ImageBuffer<T>) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

/// Encodes a 1-channel image as binary PGM (P5).
pub fn encode_pgm<T: Real>(img: &ImageBuffer<T>) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("PGM needs 1 channel, got {}", img.channels())));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

pub fn encode_pgm_bytes(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format("non-ascii header".into()))
    }

    fn number<N: std::str::FromStr>(&mut self) -> Result<N> {
        let t = self.token()?;
        t.parse().map_err(|_| Error::Format(format!("bad header number {t:?}")))
    }

    /// Skips the single whitespace byte that ends the header.
    fn body(self) -> Result<&'a [u8]> {
        if self.pos >= self.bytes.len() {
            return Err(Error::Format("missing raster".into()));
        }
        Ok(&self.bytes[self.pos + 1..])
    }
}

fn decode_netpbm<T: Real>(bytes: &[u8], magic: &str, channels: usize) -> Result<ImageBuffer<T>> {
    let mut h = HeaderReader { bytes, pos: 0 };
    let m = h.token()?;
    if m != magic {
        return Err(Error::Format(format!("expected {magic}, found {m}")));
    }
    let width: usize = h.number()?;
    let height: usize = h.number()?;
    let maxval: u32 = h.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit netpbm supported, maxval {maxval}")));
    }
    let body = h.body()?;
    let n = width * height * channels;
    if body.len() < n {
        return Err(Error::Format(format!("raster has {} bytes, expected {n}", body.len())));
    }
    ImageBuffer::from_vec(height, width, channels, body[..n].iter().map(|&b| dequantize_u8(b)).collect())
}

pub fn decode_ppm<T: Real>(bytes: &[u8]) -> Result<ImageBuffer<T>> {
    decode_netpbm(bytes, "P6", 3)
}

pub fn decode_pgm<T: Real>(bytes: &[u8]) -> Result<ImageBuffer<T>> {
    decode_netpbm(bytes, "P5", 1)
}

/// Encodes a 1- or 3-channel image as little-endian PFM (scale −1.0).
///
/// PFM stores rows bottom-to-top; the in-memory image is top-to-bottom.
pub fn encode_pfm<T: Real>(img: &ImageBuffer<T>) -> Result<Vec<u8>> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::ShapeMismatch(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row = img.width() * img.channels();
    for y in (0..img.height()).rev() {
        for &v in &img.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm<T: Real>(bytes: &[u8]) -> Result<ImageBuffer<T>> {
    let mut h = HeaderReader { bytes, pos: 0 };
    let channels = match h.token()? {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::Format(format!("not a PFM file (magic {m})"))),
    };
    let width: usize = h.number()?;
    let height: usize = h.number()?;
    let scale: f64 = h.number()?;
    let little = scale < 0.0;
    let body = h.body()?;
    let n = width * height * channels;
    if body.len() < 4 * n {
        return Err(Error::Format(format!("raster has {} bytes, expected {}", body.len(), 4 * n)));
    }
    let mut data = vec![T::zero(); n];
    let row = width * channels;
    for (i, chunk) in body[..4 * n].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, col) = (i / row, i % row);
        data[(height - 1 - file_row) * row + col] = T::lit(f64::from(v));
    }
    ImageBuffer::from_vec(height, width, channels, data)
}

pub fn write_ppm<T: Real>(path: impl AsRef<Path>, img: &ImageBuffer<T>) -> Result<()> {
    write_bytes(path, &encode_ppm(img)?)
}

pub fn write_pgm<T: Real>(path: impl AsRef<Path>, img: &ImageBuffer<T>) -> Result<()> {
    write_bytes(path, &encode_pgm(img)?)
}

pub fn write_pfm<T: Real>(path: impl AsRef<Path>, img: &ImageBuffer<T>) -> Result<()> {
    write_bytes(path, &encode_pfm(img)?)
}

pub fn read_ppm<T: Real>(path: impl AsRef<Path>) -> Result<ImageBuffer<T>> {
    decode_ppm(&fs::read(path)?)
}

pub fn read_pgm<T: Real>(path: impl AsRef<Path>) -> Result<ImageBuffer<T>> {
    decode_pgm(&fs::read(path)?)
}

pub fn read_pfm<T: Real>(path: impl AsRef<Path>) -> Result<ImageBuffer<T>> {
    decode_pfm(&fs::read(path)?)
}

/// Reads any supported format, chosen by extension.
pub fn read_image<T: Real>(path: impl AsRef<Path>) -> Result<ImageBuffer<T>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") => read_ppm(path),
        Some("pgm") => read_pgm(path),
        Some("pfm") => read_pfm(path),
        _ => Err(Error::Format(format!("unsupported image extension: {}", path.display()))),
    }
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
