//! 8-bit binary portable pixmaps: P6 colour images and P5 grey maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |why: &str| Error::Format(format!("pixmap header: {why}"));
    if bytes.len() < 2 {
        return Err(bad("too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected a number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator before raster"));
    }
    Ok(Header { magic, width: fields[0], height: fields[1], maxval: fields[2], data_start: pos + 1 })
}

/// Decodes a binary P6 image to `[1,3,H,W]` with values in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Format("only binary P6 colour images are supported".into()));
    }
    if h.maxval != 255 {
        return Err(Error::Format(format!("only 8-bit images are supported (maxval {})", h.maxval)));
    }
    if h.width == 0 || h.height == 0 {
        return Err(Error::Format("empty image".into()));
    }
    let n = h.width * h.height;
    let raster =
        bytes.get(h.data_start..h.data_start + 3 * n).ok_or_else(|| Error::Format("truncated raster".into()))?;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(data, &[1, 3, h.height, h.width])
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[1,3,H,W]` (values clamped to `[0,1]`) as binary P6.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    if img.ndim() != 4 || img.dim(0) != 1 || img.dim(1) != 3 {
        return Err(Error::Input(format!("expected [1,3,H,W], got {:?}", img.shape())));
    }
    let (h, w) = (img.dim(2), img.dim(3));
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..n {
        out.extend((0..3).map(|c| to_byte(d[c * n + i])));
    }
    Ok(out)
}

/// Encodes a row-major grey map with values already in `0..=255`.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Input(format!("{} pixels for a {width}x{height} map", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path).map_err(|e| io_err(path, e))?)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| io_err(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)?).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_with_comment() {
        let img = Tensor::new((0..12).map(|i| i as f64 / 11.0).collect(), &[1, 3, 2, 2]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-12);
        let mut commented = b"P6 # made by hand\n2 2\n255\n".to_vec();
        commented.extend_from_slice(&bytes[bytes.len() - 12..]);
        assert_eq!(decode_ppm(&commented).unwrap().data(), back.data());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_layout() {
        let b = encode_pgm(2, 1, &[0, 255]).unwrap();
        assert_eq!(b, b"P5\n2 1\n255\n\x00\xff");
    }
}
