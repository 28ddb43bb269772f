//! In-memory rasters and binary Netpbm (P5/P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Result, TaxError};

/// Interleaved 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage { height, width, data: vec![0; height * width * 3] }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, H, W]` floats, scaled to roughly zero mean and unit range.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                out[c * hw + p] = (self.data[p * 3 + c] as f32 / 255.0 - 0.5) / 0.25;
            }
        }
        out
    }

    /// Copy of the `h x w` window at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> RgbImage {
        let mut out = RgbImage::new(h, w);
        for y in 0..h {
            for x in 0..w {
                out.put(y, x, self.get(y0 + y, x0 + x));
            }
        }
        out
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn enlarge(&self, factor: usize) -> RgbImage {
        let mut out = RgbImage::new(self.height * factor, self.width * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                out.put(y, x, self.get(y / factor, x / factor));
            }
        }
        out
    }
}

/// Single-channel 8-bit label map (class or annotator index per pixel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(TaxError::shape("mask length", height * width, data.len()));
        }
        Ok(Mask { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format!("expected a number at byte {start}"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad number at byte {start}"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (only 8-bit data)"));
    }
    Ok(Header { width, height, data_offset: pos + 1 })
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let h = parse_header(bytes, b"P6")?;
    let n = h.width * h.height * 3;
    let data = bytes.get(h.data_offset..h.data_offset + n).ok_or("truncated pixel data")?;
    Ok(RgbImage { height: h.height, width: h.width, data: data.to_vec() })
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Mask, String> {
    let h = parse_header(bytes, b"P5")?;
    let n = h.width * h.height;
    let data = bytes.get(h.data_offset..h.data_offset + n).ok_or("truncated pixel data")?;
    Ok(Mask { height: h.height, width: h.width, data: data.to_vec() })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| TaxError::io(path, e))
}

pub fn write_pgm(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| TaxError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| TaxError::io(path, e))?;
    decode_ppm(&bytes).map_err(|msg| TaxError::Format { path: path.into(), format: "PPM", msg })
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| TaxError::io(path, e))?;
    decode_pgm(&bytes).map_err(|msg| TaxError::Format { path: path.into(), format: "PGM", msg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_with_comment() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        let m = decode_pgm(bytes).unwrap();
        assert_eq!((m.width, m.height, m.data.clone()), (2, 1, vec![1, 2]));
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    proptest! {
        #[test]
        fn ppm_roundtrip(h in 1usize..6, w in 1usize..6, seed in any::<u8>()) {
            let mut img = RgbImage::new(h, w);
            for (i, v) in img.data.iter_mut().enumerate() {
                *v = (i as u8).wrapping_mul(37).wrapping_add(seed);
            }
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        }

        #[test]
        fn pgm_roundtrip(data in prop::collection::vec(any::<u8>(), 12)) {
            let m = Mask::from_vec(3, 4, data).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
        }
    }
}
