//! Binary portable graymap (`P5`, maxval 255) reading and writing.
//!
//! Images are stored as `round(v * 255)` with halves rounded up; label maps
//! store the class index directly in each byte.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

pub const MAXVAL: u32 = 255;

pub fn header(width: usize, height: usize) -> String {
    format!("P5\n{width} {height}\n{MAXVAL}\n")
}

pub fn encode(width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    debug_assert_eq!(payload.len(), width * height);
    let mut out = header(width, height).into_bytes();
    out.extend_from_slice(payload);
    out
}

/// Decoded graymap: width, height, maxval and one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    /// Byte offset of the first pixel.
    pub offset: usize,
    pub pixels: Vec<u8>,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Data(format!("PGM header: expected {what} at byte offset {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("PGM header: {what} at byte offset {start} is out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Graymap> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Data("PGM header: missing \"P5\" magic at byte offset 0".into()));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")? as usize;
    let height = r.number("height")? as usize;
    let maxval = r.number("maxval")?;
    if maxval == 0 || maxval > MAXVAL {
        return Err(Error::Data(format!(
            "PGM header: maxval {maxval} unsupported (need 1..=255), before byte offset {}",
            r.pos
        )));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::Data(format!(
            "PGM header: expected a single whitespace byte after maxval at byte offset {}",
            r.pos
        )));
    }
    let start = r.pos + 1;
    let need = width * height;
    let available = bytes.len() - start;
    if available < need {
        return Err(Error::Data(format!(
            "PGM payload truncated: expected {need} bytes starting at byte offset {start}, found {available}"
        )));
    }
    Ok(Graymap {
        width,
        height,
        maxval,
        offset: start,
        pixels: bytes[start..start + need].to_vec(),
    })
}

/// Byte value of an intensity: `floor(v * 255 + 0.5)` clamped to `[0, 255]`.
pub fn quantize(v: f32) -> u8 {
    (v as f64 * MAXVAL as f64 + 0.5).floor().clamp(0.0, MAXVAL as f64) as u8
}

pub fn image_bytes(image: &Image) -> Vec<u8> {
    encode(image.width(), image.height(), &image.pixels().iter().map(|&v| quantize(v)).collect::<Vec<_>>())
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<Image> {
    let g = decode(bytes)?;
    let scale = g.maxval as f32;
    Image::new(g.height, g.width, g.pixels.iter().map(|&b| b as f32 / scale).collect())
}

pub fn label_bytes(labels: &LabelMap) -> Result<Vec<u8>> {
    if labels.batch() != 1 {
        return Err(Error::Usage(format!(
            "a label PGM holds one map, got a batch of {}",
            labels.batch()
        )));
    }
    Ok(encode(labels.width(), labels.height(), labels.data()))
}

pub fn labels_from_bytes(bytes: &[u8], classes: usize) -> Result<LabelMap> {
    let g = decode(bytes)?;
    if let Some(i) = g.pixels.iter().position(|&v| v as usize >= classes) {
        return Err(Error::Data(format!(
            "label value {} at byte offset {} is not below class count {classes}",
            g.pixels[i],
            g.offset + i
        )));
    }
    LabelMap::new(1, g.height, g.width, classes, g.pixels)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_image_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image_bytes(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    with_path(path, image_from_bytes(&read(path)?))
}

pub fn write_label_pgm(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, label_bytes(labels)?).map_err(|e| Error::io(path, e))
}

pub fn read_label_pgm(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    with_path(path, labels_from_bytes(&read(path)?, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_width_then_height() {
        assert_eq!(header(128, 64), "P5\n128 64\n255\n");
    }

    #[test]
    fn quantization_rounds_half_up() {
        let img = Image::new(2, 2, vec![0.0, 0.5, 0.5, 1.0]).unwrap();
        let bytes = image_bytes(&img);
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 128, 255]);
    }

    #[test]
    fn zero_labels_round_trip() {
        let m = LabelMap::filled(1, 3, 5, 8, 0).unwrap();
        assert_eq!(labels_from_bytes(&label_bytes(&m).unwrap(), 8).unwrap(), m);
    }

    #[test]
    fn image_round_trip_within_half_step() {
        let px: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let img = Image::new(8, 8, px).unwrap();
        let back = image_from_bytes(&image_bytes(&img)).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode(b"P2\n1 1\n255\n\x00"), Err(Error::Data(_))));
        let err = decode(b"P5\n4 4\n255\n\x00\x01").unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("byte offset 11"), "{err}");
        let err = decode(b"P5\n4 x\n255\n").unwrap_err().to_string();
        assert!(err.contains("height") && err.contains("byte offset 5"), "{err}");
        let err = labels_from_bytes(b"P5\n2 1\n255\n\x01\x09", 8).unwrap_err().to_string();
        assert!(err.contains("byte offset 12"), "{err}");
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let g = decode(b"P5\n# made by hand\n2 1\n255\n\x07\x08").unwrap();
        assert_eq!((g.width, g.height, g.offset, g.pixels.clone()), (2, 1, 26, vec![7, 8]));
    }
}
