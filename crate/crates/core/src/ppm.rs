//! Binary PPM (P6, 8-bit) image files.
//!
//! Images are `[3, H, W]` tensors with values in [-1, 1]; files store
//! interleaved RGB rows. Parse failures report the byte offset.

use std::fs;
use std::path::Path;

use crate::error::{Result, XmError};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

pub fn encode(img: &Tensor) -> Vec<u8> {
    assert!(
        img.shape.len() == 3 && img.shape[0] == 3,
        "expected [3,H,W] image, got {:?}",
        img.shape
    );
    let (h, w) = (img.shape[1], img.shape[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(img.data[(c * h + y) * w + x]));
            }
        }
    }
    out
}

pub fn save(path: &Path, img: &Tensor) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| XmError::io(path.display().to_string(), e))
}

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Scanner<'a> {
    fn err(&self, msg: impl Into<String>) -> XmError {
        XmError::Parse { path: self.path.clone(), offset: self.pos, msg: msg.into() }
    }

    fn skip_whitespace(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_whitespace();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected ASCII integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Tensor> {
    let mut s = Scanner { bytes, pos: 0, path: path.to_string() };
    if !bytes.starts_with(b"P6") {
        return Err(s.err("missing P6 magic"));
    }
    s.pos = 2;
    let w = s.number()?;
    let h = s.number()?;
    let maxval = s.number()?;
    if maxval != 255 {
        return Err(s.err(format!("unsupported maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from pixel data
    if s.pos >= bytes.len() || !bytes[s.pos].is_ascii_whitespace() {
        return Err(s.err("expected whitespace before pixel data"));
    }
    s.pos += 1;
    let need = w * h * 3;
    let have = bytes.len() - s.pos;
    if have < need {
        s.pos = bytes.len();
        return Err(s.err(format!("truncated pixel data: need {need} bytes, have {have}")));
    }
    let mut img = Tensor::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.data[(c * h + y) * w + x] = from_byte(bytes[s.pos]);
                s.pos += 1;
            }
        }
    }
    Ok(img)
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| XmError::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

/// Tile images into a `cols`-wide grid (row-major) for sample sheets.
pub fn grid(images: &[Tensor], cols: usize) -> Tensor {
    assert!(!images.is_empty() && cols > 0, "grid needs images and a column count");
    let (h, w) = (images[0].shape[1], images[0].shape[2]);
    let rows = images.len().div_ceil(cols);
    let mut out = Tensor::full(vec![3, rows * h, cols * w], -1.0);
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.shape, images[0].shape, "grid images must share a shape");
        let (r, c) = (i / cols, i % cols);
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data[(ch * rows * h + r * h + y) * cols * w + c * w + x] =
                        img.data[(ch * h + y) * w + x];
                }
            }
        }
    }
    out
}
