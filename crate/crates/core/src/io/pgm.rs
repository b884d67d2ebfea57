//! Binary greyscale PGM (`P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Returns the number and the offset where it starts.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (v, start))
            .ok_or_else(|| fmt_err(start, format!("{what} out of range")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fmt_err(0, "missing P5 magic"));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let (w, _) = hdr.number("width")?;
    let (h, _) = hdr.number("height")?;
    let (maxval, maxval_at) = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(fmt_err(maxval_at, format!("maxval {maxval} is not 255")));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fmt_err(hdr.pos, "expected whitespace before pixel data"));
    }
    let start = hdr.pos + 1;
    if w == 0 || h == 0 {
        return Err(fmt_err(start, format!("empty image {w}×{h}")));
    }
    let need = w.checked_mul(h).ok_or_else(|| fmt_err(start, "image too large"))?;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(fmt_err(bytes.len(), format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    if payload.len() > need {
        return Err(fmt_err(start + need, "trailing bytes after pixel data"));
    }
    Tensor::new(&[h, w], payload.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = t.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// `round(clamp(v)·255)`; NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn save_pgm(t: &Tensor, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_pgm(t)?)
}
