//! Binary PGM (P5) images.

use std::path::Path;

use super::{Result, SynthError};
use crate::tensor::Tensor;

fn bad(detail: impl Into<String>) -> SynthError {
    SynthError::Format {
        what: "PGM",
        detail: detail.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
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
        let digits = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        if digits.is_empty() {
            return Err(bad(format!("expected {what} at byte {start}")));
        }
        digits.parse().map_err(|_| bad(format!("{what} {digits} is too large")))
    }
}

/// Decodes a P5 image to a `1×H×W` tensor scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("empty image {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} outside 1..=65535")));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(bad("header must end with one whitespace byte")),
    }
    let depth = if maxval < 256 { 1 } else { 2 };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(depth))
        .ok_or_else(|| bad("image dimensions overflow"))?;
    let body = &bytes[h.pos..];
    if body.len() < need {
        return Err(bad(format!("truncated: {} of {need} pixel bytes", body.len())));
    }
    let scale = maxval as f64;
    let data: Vec<f64> = if depth == 1 {
        body[..need].iter().map(|&b| b as f64 / scale).collect()
    } else {
        body[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect()
    };
    if data.iter().any(|&v| v > 1.0) {
        return Err(bad(format!("pixel value above maxval {maxval}")));
    }
    Tensor::new(&[1, height, width], data).map_err(|e| bad(e.to_string()))
}

/// Encodes a `1×H×W` (or `H×W`) tensor as 8-bit P5, clamping to `[0, 1]`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    encode_pgm_annotated(image, None)
}

/// As [`encode_pgm`], with a single-line header comment.
pub fn encode_pgm_annotated(image: &Tensor, comment: Option<&str>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(SynthError::Usage(format!("PGM needs a 1×H×W image, got {s:?}"))),
    };
    let note = match comment {
        Some(c) if c.contains(['\n', '\r']) => {
            return Err(SynthError::Usage("PGM comment must be a single line".into()))
        }
        Some(c) => format!("# {c}\n"),
        None => String::new(),
    };
    let mut out = format!("P5\n{note}{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_pgm(&bytes).map_err(|e| match e {
        SynthError::Format { what, detail } => SynthError::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn write_pgm(path: &Path, image: &Tensor, comment: Option<&str>) -> Result<()> {
    let bytes = encode_pgm_annotated(image, comment)?;
    std::fs::write(path, bytes).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}
