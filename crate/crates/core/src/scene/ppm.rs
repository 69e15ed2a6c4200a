//! Binary PPM (`P6`, maxval 255) for `[3, H, W]` images in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::ad::Tensor;
use crate::error::{Error, Result};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("ppm encode", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..3 {
            out.push(quantize(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a `P6` file; `file` only labels errors.
pub fn decode(bytes: &[u8], file: &Path) -> Result<Tensor> {
    let bad = |field: &str, reason: String| Error::format(file, field, reason);
    let mut pos = 0usize;
    let mut token = |name: &str| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(name, "missing header token".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token("magic")?;
    if magic != "P6" {
        return Err(bad("magic", format!("expected P6, found {magic:?}")));
    }
    let parse = |name: &str, s: String| s.parse::<usize>().map_err(|_| bad(name, format!("not an integer: {s:?}")));
    let w = parse("width", token("width")?)?;
    let h = parse("height", token("height")?)?;
    let maxval = parse("maxval", token("maxval")?)?;
    if maxval != 255 {
        return Err(bad("maxval", format!("expected 255, found {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad("size", format!("empty image {w}x{h}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * 3;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(bad("raster", format!("expected {need} bytes, found {}", raster.len())));
    }
    let mut data = vec![0.0; need];
    for p in 0..w * h {
        for ch in 0..3 {
            data[ch * h * w + p] = raster[p * 3 + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
