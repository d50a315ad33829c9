//! Binary PPM (P6, maxval 255) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `round(v · 255)`, clamped to the byte range.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes a `[C×H×W]` image with C = 1 (replicated to grey) or C = 3.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(Error::dim(format!("ppm needs [1|3×H×W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            let plane = if c == 1 { 0 } else { ch };
            out.push(to_byte(d[plane * h * w + i]));
        }
    }
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], at: &mut usize) -> Result<&'a str> {
    loop {
        while *at < bytes.len() && bytes[*at].is_ascii_whitespace() {
            *at += 1;
        }
        if bytes.get(*at) == Some(&b'#') {
            while *at < bytes.len() && bytes[*at] != b'\n' {
                *at += 1;
            }
        } else {
            break;
        }
    }
    let start = *at;
    while *at < bytes.len() && !bytes[*at].is_ascii_whitespace() {
        *at += 1;
    }
    std::str::from_utf8(&bytes[start..*at])
        .ok()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::format("ppm: truncated header"))
}

/// Decodes a P6 file with maxval 255 into `[3×H×W]` values `byte / 255`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut at = 0;
    if header_token(bytes, &mut at)? != "P6" {
        return Err(Error::format("ppm: not a P6 file"));
    }
    let mut num = |what: &str| -> Result<usize> {
        header_token(bytes, &mut at)?
            .parse()
            .map_err(|_| Error::format(format!("ppm: bad {what}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(Error::format(format!("ppm: maxval {max} unsupported")));
    }
    let pixels = bytes
        .get(at + 1..)
        .filter(|p| p.len() == 3 * w * h)
        .ok_or_else(|| Error::format("ppm: pixel data has the wrong length"))?;
    Tensor::new(&[3, h, w], {
        let mut d = vec![0.0; 3 * h * w];
        for (i, px) in pixels.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                d[ch * h * w + i] = px[ch] as f64 / 255.0;
            }
        }
        d
    })
}

/// Places `[C×H×W]` panels side by side, left to right.
pub fn hstack(panels: &[Tensor]) -> Result<Tensor> {
    let s = panels
        .first()
        .map(|p| p.shape().to_vec())
        .ok_or_else(|| Error::contract("hstack of no panels"))?;
    if s.len() != 3 || panels.iter().any(|p| p.shape() != s.as_slice()) {
        return Err(Error::dim("hstack panels must share a [C×H×W] shape"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = panels.len();
    let mut d = Vec::with_capacity(c * h * w * n);
    for ch in 0..c {
        for row in 0..h {
            for p in panels {
                let start = (ch * h + row) * w;
                d.extend_from_slice(&p.data()[start..start + w]);
            }
        }
    }
    Tensor::new(&[c, h, w * n], d)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}
