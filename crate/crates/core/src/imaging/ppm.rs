//! Binary PPM (`P6`, maxval 255) reading and writing.
//!
//! Reads are lenient about whitespace and `#` comments in the header; writes
//! always emit the canonical `P6\n{w} {h}\n255\n` header so re-emitting a
//! parsed file reproduces it byte for byte.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub fn write_ppm(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    for i in 0..h * w {
        out.push(quantize(r[i]));
        out.push(quantize(g[i]));
        out.push(quantize(b[i]));
    }
    out
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut at = 0usize;
    let magic = next_token(bytes, &mut at)?;
    if magic != b"P6" {
        return Err(Error::format("PPM", "missing P6 magic"));
    }
    let w = parse_usize(next_token(bytes, &mut at)?)?;
    let h = parse_usize(next_token(bytes, &mut at)?)?;
    let maxval = parse_usize(next_token(bytes, &mut at)?)?;
    if maxval != 255 {
        return Err(Error::format(
            "PPM",
            format!("unsupported maxval {maxval}, expected 255"),
        ));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if at >= bytes.len() {
        return Err(Error::format("PPM", "truncated header"));
    }
    at += 1;
    let need = 3 * w * h;
    let payload = bytes
        .get(at..at + need)
        .ok_or_else(|| Error::format("PPM", "truncated pixel payload"))?;
    let hw = w * h;
    let mut data = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = f32::from(payload[3 * i + c]) / 255.0;
        }
    }
    Image::from_planar(h, w, data)
}

fn next_token<'a>(bytes: &'a [u8], at: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *at < bytes.len() && bytes[*at].is_ascii_whitespace() {
            *at += 1;
        }
        if *at < bytes.len() && bytes[*at] == b'#' {
            while *at < bytes.len() && bytes[*at] != b'\n' {
                *at += 1;
            }
            continue;
        }
        break;
    }
    let start = *at;
    while *at < bytes.len() && !bytes[*at].is_ascii_whitespace() {
        *at += 1;
    }
    if start == *at {
        return Err(Error::format("PPM", "truncated header"));
    }
    Ok(&bytes[start..*at])
}

fn parse_usize(token: &[u8]) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PPM", "non-numeric header field"))
}
