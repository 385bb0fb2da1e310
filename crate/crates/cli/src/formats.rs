//! PFM depth maps and binary PPM images.

use std::fs;
use std::io::Write;
use std::path::Path;

use depth_dissect_core::{Shape, Tensor};

use crate::error::{Error, Result};

/// Write a single-channel map as little-endian PFM (rows stored bottom-up).
pub fn write_pfm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::format(
            path,
            format!("PFM holds one channel, got {:?}", s.dims()),
        ));
    }
    let mut buf = format!("Pf\n{} {}\n-1.0\n", s.w, s.h).into_bytes();
    buf.reserve(4 * s.plane());
    for row in map.data().chunks(s.w).rev() {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a greyscale PFM into a `1×1×H×W` tensor. Both byte orders are accepted.
pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, body) =
        header_tokens(&bytes, 4).ok_or_else(|| Error::format(path, "truncated PFM header"))?;
    match tokens[0].as_str() {
        "Pf" => {}
        "PF" => return Err(Error::format(path, "colour PFM is not a depth map")),
        other => {
            return Err(Error::format(
                path,
                format!("not a PFM file (magic {other:?})"),
            ))
        }
    }
    let w = parse_dim(path, &tokens[1])?;
    let h = parse_dim(path, &tokens[2])?;
    let scale: f32 = tokens[3]
        .parse()
        .map_err(|_| Error::format(path, format!("bad PFM scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "PFM scale must be non-zero"));
    }
    let need = 4 * w * h;
    if body.len() != need {
        return Err(Error::format(
            path,
            format!("expected {need} bytes of samples, found {}", body.len()),
        ));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; w * h];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = v;
    }
    Ok(Tensor::from_vec(Shape::new(1, 1, h, w), data)?)
}

/// Write a `1×3×H×W` image with values in `[0, 1]` as 8-bit P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::format(
            path,
            format!("PPM holds three channels, got {:?}", s.dims()),
        ));
    }
    let mut f = Vec::with_capacity(3 * s.plane() + 20);
    write!(f, "P6\n{} {}\n255\n", s.w, s.h).expect("in-memory write");
    let planes: Vec<&[f32]> = (0..3).map(|c| image.plane(0, c)).collect();
    for i in 0..s.plane() {
        for p in &planes {
            f.push(quantize(p[i]));
        }
    }
    fs::write(path, f).map_err(|e| Error::io(path, e))
}

/// Read an 8-bit P6 image into a `1×3×H×W` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, body) =
        header_tokens(&bytes, 4).ok_or_else(|| Error::format(path, "truncated PPM header"))?;
    if tokens[0] != "P6" {
        return Err(Error::format(
            path,
            format!("not a binary PPM (magic {:?})", tokens[0]),
        ));
    }
    let w = parse_dim(path, &tokens[1])?;
    let h = parse_dim(path, &tokens[2])?;
    let max: u32 = tokens[3]
        .parse()
        .map_err(|_| Error::format(path, format!("bad PPM maxval {:?}", tokens[3])))?;
    if max == 0 || max > 255 {
        return Err(Error::format(
            path,
            format!("only 8-bit PPM is supported (maxval {max})"),
        ));
    }
    if body.len() != 3 * w * h {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes of pixels, found {}",
                3 * w * h,
                body.len()
            ),
        ));
    }
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / max as f32;
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, 3, h, w), data)?)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_dim(path: &Path, tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, format!("bad dimension {tok:?}"))),
    }
}

/// Split a netpbm-style header into `count` tokens, skipping `#` comments.
/// Exactly one whitespace byte separates the last token from the body.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, &[u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return None;
    }
    Some((tokens, &bytes[i + 1..]))
}
