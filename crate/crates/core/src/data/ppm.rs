//! Binary PPM (`P6`, RGB) and PGM (`P5`, gray or labels) with maxval 255.

use std::path::Path;

use super::Raster;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<(usize, &'a [u8])> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(parse_err(*pos, format!("truncated header: missing {what}"))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok((start, &bytes[start..*pos]))
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let (at, t) = token(bytes, pos, what)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| parse_err(at, format!("bad {what} {:?}", String::from_utf8_lossy(t))))
}

/// Parses a `P6` or `P5` image.
pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos, "magic")?.1 {
        b"P6" => 3,
        b"P5" => 1,
        m => {
            return Err(parse_err(
                0,
                format!("unsupported magic {:?}", String::from_utf8_lossy(m)),
            ))
        }
    };
    let width = number(bytes, &mut pos, "width")?;
    let height = number(bytes, &mut pos, "height")?;
    let at = bytes[pos..]
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .map_or(pos, |o| pos + o);
    let maxval = number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(parse_err(at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(parse_err(pos, "missing whitespace after maxval"));
    }
    pos += 1;
    let n = channels * width * height;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: need {n} bytes, {} present", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(parse_err(pos + n, "trailing bytes after payload"));
    }
    let hw = width * height;
    let mut data = vec![0u8; n];
    for (p, px) in payload.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * hw + p] = v;
        }
    }
    Raster::new(channels, height, width, data)
}

/// Encodes a 1- or 3-channel raster.
pub fn encode_pnm(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::invalid(format!("cannot encode a {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    let hw = r.height * r.width;
    out.reserve(r.data.len());
    for p in 0..hw {
        for c in 0..r.channels {
            out.push(r.data[c * hw + p]);
        }
    }
    Ok(out)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode_pnm(r)?).map_err(|e| Error::io(path, e))
}

/// Loads an image as a `[1, C, H, W]` tensor in `[-1, 1]`.
pub fn load_image_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(read_raster(path)?.to_tensor())
}

/// Quantizes a `[1, C, H, W]` tensor and writes it as PPM/PGM.
pub fn save_image_ppm<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (n, ..) = t.dims4()?;
    if n != 1 {
        return Err(Error::invalid(format!(
            "can only save a single image, got batch of {n}"
        )));
    }
    write_raster(path, &Raster::from_tensor(t, 0)?)
}
