//! Binary PPM (P6, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::hwc_dims;
use crate::tensor::{Real, Tensor};

/// 8-bit RGB image, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn skip_ws_and_comments(buf: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < buf.len() && buf[pos] == b'#' {
            while pos < buf.len() && buf[pos] != b'\n' && buf[pos] != b'\r' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    *pos = skip_ws_and_comments(buf, *pos);
    let start = *pos;
    while *pos < buf.len() && buf[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format(format!("PPM header: missing {what}")));
    }
    std::str::from_utf8(&buf[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| Error::Format(format!("PPM header: {what} out of range")))
}

pub fn decode_ppm(buf: &[u8]) -> Result<Rgb8> {
    if buf.len() < 2 || buf[0] != b'P' {
        return Err(Error::Format("not a PNM file".into()));
    }
    if buf[1] != b'6' {
        return Err(Error::UnsupportedFormat(format!(
            "PNM variant P{} (only binary P6 is supported)",
            buf[1] as char
        )));
    }
    let mut pos = 2;
    if pos < buf.len() && !buf[pos].is_ascii_whitespace() && buf[pos] != b'#' {
        return Err(Error::Format("PPM header: expected whitespace after magic".into()));
    }
    let width = header_number(buf, &mut pos, "width")?;
    let height = header_number(buf, &mut pos, "height")?;
    let maxval = header_number(buf, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("PPM header: zero extent {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval} (only 255 is supported)")));
    }
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(Error::Format("PPM header: expected one whitespace byte before raster".into()));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| Error::Format("PPM dimensions overflow".into()))?;
    if buf.len() - pos < n {
        return Err(Error::Format(format!(
            "PPM raster truncated: expected {n} bytes, found {}",
            buf.len() - pos
        )));
    }
    Ok(Rgb8 {
        width,
        height,
        pixels: buf[pos..pos + n].to_vec(),
    })
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// `v / 255` into an `[H, W, 3]` tensor.
pub fn to_tensor<T: Real>(img: &Rgb8) -> Tensor<T> {
    let data = img.pixels.iter().map(|&b| T::of(f64::from(b) / 255.0)).collect();
    Tensor::from_vec(&[img.height, img.width, 3], data).expect("dimensions checked on decode")
}

/// Clamp to `[0, 1]` and quantize with round-half-up.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Rgb8> {
    let [h, w, c] = hwc_dims(t, "write_image")?;
    if c != 3 && c != 1 {
        return Err(Error::shape("write_image", format!("expected 1 or 3 channels, got {c}")));
    }
    let mut pixels = Vec::with_capacity(h * w * 3);
    for px in t.data().chunks(c) {
        if c == 3 {
            pixels.extend(px.iter().map(|v| quantize(v.as_f64())));
        } else {
            pixels.extend([quantize(px[0].as_f64()); 3]);
        }
    }
    Ok(Rgb8 {
        width: w,
        height: h,
        pixels,
    })
}

pub fn read_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
        .map(|img| to_tensor(&img))
        .map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
            other => other,
        })
}

/// Write `[H, W, 3]` (or single-channel `[H, W, 1]` as gray) to P6.
pub fn write_image<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let bytes = encode_ppm(&from_tensor(t)?);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_red_pixel() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00").unwrap();
        let t = to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[1, 1, 3]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn half_rounds_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(127.0 / 255.0), 127);
    }

    #[test]
    fn comments_and_whitespace_in_header() {
        let img = decode_ppm(b"P6 # note\n2\t1 # more\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn unsupported_and_malformed() {
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n0 0 0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_ppm(b"P6\n1\n"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode_ppm(b"GIF89a"), Err(Error::Format(_))));
    }

    #[test]
    fn byte_exact_round_trip() {
        let pixels: Vec<u8> = (0..=255u8).cycle().take(5 * 4 * 3).collect();
        let img = Rgb8 { width: 5, height: 4, pixels };
        let bytes = encode_ppm(&img);
        let t = to_tensor::<f32>(&decode_ppm(&bytes).unwrap());
        assert_eq!(encode_ppm(&from_tensor(&t).unwrap()), bytes);
    }
}
