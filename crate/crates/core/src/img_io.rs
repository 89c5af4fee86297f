//! PPM (8-bit LDR) and PFM (float HDR) readers and writers.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::image::ImageBuf;

#[derive(Debug, Error)]
pub enum ImgIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image format error: {0}")]
    Format(String),
}

#[inline]
pub fn quantize_8bit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn dequantize_8bit(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Binary PPM (P6, maxval 255), rows top to bottom. Values outside [0,1]
/// are clamped by quantization.
pub fn write_ppm(img: &ImageBuf, path: &Path) -> Result<(), ImgIoError> {
    let mut buf = Vec::with_capacity(32 + img.n_pixels() * 3);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for px in &img.data {
        buf.push(quantize_8bit(px[0]));
        buf.push(quantize_8bit(px[1]));
        buf.push(quantize_8bit(px[2]));
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageBuf, ImgIoError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)?;
    if &magic != b"P6" {
        return Err(ImgIoError::Format("not a P6 ppm".into()));
    }
    let mut tokens = Vec::new();
    while tokens.len() < 3 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(ImgIoError::Format("truncated ppm header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    let width: usize = tokens[0]
        .parse()
        .map_err(|_| ImgIoError::Format("bad width".into()))?;
    let height: usize = tokens[1]
        .parse()
        .map_err(|_| ImgIoError::Format("bad height".into()))?;
    let maxval: u32 = tokens[2]
        .parse()
        .map_err(|_| ImgIoError::Format("bad maxval".into()))?;
    if maxval != 255 {
        return Err(ImgIoError::Format(format!("unsupported maxval {maxval}")));
    }
    let mut bytes = vec![0u8; width * height * 3];
    r.read_exact(&mut bytes)?;
    let mut img = ImageBuf::new(width, height);
    for (i, px) in img.data.iter_mut().enumerate() {
        *px = [
            dequantize_8bit(bytes[3 * i]),
            dequantize_8bit(bytes[3 * i + 1]),
            dequantize_8bit(bytes[3 * i + 2]),
        ];
    }
    Ok(img)
}

/// PFM color image, little-endian f32, scanlines bottom to top per the
/// format convention.
pub fn write_pfm(img: &ImageBuf, path: &Path) -> Result<(), ImgIoError> {
    let mut buf = Vec::with_capacity(32 + img.n_pixels() * 12);
    buf.extend_from_slice(format!("PF\n{} {}\n-1.0\n", img.width, img.height).as_bytes());
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            let px = img.get(x, y);
            for c in 0..3 {
                buf.extend_from_slice(&(px[c] as f32).to_le_bytes());
            }
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ImageBuf, ImgIoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    // Header: three whitespace-separated tokens, then a single separator byte.
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String, ImgIoError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImgIoError::Format("truncated pfm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token(&bytes)?;
    if magic != "PF" {
        return Err(ImgIoError::Format("not a color pfm".into()));
    }
    let width: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| ImgIoError::Format("bad width".into()))?;
    let height: usize = next_token(&bytes)?
        .parse()
        .map_err(|_| ImgIoError::Format("bad height".into()))?;
    let scale: f64 = next_token(&bytes)?
        .parse()
        .map_err(|_| ImgIoError::Format("bad scale".into()))?;
    pos += 1;
    let little_endian = scale < 0.0;
    let need = width * height * 12;
    if bytes.len() < pos + need {
        return Err(ImgIoError::Format("truncated pfm data".into()));
    }
    let mut img = ImageBuf::new(width, height);
    let mut off = pos;
    for y in (0..height).rev() {
        for x in 0..width {
            let mut px = [0.0f64; 3];
            for c in &mut px {
                let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                *c = v as f64;
                off += 4;
            }
            img.set(x, y, px);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut img = ImageBuf::new(3, 2);
        img.set(0, 0, [0.0, 0.5, 1.0]);
        img.set(2, 1, [0.25, 2.0, -1.0]);
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        assert_eq!(back.get(0, 0)[0], 0.0);
        assert!((back.get(0, 0)[1] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(back.get(0, 0)[2], 1.0);
        // out-of-range clamps
        assert_eq!(back.get(2, 1)[1], 1.0);
        assert_eq!(back.get(2, 1)[2], 0.0);
    }

    #[test]
    fn ppm_quantization_is_nearest() {
        assert_eq!(quantize_8bit(0.5), 128);
        assert_eq!(quantize_8bit(0.0), 0);
        assert_eq!(quantize_8bit(1.0), 255);
        // half-quantum rounds up
        assert_eq!(quantize_8bit(0.5 / 255.0), 1);
    }

    #[test]
    fn pfm_round_trip_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pfm");
        let mut img = ImageBuf::new(2, 3);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = [i as f64 * 0.625, 10.0 - i as f64, 1e-6];
        }
        write_pfm(&img, &path).unwrap();
        let back = read_pfm(&path).unwrap();
        assert_eq!(back.width, 2);
        assert_eq!(back.height, 3);
        for (a, b) in back.data.iter().zip(&img.data) {
            for c in 0..3 {
                assert_eq!(a[c], b[c] as f32 as f64);
            }
        }
    }

    #[test]
    fn ppm_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        let img = ImageBuf::filled(4, 4, [0.123, 0.456, 0.789]);
        write_ppm(&img, &p1).unwrap();
        write_ppm(&img, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
