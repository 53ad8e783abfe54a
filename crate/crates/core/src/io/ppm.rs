//! Binary portable pixmaps: P6 for RGB images, P5 for masks.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error as CrateError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("maxval must be 255, found {0}")]
    BadMaxval(u64),
    #[error("short payload: expected {expected} bytes, found {found}")]
    ShortPayload { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("image shape mismatch: {0}")]
    Shape(String),
}

/// 8-bit samples, row-major, interleaved channels (3 for RGB, 1 for gray).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> std::result::Result<Self, ImageError> {
        if !(channels == 1 || channels == 3) || data.len() != width * height * channels {
            return Err(ImageError::Shape(format!(
                "{} samples for {width}×{height}×{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// `[1, C, H, W]` in `[−1, 1]` via `v / 127.5 − 1`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0; c * h * w];
        for (i, &v) in self.data.iter().enumerate() {
            let (pix, ch) = (i / c, i % c);
            out[ch * h * w + pix] = v as f64 / 127.5 - 1.0;
        }
        Tensor::new(&[1, c, h, w], out).expect("shape from buffer")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor), clamping and rounding half
    /// up.
    pub fn from_tensor(t: &Tensor) -> std::result::Result<Self, ImageError> {
        let [1, c, h, w] = *t.shape() else {
            return Err(ImageError::Shape(format!("expected [1, C, H, W], got {:?}", t.shape())));
        };
        let mut data = vec![0u8; c * h * w];
        for ch in 0..c {
            for pix in 0..h * w {
                data[pix * c + ch] = to_byte(t.data()[ch * h * w + pix]);
            }
        }
        Self::new(w, h, c, data)
    }

    /// Gray values mapped to `[0, 1]` by `/255`, row-major.
    pub fn unit_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parse P6 (`channels = 3`) or P5 (`channels = 1`).
    pub fn decode(bytes: &[u8], channels: usize) -> std::result::Result<Self, ImageError> {
        let expected = if channels == 3 { "P6" } else { "P5" };
        if bytes.len() < 2 || &bytes[..2] != expected.as_bytes() {
            return Err(ImageError::BadMagic {
                expected,
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
            });
        }
        let mut pos = 2;
        let mut fields = [0u64; 3];
        for field in &mut fields {
            skip_space_and_comments(bytes, &mut pos)?;
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Header("expected a decimal number".into()));
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .expect("ascii digits")
                .parse()
                .map_err(|_| ImageError::Header("number out of range".into()))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(ImageError::BadMaxval(maxval));
        }
        // Exactly one whitespace byte separates the header from the samples.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(ImageError::Header("missing whitespace after maxval".into()));
        }
        pos += 1;
        let (width, height) = (width as usize, height as usize);
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| ImageError::Header("dimensions overflow".into()))?;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(ImageError::ShortPayload {
                expected: need,
                found: payload.len(),
            });
        }
        Self::new(width, height, channels, payload[..need].to_vec())
    }
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) -> std::result::Result<(), ImageError> {
    let start = *pos;
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            Some(_) if *pos > start => return Ok(()),
            Some(_) => return Err(ImageError::Header("expected whitespace".into())),
            None => return Err(ImageError::Header("header ends early".into())),
        }
    }
}

/// `[−1, 1] → [0, 255]`, round half up.
pub fn to_byte(x: f64) -> u8 {
    let v = ((x + 1.0) * 127.5 + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

pub fn read_ppm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| CrateError::io(path, e))?;
    Ok(ImageBuffer::decode(&bytes, 3)?)
}

pub fn read_pgm(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| CrateError::io(path, e))?;
    Ok(ImageBuffer::decode(&bytes, 1)?)
}

/// Writes P6 or P5 according to the channel count.
pub fn write_pnm(path: &Path, img: &ImageBuffer) -> Result<()> {
    std::fs::write(path, img.encode()).map_err(|e| CrateError::io(path, e))
}

/// Tile equal-sized images into rows separated by `gap` pixels of mid gray.
pub fn montage(rows: &[Vec<Tensor>], gap: usize) -> Result<ImageBuffer> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| CrateError::InvalidArgument("montage needs at least one cell".into()))?;
    let cells: Vec<Vec<ImageBuffer>> = rows
        .iter()
        .map(|r| r.iter().map(ImageBuffer::from_tensor).collect::<std::result::Result<_, _>>())
        .collect::<std::result::Result<_, _>>()?;
    let (cw, ch, c) = (first.shape()[3], first.shape()[2], first.shape()[1]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = cols * cw + cols.saturating_sub(1) * gap;
    let height = rows.len() * ch + rows.len().saturating_sub(1) * gap;
    let mut data = vec![128u8; width * height * c];
    for (r, row) in cells.iter().enumerate() {
        for (k, cell) in row.iter().enumerate() {
            if (cell.width, cell.height, cell.channels) != (cw, ch, c) {
                return Err(ImageError::Shape("montage cells differ in size".into()).into());
            }
            let (x0, y0) = (k * (cw + gap), r * (ch + gap));
            for y in 0..ch {
                let src = &cell.data[y * cw * c..(y + 1) * cw * c];
                let dst = ((y0 + y) * width + x0) * c;
                data[dst..dst + cw * c].copy_from_slice(src);
            }
        }
    }
    Ok(ImageBuffer::new(width, height, c, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_file_layout() {
        let img = ImageBuffer::new(1, 1, 3, vec![255, 255, 255]).unwrap();
        let bytes = img.encode();
        // "P6\n" + "1 1\n" + "255\n" is 11 header bytes, then 3 samples.
        assert_eq!(bytes.len(), 3 + 4 + 4 + 3);
        assert_eq!(&bytes[..11], b"P6\n1 1\n255\n");
        assert_eq!(ImageBuffer::decode(&bytes, 3).unwrap(), img);
    }

    #[test]
    fn byte_round_trip_through_model_space() {
        let data: Vec<u8> = (0..=255).collect();
        let img = ImageBuffer::new(256, 1, 1, data).unwrap();
        let back = ImageBuffer::from_tensor(&img.to_tensor()).unwrap();
        assert_eq!(back, img);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(5.0), 255);
        // 0.0 maps to 127.5, which rounds up.
        assert_eq!(to_byte(0.0), 128);
    }

    #[test]
    fn channel_layout_is_planar_in_tensors() {
        let img = ImageBuffer::new(2, 1, 3, vec![0, 255, 0, 255, 0, 255]).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, 1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(ImageBuffer::decode(b"P3\n1 1\n255\n\0\0\0", 3), Err(ImageError::BadMagic { .. })));
        assert_eq!(ImageBuffer::decode(b"P6\n1 1\n65535\n\0\0\0", 3), Err(ImageError::BadMaxval(65535)));
        assert_eq!(
            ImageBuffer::decode(b"P6\n2 1\n255\n\0\0\0", 3),
            Err(ImageError::ShortPayload { expected: 6, found: 3 })
        );
        assert!(matches!(ImageBuffer::decode(b"P6\n1", 3), Err(ImageError::Header(_))));
    }

    #[test]
    fn comments_and_single_whitespace() {
        // The byte after maxval is whitespace; the next one is a sample even
        // though it happens to be a newline code.
        let img = ImageBuffer::decode(b"P5\n# mask\n2 1\n255\n\n\xff", 1).unwrap();
        assert_eq!(img.data(), &[10, 255]);
        assert_eq!(img.unit_values(), vec![10.0 / 255.0, 1.0]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = ImageBuffer::new(3, 2, 3, (0..18).map(|v| v * 13).collect()).unwrap();
        write_pnm(&path, &img).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), img);
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn montage_places_cells() {
        let a = Tensor::full(&[1, 1, 2, 2], -1.0);
        let b = Tensor::full(&[1, 1, 2, 2], 1.0);
        let m = montage(&[vec![a, b]], 1).unwrap();
        assert_eq!((m.width(), m.height()), (5, 2));
        assert_eq!(&m.data()[..5], &[0, 0, 128, 255, 255]);
    }
}
