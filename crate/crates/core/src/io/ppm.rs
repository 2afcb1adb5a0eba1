use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// 8-bit RGB image, row-major, three samples per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(
                "ImageBuffer::new",
                format!("{} bytes for a {width}x{height} RGB image", data.len()),
            ));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// `(1, 3, h, w)` tensor with samples divided by 255.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| {
            T::of(self.data[(y * self.width + x) * 3 + c] as f64 / 255.0)
        })
    }

    /// Clamps to `[0, 1]` and rounds half up to 8 bits.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::invalid(
                "ImageBuffer::from_tensor",
                format!("expected a (1, 3, h, w) tensor, got {s}"),
            ));
        }
        let mut data = Vec::with_capacity(s.numel());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    data.push(quantize(t.at(0, c, y, x).as_f64()));
                }
            }
        }
        Ok(ImageBuffer {
            width: s.w,
            height: s.h,
            data,
        })
    }
}

fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Parses a binary PPM with maxval 255. `#` comments are allowed in the header.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("header ends early".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(format!("expected magic P6, found `{magic}`"));
    }
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} `{t}`"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, only 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after maxval".into()),
    }
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        ));
    }
    if payload.len() > expected {
        return Err(format!(
            "trailing data: expected {expected} payload bytes, found {}",
            payload.len()
        ));
    }
    Ok(ImageBuffer {
        width,
        height,
        data: payload.to_vec(),
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|reason| Error::Image {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}
