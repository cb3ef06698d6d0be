//! Binary PGM (`P5`) and grayscale PNG output.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rounds `[0, 1]` values to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn single_channel(t: &Tensor, what: &str) -> Result<()> {
    if t.channels() != 1 {
        return Err(Error::Image(format!("{what} needs 1 channel, got {}", t.channels())));
    }
    Ok(())
}

pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    single_channel(t, "PGM")?;
    let mut out = format!("P5\n{} {}\n255\n", t.width(), t.height()).into_bytes();
    out.extend(t.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn save_pgm(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(t)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments running to end of line.
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Decodes a `P5` image with maxval <= 255 into `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return Err(c.err("missing P5 magic"));
    }
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    c.skip_space();
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte after maxval")),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| c.err("image dimensions overflow"))?;
    let data = &bytes[c.pos..];
    if data.len() < n {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated pixel data: {} of {n} bytes", data.len()),
        });
    }
    if data.len() > n {
        return Err(Error::Parse {
            offset: c.pos + n,
            msg: format!("{} trailing bytes", data.len() - n),
        });
    }
    let scale = maxval as f64;
    let mut values = Vec::with_capacity(n);
    for (i, &b) in data.iter().enumerate() {
        if b as usize > maxval {
            return Err(Error::Parse {
                offset: c.pos + i,
                msg: format!("sample {b} exceeds maxval {maxval}"),
            });
        }
        values.push(b as f64 / scale);
    }
    Tensor::new(1, height, width, values)
}

pub fn load_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}

pub fn save_png_gray(path: &Path, t: &Tensor) -> Result<()> {
    single_channel(t, "PNG")?;
    let (w, h) = (t.width() as u32, t.height() as u32);
    let buf: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(w, h, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))
}
