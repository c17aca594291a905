//! Binary netpbm images: P6 (RGB) and P5 (grayscale), 8-bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Decoded image: `channels` is 3 for P6 and 1 for P5. Samples are row-major,
/// channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
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
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("bad {what} in netpbm header")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::format("not a binary PPM/PGM file (expected P6 or P5)")),
    };
    let mut header = Header { bytes, pos: 2 };
    let width = header.number("width")?;
    let height = header.number("height")?;
    let maxval = header.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(format!("only 8-bit images are supported, maxval is {maxval}")));
    }
    match bytes.get(header.pos) {
        Some(c) if c.is_ascii_whitespace() => header.pos += 1,
        _ => return Err(Error::format("missing whitespace after netpbm header")),
    }
    let expected = width * height * channels;
    let samples = &bytes[header.pos..];
    if samples.len() != expected {
        return Err(Error::format(format!(
            "expected {expected} bytes of pixel data, found {}",
            samples.len()
        )));
    }
    Ok(Pnm { width, height, channels, samples: samples.to_vec() })
}

pub fn encode(image: &Pnm) -> Result<Vec<u8>> {
    let magic = match image.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::invalid(format!("cannot encode {c}-channel image"))),
    };
    if image.samples.len() != image.width * image.height * image.channels {
        return Err(Error::shape("sample count does not match dimensions"));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.samples);
    Ok(out)
}

pub fn read(path: &Path) -> Result<Pnm> {
    decode(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, image: &Pnm) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(image)?)?;
    Ok(())
}

/// `3×h×w` tensor with values in `[0, 1]`.
pub fn to_tensor(image: &Pnm) -> Result<Tensor> {
    if image.channels != 3 {
        return Err(Error::format("expected an RGB (P6) image"));
    }
    let (h, w) = (image.height, image.width);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (i, px) in image.samples.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            t.set3(c, i / w, i % w, v as f64 / 255.0);
        }
    }
    Ok(t)
}

/// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
pub fn from_tensor(image: &Tensor) -> Result<Pnm> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let mut samples = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                samples.push((image.at3(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(Pnm { width: w, height: h, channels: 3, samples })
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    to_tensor(&read(path)?)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    write(path, &from_tensor(image)?)
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let p = read(path)?;
    if p.channels != 1 {
        return Err(Error::format(format!("{}: expected a grayscale (P5) mask", path.display())));
    }
    LabelMask::from_vec(p.height, p.width, p.samples)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let p = Pnm { width: mask.width(), height: mask.height(), channels: 1, samples: mask.labels().to_vec() };
    write(path, &p)
}
