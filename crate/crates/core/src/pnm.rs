//! Binary netpbm I/O: P6 (8-bit RGB) for images and P5 (8-bit gray) for
//! masks, label maps and debug heatmaps.

use std::fs;
use std::path::Path;

use crate::error::{AcatError, Result};
use crate::tensor::{ActivationTensor, BinaryMask, Heatmap, LabelMap};

/// A decoded netpbm raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub samples: Vec<u8>,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = HeaderCursor { bytes, pos: 0 };
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(AcatError::format(0, "expected P5 or P6 magic")),
        };
        cur.pos = 2;
        let width = cur.number()?;
        let height = cur.number()?;
        let maxval = cur.number()?;
        if maxval != 255 {
            return Err(AcatError::format(
                cur.pos as u64,
                format!("only 8-bit rasters are supported, maxval is {maxval}"),
            ));
        }
        // Exactly one whitespace byte separates the header from the samples.
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(AcatError::format(cur.pos as u64, "missing header terminator")),
        }
        let need = width * height * channels;
        let body = &bytes[cur.pos..];
        if body.len() < need {
            return Err(AcatError::format(
                bytes.len() as u64,
                format!("truncated raster: {} of {need} sample bytes", body.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples: body[..need].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| AcatError::format(start as u64, "expected a decimal header field"))
    }
}

/// Maps a real in `[0, 1]` to the nearest 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// Rounds every value to the nearest 8-bit level so in-memory frames match
/// what a PPM round trip would produce.
pub fn quantize_tensor(t: &ActivationTensor) -> ActivationTensor {
    let (c, h, w) = t.dims();
    let data = t.data().iter().map(|&v| dequantize(quantize(v))).collect();
    ActivationTensor::from_raw(c, h, w, data)
}

pub fn image_to_raster(img: &ActivationTensor) -> Result<Raster> {
    if img.channels() != 3 {
        return Err(AcatError::config(format!(
            "PPM needs 3 channels, image has {}",
            img.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut samples = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                samples.push(quantize(img.get(c, i, j)));
            }
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        samples,
    })
}

pub fn raster_to_image(r: &Raster) -> Result<ActivationTensor> {
    if r.channels != 3 {
        return Err(AcatError::format(0, "expected an RGB (P6) raster"));
    }
    let (h, w) = (r.height, r.width);
    Ok(ActivationTensor::from_fn(3, h, w, |c, i, j| {
        dequantize(r.samples[(i * w + j) * 3 + c])
    }))
}

pub fn write_ppm(path: &Path, img: &ActivationTensor) -> Result<()> {
    image_to_raster(img)?.write(path)
}

pub fn read_ppm(path: &Path) -> Result<ActivationTensor> {
    raster_to_image(&Raster::read(path)?)
}

/// Masks are stored with 0 = adversarial and 255 = clean.
pub fn write_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    Raster {
        width: mask.width(),
        height: mask.height(),
        channels: 1,
        samples: mask.data().iter().map(|&v| v * 255).collect(),
    }
    .write(path)
}

/// Any nonzero sample reads as clean.
pub fn read_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let r = Raster::read(path)?;
    if r.channels != 1 {
        return Err(AcatError::format(0, "expected a gray (P5) mask"));
    }
    BinaryMask::new(
        r.height,
        r.width,
        r.samples.iter().map(|&s| u8::from(s != 0)).collect(),
    )
}

/// Per-pixel class indices stored verbatim as gray levels.
pub fn write_labels_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    Raster {
        width: labels.width,
        height: labels.height,
        channels: 1,
        samples: labels.data.clone(),
    }
    .write(path)
}

pub fn read_labels_pgm(path: &Path) -> Result<LabelMap> {
    let r = Raster::read(path)?;
    if r.channels != 1 {
        return Err(AcatError::format(0, "expected a gray (P5) label map"));
    }
    Ok(LabelMap {
        height: r.height,
        width: r.width,
        data: r.samples,
    })
}

/// Min-max scales a heatmap to 0..=255 for inspection.
pub fn write_heatmap_pgm(path: &Path, map: &Heatmap) -> Result<()> {
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    Raster {
        width: map.width(),
        height: map.height(),
        channels: 1,
        samples: map.data().iter().map(|&v| quantize((v - lo) / span)).collect(),
    }
    .write(path)
}
