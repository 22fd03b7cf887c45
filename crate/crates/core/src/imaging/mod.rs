//! Image I/O and normalization. The native on-disk formats are binary PPM
//! (P6, three channels) and PGM (P5, one channel) with 8-bit samples, which
//! round-trip bit-exactly.

mod blur;
mod canny;

pub use blur::{
    frame_average, gaussian_kernel, make_dataset, synthesize_blur, BlurMode, BlurSpec,
    DatasetSpec, Kernel2d, Manifest, ManifestEntry, SynthMode,
};
pub use canny::canny;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major interleaved 8-bit image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(
                "image",
                format!("unsupported channel count {channels}"),
            ));
        }
        if data.len() != width * height * channels {
            return Err(Error::invalid(
                "image",
                format!(
                    "{}x{}x{} needs {} samples, got {}",
                    width,
                    height,
                    channels,
                    width * height * channels,
                    data.len()
                ),
            ));
        }
        Ok(Image8 {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Image8 {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn sample(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luma conversion (Rec. 601 weights), identity for single-channel input.
    pub fn to_gray(&self) -> Image8 {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for px in self.data.chunks(3) {
            let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            data.push(y.round().clamp(0.0, 255.0) as u8);
        }
        Image8 {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// One channel as an f64 plane.
    pub fn plane_f64(&self, c: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for i in 0..self.width * self.height {
            out.push(self.data[i * self.channels + c] as f64);
        }
        out
    }
}

/// Parses binary PPM (P6) / PGM (P5), 8-bit, maxval 255.
pub fn load_image(path: &Path) -> Result<Image8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pnm(&bytes).map_err(|msg| Error::Format {
        path: path.display().to_string(),
        msg,
    })
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<Image8, String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM/PGM file".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comment lines between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err("malformed header field".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| "header field out of range".to_string())?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing sample separator".into()),
    }
    let need = width * height * channels;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("expected {need} samples, file too short"))?;
    Image8::new(width, height, channels, data.to_vec()).map_err(|e| e.to_string())
}

/// Writes binary PPM (3 channels) or PGM (1 channel). `save` then `load`
/// reproduces the sample buffer exactly.
pub fn save_image(img: &Image8, path: &Path) -> Result<()> {
    let magic = match img.channels {
        3 => "P6",
        1 => "P5",
        c => {
            return Err(Error::invalid(
                "save_image",
                format!("unsupported channel count {c}"),
            ))
        }
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.data);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Maps samples linearly from [0, 255] to [-1, 1]; output layout `[C, H, W]`.
pub fn normalize<T: Scalar>(img: &Image8) -> Tensor<T> {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut data = vec![T::zero(); c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = img.data[(y * w + x) * c + ch] as f64;
                data[(ch * h + y) * w + x] = T::from_f64((2.0 * v - 255.0) / 255.0);
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Inverse of [`normalize`]: clamps to [-1, 1], rescales to [0, 255] and
/// rounds half away from zero. Accepts `[C, H, W]` or `[1, C, H, W]`.
pub fn denormalize<T: Scalar>(t: &Tensor<T>) -> Result<Image8> {
    let s = t.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => {
            return Err(Error::invalid(
                "denormalize",
                format!("expected [C,H,W] or [1,C,H,W], got {s:?}"),
            ))
        }
    };
    if c != 1 && c != 3 {
        return Err(Error::invalid(
            "denormalize",
            format!("unsupported channel count {c}"),
        ));
    }
    let mut data = vec![0u8; w * h * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = t.data()[(ch * h + y) * w + x].as_f64().clamp(-1.0, 1.0);
                data[(y * w + x) * c + ch] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
    }
    Image8::new(w, h, c, data)
}
