//! Blur synthesis: convolution with a normalized kernel plus additive
//! Gaussian noise, or frame averaging in the style of high-frame-rate
//! blur datasets. `make_dataset` writes paired blurred/sharp files with a
//! manifest and is a pure function of (source, spec, seed).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{load_image, save_image, Image8};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const FRAME_COUNT_MIN: usize = 7;
pub const FRAME_COUNT_MAX: usize = 23;

/// Square 2-D blur kernel; entries sum to one.
#[derive(Clone, Debug)]
pub struct Kernel2d {
    pub size: usize,
    pub data: Vec<f64>,
    pub id: String,
}

impl Kernel2d {
    pub fn new(size: usize, data: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        if size % 2 == 0 || data.len() != size * size {
            return Err(Error::invalid(
                "kernel",
                format!("kernel must be odd square, got size {size} with {} entries", data.len()),
            ));
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "kernel",
                format!("kernel entries must sum to 1 (got {sum})"),
            ));
        }
        if data.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("kernel", "kernel entries must be nonnegative"));
        }
        Ok(Kernel2d {
            size,
            data,
            id: id.into(),
        })
    }

    /// Identity of convolution: 1 at the center.
    pub fn delta(size: usize) -> Result<Self> {
        let mut data = vec![0.0; size * size];
        data[(size / 2) * size + size / 2] = 1.0;
        Kernel2d::new(size, data, "delta")
    }

    pub fn uniform_box(size: usize) -> Result<Self> {
        let v = 1.0 / (size * size) as f64;
        Kernel2d::new(size, vec![v; size * size], format!("box_k{size}"))
    }
}

/// Truncated Gaussian, radius `ceil(3*sigma)`, renormalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel2d> {
    if sigma <= 0.0 {
        return Err(Error::invalid("kernel", format!("sigma must be positive, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as usize;
    let size = 2 * r + 1;
    let mut data = Vec::with_capacity(size * size);
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - r as f64, y as f64 - r as f64);
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            data.push(v);
            sum += v;
        }
    }
    for v in &mut data {
        *v /= sum;
    }
    Kernel2d::new(size, data, format!("gaussian_s{sigma:.4}_k{size}"))
}

#[derive(Clone, Debug)]
pub enum BlurMode {
    Kernel(Kernel2d),
    FrameAverage { frame_count: usize },
}

/// Parameters of one blur draw.
#[derive(Clone, Debug)]
pub struct BlurSpec {
    pub mode: BlurMode,
    pub noise_sigma: f64,
}

impl BlurSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("blur spec", "noise sigma must be >= 0"));
        }
        if let BlurMode::FrameAverage { frame_count } = self.mode {
            if frame_count % 2 == 0 || !(FRAME_COUNT_MIN..=FRAME_COUNT_MAX).contains(&frame_count)
            {
                return Err(Error::invalid(
                    "blur spec",
                    format!(
                        "frame count must be odd in [{FRAME_COUNT_MIN}, {FRAME_COUNT_MAX}], got {frame_count}"
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = if i < 0 { -i - 1 } else if i >= n { 2 * n - 1 - i } else { i };
    m.clamp(0, n - 1) as usize
}

/// Reflect-padded convolution of one channel, before any quantization.
pub fn blur_plane(img: &Image8, channel: usize, kernel: &Kernel2d) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let r = (kernel.size / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                for kx in -r..=r {
                    let sy = reflect(y + ky, h);
                    let sx = reflect(x + kx, w);
                    acc += img.sample(sx, sy, channel) as f64
                        * kernel.data[((ky + r) * kernel.size as isize + kx + r) as usize];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Pixelwise mean of the first `frame_count` frames; the central frame is
/// the corresponding sharp image. Returns `(blurred, sharp)`.
pub fn frame_average(frames: &[Image8], frame_count: usize) -> Result<(Image8, Image8)> {
    if frames.len() < frame_count {
        return Err(Error::invalid(
            "frame_average",
            format!("need {frame_count} frames, got {}", frames.len()),
        ));
    }
    let first = &frames[0];
    let n = first.data.len();
    let mut acc = vec![0.0f64; n];
    for frame in &frames[..frame_count] {
        if frame.width != first.width || frame.height != first.height || frame.channels != first.channels {
            return Err(Error::invalid("frame_average", "frame dimensions differ"));
        }
        for (a, &v) in acc.iter_mut().zip(&frame.data) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / frame_count as f64;
    let data: Vec<u8> = acc.iter().map(|&v| (v * inv).round().clamp(0.0, 255.0) as u8).collect();
    let blurred = Image8::new(first.width, first.height, first.channels, data)?;
    Ok((blurred, frames[frame_count / 2].clone()))
}

/// Applies one blur draw to a sharp image (kernel mode) or a frame window
/// (frame mode). Returns `(blurred, sharp)`.
pub fn synthesize_blur(frames: &[Image8], spec: &BlurSpec, rng: &mut Rng) -> Result<(Image8, Image8)> {
    spec.validate()?;
    if frames.is_empty() {
        return Err(Error::invalid("synthesize_blur", "no input frames"));
    }
    match &spec.mode {
        BlurMode::Kernel(kernel) => {
            let sharp = &frames[0];
            let (w, h, c) = (sharp.width, sharp.height, sharp.channels);
            let mut data = vec![0u8; w * h * c];
            for ch in 0..c {
                let plane = blur_plane(sharp, ch, kernel);
                for (i, &v) in plane.iter().enumerate() {
                    let noisy = if spec.noise_sigma > 0.0 {
                        v + rng.normal() * spec.noise_sigma
                    } else {
                        v
                    };
                    data[i * c + ch] = noisy.round().clamp(0.0, 255.0) as u8;
                }
            }
            Ok((Image8::new(w, h, c, data)?, sharp.clone()))
        }
        BlurMode::FrameAverage { frame_count } => frame_average(frames, *frame_count),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub blurred: String,
    pub sharp: String,
    pub spec_kv: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.blurred, e.sharp, e.spec_kv).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (blurred, sharp, kv) = (parts.next(), parts.next(), parts.next());
            match (blurred, sharp) {
                (Some(b), Some(s)) => entries.push(ManifestEntry {
                    blurred: b.to_string(),
                    sharp: s.to_string(),
                    spec_kv: kv.unwrap_or("").to_string(),
                }),
                _ => {
                    return Err(Error::invalid(
                        "manifest",
                        format!("line {}: expected blurred<TAB>sharp<TAB>spec", lineno + 1),
                    ))
                }
            }
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Manifest::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Value of one `key=...` field of an entry's spec column.
    pub fn spec_field<'a>(entry: &'a ManifestEntry, key: &str) -> Option<&'a str> {
        entry
            .spec_kv
            .split(' ')
            .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
    }
}

#[derive(Clone, Debug)]
pub enum SynthMode {
    /// Per-pair Gaussian kernel with sigma drawn uniformly from the range.
    GaussianKernels { sigma_lo: f64, sigma_hi: f64 },
    /// Per-pair odd frame count drawn from [7, 23]; source files form one
    /// frame sequence.
    FrameAverage,
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub mode: SynthMode,
    pub noise_sigma: f64,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Synthesizes `count` blurred/sharp pairs from the images in `source_dir`
/// into `out_dir`, writing `manifest.tsv` listing each pair and its spec
/// draw. Deterministic given the seed.
pub fn make_dataset(
    source_dir: &Path,
    out_dir: &Path,
    spec: &DatasetSpec,
    count: usize,
    rng: &mut Rng,
) -> Result<Manifest> {
    let sources = list_images(source_dir)?;
    if sources.is_empty() {
        return Err(Error::invalid(
            "make_dataset",
            format!("no .ppm/.pgm images in {}", source_dir.display()),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let frames: Vec<Image8> = match spec.mode {
        SynthMode::FrameAverage => sources
            .iter()
            .map(|p| load_image(p))
            .collect::<Result<_>>()?,
        SynthMode::GaussianKernels { .. } => Vec::new(),
    };

    let mut manifest = Manifest::default();
    for i in 0..count {
        let (pair, kv) = match &spec.mode {
            SynthMode::GaussianKernels { sigma_lo, sigma_hi } => {
                let sigma = rng.range(*sigma_lo, *sigma_hi);
                let kernel = gaussian_kernel(sigma)?;
                let id = kernel.id.clone();
                let source = load_image(&sources[i % sources.len()])?;
                let blur_spec = BlurSpec {
                    mode: BlurMode::Kernel(kernel),
                    noise_sigma: spec.noise_sigma,
                };
                let pair = synthesize_blur(std::slice::from_ref(&source), &blur_spec, rng)?;
                (pair, format!("mode=kernel kernel={id} noise_sigma={}", spec.noise_sigma))
            }
            SynthMode::FrameAverage => {
                let frame_count = FRAME_COUNT_MIN + 2 * rng.below((FRAME_COUNT_MAX - FRAME_COUNT_MIN) / 2 + 1);
                if frames.len() < frame_count {
                    return Err(Error::invalid(
                        "make_dataset",
                        format!("need at least {frame_count} frames, got {}", frames.len()),
                    ));
                }
                let start = rng.below(frames.len() - frame_count + 1);
                let pair = frame_average(&frames[start..start + frame_count], frame_count)?;
                (pair, format!("mode=frame_average frame_count={frame_count} start={start}"))
            }
        };
        let blurred_name = format!("pair_{i:04}_blur.ppm");
        let sharp_name = format!("pair_{i:04}_sharp.ppm");
        save_image(&pair.0, &out_dir.join(&blurred_name))?;
        save_image(&pair.1, &out_dir.join(&sharp_name))?;
        manifest.entries.push(ManifestEntry {
            blurred: blurred_name,
            sharp: sharp_name,
            spec_kv: kv,
        });
    }
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
