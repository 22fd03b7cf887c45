//! PSNR and SSIM on 8-bit images, plus the per-image/aggregate report.
//!
//! PSNR is emitted in decibels, `10*log10(255^2 / MSE)`, with MSE averaged
//! over all pixels and channels; identical images report infinity. SSIM uses
//! 11x11 Gaussian-weighted windows (sigma 1.5) over all fully contained
//! positions with the standard stabilizers `c1 = (0.01*255)^2`,
//! `c2 = (0.03*255)^2`, averaged over channels.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imaging::Image8;

pub const PSNR_PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub fn ssim_c1() -> f64 {
    (0.01 * PSNR_PEAK) * (0.01 * PSNR_PEAK)
}

pub fn ssim_c2() -> f64 {
    (0.03 * PSNR_PEAK) * (0.03 * PSNR_PEAK)
}

fn check_dims(op: &'static str, a: &Image8, b: &Image8) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::invalid(
            op,
            format!(
                "dimension mismatch: {}x{}x{} vs {}x{}x{}",
                a.width, a.height, a.channels, b.width, b.height, b.channels
            ),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(sharp: &Image8, restored: &Image8) -> Result<f64> {
    check_dims("psnr", sharp, restored)?;
    let mut acc = 0.0f64;
    for (&s, &r) in sharp.data.iter().zip(&restored.data) {
        let d = s as f64 - r as f64;
        acc += d * d;
    }
    let mse = acc / sharp.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut w = Vec::with_capacity(size);
    let mut sum = 0.0;
    for i in 0..size {
        let d = i as f64 - r;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        w.push(v);
        sum += v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Horizontal then vertical valid-region filtering with a separable window.
fn filter_valid(plane: &[f64], w: usize, h: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let ow = w - k + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &wv) in win.iter().enumerate() {
                acc += plane[y * w + x + i] * wv;
            }
            tmp[y * ow + x] = acc;
        }
    }
    let oh = h - k + 1;
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &wv) in win.iter().enumerate() {
                acc += tmp[(y + i) * ow + x] * wv;
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Structural similarity with explicit window size and stabilizers.
pub fn ssim_with(sharp: &Image8, restored: &Image8, window: usize, c1: f64, c2: f64) -> Result<f64> {
    check_dims("ssim", sharp, restored)?;
    if window == 0 || window > sharp.width.min(sharp.height) {
        return Err(Error::invalid(
            "ssim",
            format!(
                "window {window} larger than image {}x{}",
                sharp.width, sharp.height
            ),
        ));
    }
    let win = gaussian_window(window, SSIM_SIGMA);
    let (w, h) = (sharp.width, sharp.height);
    let mut total = 0.0;
    for c in 0..sharp.channels {
        let x = sharp.plane_f64(c);
        let y = restored.plane_f64(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();

        let (mu_x, ow, oh) = filter_valid(&x, w, h, &win);
        let (mu_y, _, _) = filter_valid(&y, w, h, &win);
        let (m_xx, _, _) = filter_valid(&xx, w, h, &win);
        let (m_yy, _, _) = filter_valid(&yy, w, h, &win);
        let (m_xy, _, _) = filter_valid(&xy, w, h, &win);

        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = m_xx[i] - mx * mx;
            let var_y = m_yy[i] - my * my;
            let cov = m_xy[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / sharp.channels as f64)
}

/// SSIM with the reference defaults.
pub fn ssim(sharp: &Image8, restored: &Image8) -> Result<f64> {
    ssim_with(sharp, restored, SSIM_WINDOW, ssim_c1(), ssim_c2())
}

#[derive(Clone, Debug)]
pub struct MetricLine {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image metrics plus their arithmetic means.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub lines: Vec<MetricLine>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn from_lines(lines: Vec<MetricLine>) -> Self {
        let n = lines.len().max(1) as f64;
        let mean_psnr = lines.iter().map(|l| l.psnr).sum::<f64>() / n;
        let mean_ssim = lines.iter().map(|l| l.ssim).sum::<f64>() / n;
        MetricReport {
            lines,
            mean_psnr,
            mean_ssim,
        }
    }

    /// Machine-readable key-value text: one metric per line, `name<TAB>value`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            writeln!(out, "psnr/{}\t{}", line.name, fmt_metric(line.psnr)).unwrap();
            writeln!(out, "ssim/{}\t{}", line.name, fmt_metric(line.ssim)).unwrap();
        }
        writeln!(out, "mean_psnr\t{}", fmt_metric(self.mean_psnr)).unwrap();
        writeln!(out, "mean_ssim\t{}", fmt_metric(self.mean_ssim)).unwrap();
        out
    }
}
