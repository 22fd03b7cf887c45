//! Canny edge detection: Gaussian smoothing, Sobel gradients, non-maximum
//! suppression, double threshold and hysteresis by connectivity.

use super::Image8;
use crate::error::{Error, Result};

/// Mirror index into `[0, n)`; borders reflect without repeating the edge
/// beyond once, then clamp for degenerate sizes.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = if i < 0 { -i - 1 } else if i >= n { 2 * n - 1 - i } else { i };
    m.clamp(0, n - 1) as usize
}

fn convolve_reflect(plane: &[f64], w: usize, h: usize, kernel: &[f64], k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                for kx in -r..=r {
                    let sy = reflect(y + ky, h);
                    let sx = reflect(x + kx, w);
                    acc += plane[sy * w + sx] * kernel[((ky + r) * k as isize + kx + r) as usize];
                }
            }
            out[(y as usize) * w + x as usize] = acc;
        }
    }
    out
}

fn gaussian_5x5(sigma: f64) -> Vec<f64> {
    let mut k = Vec::with_capacity(25);
    let mut sum = 0.0;
    for y in -2i32..=2 {
        for x in -2i32..=2 {
            let v = (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp();
            k.push(v);
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Binary edge map: 255 on edges, 0 elsewhere. Thresholds apply to the Sobel
/// gradient magnitude of the sigma-1.4 smoothed grayscale image.
pub fn canny(img: &Image8, low: f64, high: f64) -> Result<Image8> {
    if low < 0.0 || low > high {
        return Err(Error::invalid(
            "canny",
            format!("thresholds must satisfy 0 <= low <= high, got {low}/{high}"),
        ));
    }
    let gray = img.to_gray();
    let (w, h) = (gray.width, gray.height);
    let plane = gray.plane_f64(0);

    let smoothed = convolve_reflect(&plane, w, h, &gaussian_5x5(1.4), 5);
    let gx = convolve_reflect(&smoothed, w, h, &SOBEL_X, 3);
    let gy = convolve_reflect(&smoothed, w, h, &SOBEL_Y, 3);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();

    // Non-maximum suppression on interior pixels, direction quantized to
    // 0/45/90/135 degrees.
    let mut thin = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (a, b) = if !(22.5..157.5).contains(&angle) {
                (mag[i - 1], mag[i + 1])
            } else if angle < 67.5 {
                (mag[i - w - 1], mag[i + w + 1])
            } else if angle < 112.5 {
                (mag[i - w], mag[i + w])
            } else {
                (mag[i - w + 1], mag[i + w - 1])
            };
            if mag[i] >= a && mag[i] >= b {
                thin[i] = mag[i];
            }
        }
    }

    // Double threshold + hysteresis: strong pixels seed a flood fill through
    // weak neighbors (8-connectivity).
    let mut out = vec![0u8; w * h];
    let mut stack = Vec::new();
    for i in 0..w * h {
        if thin[i] >= high && out[i] == 0 {
            out[i] = 255;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (jx, jy) = (j % w, j / w);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (nx, ny) = (jx as isize + dx, jy as isize + dy);
                        if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                            continue;
                        }
                        let n = ny as usize * w + nx as usize;
                        if out[n] == 0 && thin[n] >= low {
                            out[n] = 255;
                            stack.push(n);
                        }
                    }
                }
            }
        }
    }
    Image8::new(w, h, 1, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let img = Image8::filled(16, 16, 3, 123);
        let edges = canny(&img, 50.0, 150.0).unwrap();
        assert!(edges.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn output_is_binary() {
        let mut data = vec![0u8; 16 * 16];
        for y in 0..16 {
            for x in 8..16 {
                data[y * 16 + x] = 255;
            }
        }
        let img = Image8::new(16, 16, 1, data).unwrap();
        let edges = canny(&img, 50.0, 150.0).unwrap();
        assert!(edges.data.iter().all(|&v| v == 0 || v == 255));
        assert!(edges.data.iter().any(|&v| v == 255));
    }

    #[test]
    fn vertical_step_edge_is_localized() {
        let k = 8;
        let mut data = vec![0u8; 16 * 16];
        for y in 0..16 {
            for x in k..16 {
                data[y * 16 + x] = 200;
            }
        }
        let img = Image8::new(16, 16, 1, data).unwrap();
        let edges = canny(&img, 50.0, 150.0).unwrap();
        // Interior rows: every detected edge within one column of the step.
        for y in 2..14 {
            for x in 0..16 {
                if edges.data[y * 16 + x] == 255 {
                    let dist = (x as isize - k as isize).abs();
                    assert!(dist <= 1, "edge at column {x}, step at {k}");
                }
            }
            assert!(
                (k - 1..=k + 1).any(|x| edges.data[y * 16 + x] == 255),
                "no edge found near the step in row {y}"
            );
        }
    }

    #[test]
    fn translation_covariance_in_the_interior() {
        let mk = |offset: usize| {
            let mut data = vec![10u8; 24 * 24];
            for y in 6..18 {
                for x in offset..offset + 6 {
                    data[y * 24 + x] = 240;
                }
            }
            Image8::new(24, 24, 1, data).unwrap()
        };
        let a = canny(&mk(8), 50.0, 150.0).unwrap();
        let b = canny(&mk(11), 50.0, 150.0).unwrap();
        // Shifting the square 3 px right shifts interior edges 3 px right.
        for y in 4..20 {
            for x in 4..17 {
                assert_eq!(
                    a.data[y * 24 + x],
                    b.data[y * 24 + x + 3],
                    "mismatch at ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn invalid_thresholds_error() {
        let img = Image8::filled(8, 8, 1, 0);
        assert!(canny(&img, 100.0, 50.0).is_err());
        assert!(canny(&img, -1.0, 50.0).is_err());
    }
}
