//! Convolution and matrix-multiply checks against independent brute-force
//! reference implementations, plus the adjoint identity between conv2d and
//! conv2d_transpose.

use deblur_core::{Graph, Padding, Rng, Tensor};

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap()
}

fn same_pads(h: usize, k: usize, s: usize) -> (usize, usize) {
    let ho = h.div_ceil(s);
    let total = ((ho - 1) * s + k).saturating_sub(h);
    (ho, total / 2)
}

/// Explicit sliding-window convolution, nested loops all the way down.
fn conv2d_reference(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &[f64],
    stride: usize,
    padding: Padding,
) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo, pad_t, pad_l) = match padding {
        Padding::Same => {
            let (ho, pt) = same_pads(h, kh, stride);
            let (wo, pl) = same_pads(wd, kw, stride);
            (ho, wo, pt as isize, pl as isize)
        }
        Padding::Valid => ((h - kh) / stride + 1, (wd - kw) / stride + 1, 0, 0),
    };
    let mut out = vec![0.0; n * cout * ho * wo];
    for s_i in 0..n {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for dkh in 0..kh {
                            for dkw in 0..kw {
                                let ih = (oh * stride + dkh) as isize - pad_t;
                                let iw = (ow * stride + dkw) as isize - pad_l;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(s_i, ci, ih as usize, iw as usize)
                                    * w.at4(co, ci, dkh, dkw);
                            }
                        }
                    }
                    out[((s_i * cout + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, ho, wo], out).unwrap()
}

/// Explicit scatter-add transposed convolution (adjoint definition).
fn conv2d_transpose_reference(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &[f64],
    stride: usize,
) -> Tensor<f64> {
    let (n, a, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_, b_ch, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh_full, ow_full) = (h * stride, wd * stride);
    let (_, pad_t) = same_pads(oh_full, kh, stride);
    let (_, pad_l) = same_pads(ow_full, kw, stride);
    let mut out = vec![0.0; n * b_ch * oh_full * ow_full];
    for s_i in 0..n {
        for ca in 0..a {
            for sh in 0..h {
                for sw in 0..wd {
                    let v = x.at4(s_i, ca, sh, sw);
                    for cb in 0..b_ch {
                        for dkh in 0..kh {
                            for dkw in 0..kw {
                                let ih = (sh * stride + dkh) as isize - pad_t as isize;
                                let iw = (sw * stride + dkw) as isize - pad_l as isize;
                                if ih < 0
                                    || iw < 0
                                    || ih >= oh_full as isize
                                    || iw >= ow_full as isize
                                {
                                    continue;
                                }
                                out[((s_i * b_ch + cb) * oh_full + ih as usize) * ow_full
                                    + iw as usize] += v * w.at4(ca, cb, dkh, dkw);
                            }
                        }
                    }
                }
            }
        }
    }
    for s_i in 0..n {
        for cb in 0..b_ch {
            for i in 0..oh_full * ow_full {
                out[(s_i * b_ch + cb) * oh_full * ow_full + i] += bias[cb];
            }
        }
    }
    Tensor::from_vec(&[n, b_ch, oh_full, ow_full], out).unwrap()
}

#[test]
fn conv2d_matches_reference_across_shape_grid() {
    let mut rng = Rng::new(200);
    for &stride in &[1usize, 2] {
        for &k in &[1usize, 3, 4] {
            for &padding in &[Padding::Same, Padding::Valid] {
                let (h, w) = (8, 6);
                if padding == Padding::Valid && (h < k || w < k) {
                    continue;
                }
                let x = random(&mut rng, &[2, 3, h, w]);
                let wt = random(&mut rng, &[4, 3, k, k]);
                let bias: Vec<f64> = (0..4).map(|_| rng.range(-0.5, 0.5)).collect();
                let want = conv2d_reference(&x, &wt, &bias, stride, padding);

                let mut g = Graph::new();
                let xv = g.leaf(x, false);
                let wv = g.constant(wt);
                let bv = g.constant(Tensor::from_vec(&[4], bias).unwrap());
                let got = g.conv2d(xv, wv, bv, stride, padding).unwrap();
                assert_eq!(g.value(got).shape(), want.shape(), "k={k} s={stride} {padding:?}");
                assert!(
                    g.value(got).max_abs_diff(&want) < 1e-6,
                    "k={k} s={stride} {padding:?}: diff {}",
                    g.value(got).max_abs_diff(&want)
                );
            }
        }
    }
}

#[test]
fn conv2d_random_8x8_against_reference() {
    let mut rng = Rng::new(201);
    let x = random(&mut rng, &[2, 3, 8, 8]);
    let w = random(&mut rng, &[5, 3, 3, 3]);
    let bias = vec![0.0; 5];
    let want = conv2d_reference(&x, &w, &bias, 1, Padding::Same);
    let mut g = Graph::new();
    let xv = g.leaf(x, false);
    let wv = g.constant(w);
    let bv = g.constant(Tensor::zeros(&[5]));
    let got = g.conv2d(xv, wv, bv, 1, Padding::Same).unwrap();
    assert!(g.value(got).max_abs_diff(&want) < 1e-6);
}

#[test]
fn conv2d_transpose_matches_reference() {
    let mut rng = Rng::new(202);
    for &stride in &[1usize, 2] {
        for &k in &[1usize, 3, 4] {
            let x = random(&mut rng, &[2, 4, 3, 5]);
            let w = random(&mut rng, &[4, 2, k, k]);
            let bias: Vec<f64> = (0..2).map(|_| rng.range(-0.5, 0.5)).collect();
            let want = conv2d_transpose_reference(&x, &w, &bias, stride);
            let mut g = Graph::new();
            let xv = g.leaf(x, false);
            let wv = g.constant(w);
            let bv = g.constant(Tensor::from_vec(&[2], bias).unwrap());
            let got = g.conv2d_transpose(xv, wv, bv, stride).unwrap();
            assert_eq!(g.value(got).shape(), want.shape());
            assert!(
                g.value(got).max_abs_diff(&want) < 1e-6,
                "k={k} s={stride}: diff {}",
                g.value(got).max_abs_diff(&want)
            );
        }
    }
}

#[test]
fn adjoint_inner_product_identity() {
    let mut rng = Rng::new(203);
    for &stride in &[1usize, 2] {
        for &k in &[1usize, 3, 4] {
            // Input dims divisible by the stride so the transpose maps back
            // onto the exact conv input shape.
            let (h, w) = (6, 8);
            let x = random(&mut rng, &[2, 3, h, w]);
            let wt = random(&mut rng, &[4, 3, k, k]);
            let zero4 = Tensor::zeros(&[4]);
            let zero3 = Tensor::zeros(&[3]);

            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), false);
            let wv = g.constant(wt.clone());
            let b4 = g.constant(zero4);
            let cx = g.conv2d(xv, wv, b4, stride, Padding::Same).unwrap();
            let y = random(&mut rng, g.value(cx).shape());
            let lhs: f64 = g
                .value(cx)
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| a * b)
                .sum();

            let yv = g.leaf(y, false);
            let b3 = g.constant(zero3);
            let cty = g.conv2d_transpose(yv, wv, b3, stride).unwrap();
            assert_eq!(g.value(cty).shape(), x.shape());
            let rhs: f64 = g
                .value(cty)
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| a * b)
                .sum();
            assert!(
                (lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0),
                "k={k} s={stride}: <Cx,y>={lhs} vs <x,C'y>={rhs}"
            );
        }
    }
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = Rng::new(204);
    let a = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5, 3]);
    let mut want = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            for p in 0..5 {
                want[i * 3 + j] += a.data()[i * 5 + p] * b.data()[p * 3 + j];
            }
        }
    }
    let mut g = Graph::new();
    let av = g.leaf(a, false);
    let bv = g.leaf(b, false);
    let got = g.matmul(av, bv).unwrap();
    for (x, y) in g.value(got).data().iter().zip(&want) {
        assert!((x - y).abs() < 1e-6);
    }
}
