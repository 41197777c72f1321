//! Reference implementations written the slow, obvious way, compared with
//! the library kernels.

use cmsc_core::imaging::{
    bicubic_resize, cubic, rgb_to_ycbcr_pixel, ycbcr_to_rgb_pixel, ColorSpace, ImagePlane,
};
use cmsc_core::metrics::{psnr, ssim};
use cmsc_core::numerics::{conv2d, conv2d_backward, Conv2dParams};
use cmsc_core::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn naive_conv(x: &Tensor, p: &Conv2dParams) -> Tensor {
    let s = x.shape();
    let ws = p.weight.shape();
    let k = ws.h as isize;
    let pad = k / 2;
    let mut out = Tensor::zeros(Shape::new(s.n, ws.n, s.h, s.w));
    for n in 0..s.n {
        for o in 0..ws.n {
            for y in 0..s.h as isize {
                for xx in 0..s.w as isize {
                    let mut acc = p.bias[o];
                    for i in 0..s.c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let (sy, sx) = (y + dy - pad, xx + dx - pad);
                                if sy < 0 || sx < 0 || sy >= s.h as isize || sx >= s.w as isize {
                                    continue;
                                }
                                acc += p.weight.get(o, i, dy as usize, dx as usize)
                                    * x.get(n, i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(n, o, y as usize, xx as usize, acc);
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..25 {
        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let s = Shape::new(rng.random_range(1..=2), cin, rng.random_range(1..=9), rng.random_range(1..=9));
        let x = random_tensor(&mut rng, s);
        let mut p = Conv2dParams::zeros(cin, cout, k).unwrap();
        p.weight = random_tensor(&mut rng, p.weight.shape());
        p.bias = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = conv2d(&x, &p).unwrap();
        let slow = naive_conv(&x, &p);
        assert_eq!(fast.shape(), slow.shape());
        assert!(max_abs_diff(fast.data(), slow.data()) < 1e-12);
    }
}

#[test]
fn conv_backward_is_the_adjoint() {
    // <conv(x; w), g> is bilinear in (x, w) once the bias is removed, so the
    // input and weight gradients must reproduce it exactly
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (cin, cout, k) = (rng.random_range(1..=3), rng.random_range(1..=3), [1, 3, 5][rng.random_range(0..3)]);
        let s = Shape::new(2, cin, rng.random_range(2..=7), rng.random_range(2..=7));
        let x = random_tensor(&mut rng, s);
        let mut p = Conv2dParams::zeros(cin, cout, k).unwrap();
        p.weight = random_tensor(&mut rng, p.weight.shape());
        let g = random_tensor(&mut rng, Shape::new(2, cout, s.h, s.w));
        let lhs = naive_conv(&x, &p).dot(&g).unwrap();
        let grads = conv2d_backward(&x, &p, &g).unwrap();
        assert!((lhs - x.dot(&grads.input).unwrap()).abs() < 1e-10);
        assert!((lhs - p.weight.dot(&grads.weight).unwrap()).abs() < 1e-10);
        for (o, gb) in grads.bias.iter().enumerate() {
            let expected: f64 = (0..2).map(|n| g.plane(n, o).iter().sum::<f64>()).sum();
            assert!((gb - expected).abs() < 1e-12);
        }
    }
}

fn plane(w: usize, h: usize, values: Vec<f64>) -> ImagePlane {
    ImagePlane::new(w, h, values, ColorSpace::Y).unwrap()
}

/// SSIM computed window by window with an explicit 2-D Gaussian.
fn naive_ssim(a: &ImagePlane, b: &ImagePlane) -> f64 {
    let (w, h) = (a.width(), a.height());
    let sigma: f64 = 1.5;
    let mut window = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (dy, row) in window.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            let (fy, fx) = (dy as f64 - 5.0, dx as f64 - 5.0);
            *v = (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let g = window[dy][dx] / total;
                    ma += g * a.get(x0 + dx, y0 + dy);
                    mb += g * b.get(x0 + dx, y0 + dy);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..11 {
                for dx in 0..11 {
                    let g = window[dy][dx] / total;
                    let (da, db) = (a.get(x0 + dx, y0 + dy) - ma, b.get(x0 + dx, y0 + dy) - mb);
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_sliding_window_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..8 {
        let (w, h) = (rng.random_range(11..=24), rng.random_range(11..=24));
        let a: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let noise = rng.random_range(0.0..0.3);
        let b: Vec<f64> = a.iter().map(|v| v + rng.random_range(-noise..=noise)).collect();
        let (pa, pb) = (plane(w, h, a), plane(w, h, b));
        let fast = ssim(&pa, &pb).unwrap();
        let slow = naive_ssim(&pa, &pb);
        assert!((fast - slow).abs() <= 1e-10, "{fast} vs {slow}");
    }
}

#[test]
fn psnr_closed_forms() {
    let a = plane(4, 4, vec![0.5; 16]);
    let b = plane(4, 4, vec![0.6; 16]);
    // mse = 0.01 → 20 dB at peak 1
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    let mut half = vec![0.5; 16];
    half[..8].iter_mut().for_each(|v| *v = 0.7);
    // mse = 0.02 → 10·log10(50)
    assert!((psnr(&a, &plane(4, 4, half), 1.0).unwrap() - 10.0 * 50f64.log10()).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &plane(2, 8, vec![0.5; 16]), 1.0).is_err());
}

#[test]
fn ycbcr_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let rgb = [0, 1, 2].map(|_| rng.random_range(0.0..1.0));
        let back = ycbcr_to_rgb_pixel(rgb_to_ycbcr_pixel(rgb));
        assert!(max_abs_diff(&rgb, &back) <= 1e-9);
    }
    let white = rgb_to_ycbcr_pixel([1.0, 1.0, 1.0]);
    let black = rgb_to_ycbcr_pixel([0.0, 0.0, 0.0]);
    assert!((white[0] - 235.0 / 255.0).abs() < 1e-3);
    assert!((black[0] - 16.0 / 255.0).abs() < 1e-12);
    for c in [white[1], white[2], black[1], black[2]] {
        assert!((c - 128.0 / 255.0).abs() < 1e-3);
    }
}

#[test]
fn impulse_upscale_traces_the_cubic_kernel() {
    // a single bright pixel on a flat row, enlarged 1-D by an integer factor
    for scale in [2usize, 3, 4] {
        let n = 12;
        let c = 5;
        let mut row = vec![0.5; n];
        row[c] = 0.75;
        let up = bicubic_resize(&plane(n, 1, row), n * scale, 1, true).unwrap();
        for i in 3 * scale..(n - 3) * scale {
            let u = (i + 1) as f64 / scale as f64 + 0.5 * (1.0 - 1.0 / scale as f64);
            let expected = 0.5 + 0.25 * cubic(u - (c + 1) as f64);
            assert!((up.get(i, 0) - expected).abs() < 1e-12, "scale {scale} pixel {i}");
        }
    }
}

#[test]
fn antialiased_downscale_suppresses_checkerboard() {
    for factor in [2usize, 3, 4] {
        let n = 48;
        let v = (0..n * n).map(|i| ((i % n + i / n) % 2) as f64).collect();
        let small = bicubic_resize(&plane(n, n, v), n / factor, n / factor, true).unwrap();
        // edge pixels see clamped taps; the interior must be close to grey
        for y in 2..n / factor - 2 {
            for x in 2..n / factor - 2 {
                assert!((small.get(x, y) - 0.5).abs() <= 0.05, "factor {factor} at ({x},{y}): {}", small.get(x, y));
            }
        }
    }
}

#[test]
fn cubic_kernel_values() {
    assert_eq!(cubic(0.0), 1.0);
    assert_eq!(cubic(1.0), 0.0);
    assert_eq!(cubic(2.0), 0.0);
    assert_eq!(cubic(-2.5), 0.0);
    assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
    assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
}
