//! PSNR and SSIM on RGB images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR values are written to logs capped at this value.
pub const PSNR_LOG_CAP: f64 = 100.0;

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs {} vs {}", a.shape(), b.shape())));
    }
    a.ensure_finite("metric input")?;
    b.ensure_finite("metric input")
}

/// `10·log10(1 / MSE)` over all elements; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Mean PSNR over the batch items.
pub fn mean_psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let n = a.shape().n;
    let mut total = 0.0;
    for i in 0..n {
        total += psnr(&a.batch_item(i), &b.batch_item(i))?.min(PSNR_LOG_CAP);
    }
    Ok(total / n as f64)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let z: f64 = g.iter().sum();
    g.into_iter().map(|v| v / z).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| g[t] * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5) over the valid region,
/// averaged over channels and batch items. Images smaller than the window use
/// the largest odd window that fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let s = a.shape();
    let mut size = SSIM_WINDOW.min(s.h).min(s.w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            let (x, y) = (a.plane(n, c), b.plane(n, c));
            let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
            let (mx, oh, ow) = filter_valid(x, s.h, s.w, &g);
            let (my, ..) = filter_valid(y, s.h, s.w, &g);
            let (xx, ..) = filter_valid(&prod(x, x), s.h, s.w, &g);
            let (yy, ..) = filter_valid(&prod(y, y), s.h, s.w, &g);
            let (xy, ..) = filter_valid(&prod(x, y), s.h, s.w, &g);
            let mut acc = 0.0;
            for i in 0..oh * ow {
                let (ux, uy) = (mx[i], my[i]);
                let vx = xx[i] - ux * ux;
                let vy = yy[i] - uy * uy;
                let cov = xy[i] - ux * uy;
                acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
            total += acc / (oh * ow) as f64;
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand01(shape: Shape, seed: u64) -> Tensor {
        Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_pixel_psnr() {
        let a = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let b = Tensor::full(Shape::new(1, 1, 1, 1), 0.5);
        assert!((psnr(&a, &b).unwrap() - 6.020599913279624).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(mean_psnr(&a, &a).unwrap(), PSNR_LOG_CAP);
    }

    #[test]
    fn psnr_matches_analytic_noise() {
        // ±d noise with equal signs count has MSE exactly d²
        let d = 0.02;
        let a = Tensor::full(Shape::new(1, 3, 16, 16), 0.3);
        let b = Tensor::from_fn(a.shape(), |_, _, y, x| if (x + y) % 2 == 0 { 0.3 + d } else { 0.3 - d });
        let expect = -10.0 * (d * d).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 0.01);
    }

    #[test]
    fn ssim_identity_and_small_images() {
        let a = rand01(Shape::new(2, 3, 16, 16), 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let tiny = rand01(Shape::new(1, 3, 4, 6), 2);
        assert!((ssim(&tiny, &tiny).unwrap() - 1.0).abs() < 1e-12);
        let other = rand01(Shape::new(2, 3, 16, 16), 3);
        assert!(ssim(&a, &other).unwrap() < 0.5);
    }

    #[test]
    fn ssim_of_constant_shift_matches_luminance_term() {
        let a = Tensor::full(Shape::new(1, 1, 12, 12), 0.2);
        let b = Tensor::full(Shape::new(1, 1, 12, 12), 0.6);
        let c1 = 1e-4;
        let expect = (2.0 * 0.2 * 0.6 + c1) / (0.04 + 0.36 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(Shape::new(1, 3, 8, 8));
        let b = Tensor::zeros(Shape::new(1, 3, 8, 9));
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            let a = rand01(Shape::new(1, 3, 12, 12), seed);
            let b = rand01(Shape::new(1, 3, 12, 12), seed + 7919);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
