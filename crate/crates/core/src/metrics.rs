//! Full-reference quality metrics: PSNR, SSIM and CIE76 colour difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub delta_e_ab: f64,
}

impl MetricReport {
    pub fn compute(a: &Image, b: &Image) -> Result<Self> {
        Ok(Self { psnr_db: psnr(a, b)?, ssim: ssim(a, b)?, delta_e_ab: delta_e_ab(a, b)? })
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB on the `[0, 1]` scale, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" Gaussian filtering of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let row = &plane[r * w + c..r * w + c + SSIM_WINDOW];
            tmp[r * ow + c] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += tmp[(r + i) * ow + c] * kv;
            }
            out[r * ow + c] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over the three channels (Gaussian window 11,
/// sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (pa, pb) = (a.to_chw(), b.to_chw());
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..3 {
        let x = &pa[ch * hw..(ch + 1) * hw];
        let y = &pb[ch * hw..(ch + 1) * hw];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, oh, ow) = filter_valid(x, h, w, &k);
        let (my, _, _) = filter_valid(y, h, w, &k);
        let (sxx, _, _) = filter_valid(&xx, h, w, &k);
        let (syy, _, _) = filter_valid(&yy, h, w, &k);
        let (sxy, _, _) = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

/// sRGB (D65) to linear-light XYZ matrix, IEC 61966-2-1.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Converts one sRGB pixel to CIELAB. The reference white is the XYZ of
/// sRGB white under the same matrix, so `(1,1,1)` maps to `(100, 0, 0)`.
pub fn srgb_to_lab(px: [f64; 3]) -> [f64; 3] {
    let lin = px.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    let mut white = [0.0; 3];
    for r in 0..3 {
        for c in 0..3 {
            xyz[r] += SRGB_TO_XYZ[r][c] * lin[c];
            white[r] += SRGB_TO_XYZ[r][c];
        }
    }
    let f = [lab_f(xyz[0] / white[0]), lab_f(xyz[1] / white[1]), lab_f(xyz[2] / white[2])];
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Mean per-pixel CIE76 distance in CIELAB.
pub fn delta_e_ab(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let mut sum = 0.0;
    for (p, q) in a.pixels().zip(b.pixels()) {
        let (la, lb) = (srgb_to_lab(p), srgb_to_lab(q));
        sum += ((la[0] - lb[0]).powi(2) + (la[1] - lb[1]).powi(2) + (la[2] - lb[2]).powi(2)).sqrt();
    }
    Ok(sum / (a.height() * a.width()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
    }

    #[test]
    fn psnr_trivial_cases() {
        let img = noise(1, 16, 16);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
        let zeros = Image::uniform(8, 8, 0.0).unwrap();
        let ones = Image::uniform(8, 8, 1.0).unwrap();
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        let a = Image::uniform(8, 8, 0.5).unwrap();
        let b = Image::uniform(8, 8, 0.6).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let a = Image::uniform(16, 16, 0.5).unwrap();
        let b = Image::uniform(16, 12, 0.5).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
        assert!(delta_e_ab(&a, &b).is_err());
    }

    #[test]
    fn ssim_trivial_cases() {
        let img = noise(2, 16, 16);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let u = Image::uniform(16, 16, 0.5).unwrap();
        assert!((ssim(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Image::uniform(10, 16, 0.5).unwrap(), &Image::uniform(10, 16, 0.5).unwrap()).is_err());
    }

    // Direct per-window evaluation with a 2-D kernel, no separability.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let (h, w) = a.dims();
        let mut k2 = [[0.0; 11]; 11];
        let mut norm = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                k2[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                norm += k2[i][j];
            }
        }
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        for ch in 0..3 {
            let mut acc = 0.0;
            let mut n = 0;
            for r in 0..=h - 11 {
                for c in 0..=w - 11 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k2[i][j] / norm;
                            mx += wgt * a.pixel(r + i, c + j)[ch];
                            my += wgt * b.pixel(r + i, c + j)[ch];
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k2[i][j] / norm;
                            let dx = a.pixel(r + i, c + j)[ch] - mx;
                            let dy = b.pixel(r + i, c + j)[ch] - my;
                            vx += wgt * dx * dx;
                            vy += wgt * dy * dy;
                            cov += wgt * dx * dy;
                        }
                    }
                    acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            total += acc / n as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_matches_window_reference() {
        let a = noise(10, 17, 19);
        let b = noise(11, 17, 19);
        let got = ssim(&a, &b).unwrap();
        let want = ssim_reference(&a, &b);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        let c = a.map_pixels(|p| p.map(|v| 0.7 * v + 0.1));
        assert!((ssim(&a, &c).unwrap() - ssim_reference(&a, &c)).abs() < 1e-6);
    }

    #[test]
    fn delta_e_trivial_cases() {
        let img = noise(3, 8, 8);
        assert_eq!(delta_e_ab(&img, &img).unwrap(), 0.0);
        let black = Image::uniform(8, 8, 0.0).unwrap();
        let white = Image::uniform(8, 8, 1.0).unwrap();
        assert!((delta_e_ab(&black, &white).unwrap() - 100.0).abs() < 1e-9);
    }

    // Independent colorimetry route: sRGB -> XYZ with the published D65
    // white point, CIE Lab with the 903.3/7.787 piecewise constants.
    fn lab_reference(rgb: [f64; 3]) -> [f64; 3] {
        let lin = rgb.map(|c| if c > 0.04045 { ((c + 0.055) / 1.055).powf(2.4) } else { c / 12.92 });
        let x = 0.4124 * lin[0] + 0.3576 * lin[1] + 0.1805 * lin[2];
        let y = 0.2126 * lin[0] + 0.7152 * lin[1] + 0.0722 * lin[2];
        let z = 0.0193 * lin[0] + 0.1192 * lin[1] + 0.9505 * lin[2];
        let f = |t: f64| if t > 0.008856 { t.powf(1.0 / 3.0) } else { 7.787 * t + 16.0 / 116.0 };
        let (fx, fy, fz) = (f(x / 0.9505), f(y / 1.0), f(z / 1.089));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    #[test]
    fn delta_e_red_green_matches_colorimetry_oracle() {
        let red = Image::filled(8, 8, [1.0, 0.0, 0.0]).unwrap();
        let green = Image::filled(8, 8, [0.0, 1.0, 0.0]).unwrap();
        let (lr, lg) = (lab_reference([1.0, 0.0, 0.0]), lab_reference([0.0, 1.0, 0.0]));
        let want = ((lr[0] - lg[0]).powi(2) + (lr[1] - lg[1]).powi(2) + (lr[2] - lg[2]).powi(2)).sqrt();
        let got = delta_e_ab(&red, &green).unwrap();
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        // Published sRGB primaries: red (53.24, 80.09, 67.20), green (87.73, -86.18, 83.18).
        assert!((got - 170.58).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let (a, b) = (noise(s1, 12, 12), noise(s2, 12, 12));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((delta_e_ab(&a, &b).unwrap() - delta_e_ab(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn delta_e_zero_iff_equal(seed in any::<u64>(), bump in 1e-3f64..0.2) {
            let a = noise(seed, 8, 8);
            let b = a.map_pixels(|p| [p[0], (p[1] + bump).min(1.0), p[2]]);
            prop_assert!(delta_e_ab(&a, &a).unwrap() < 1e-6);
            if a != b {
                prop_assert!(delta_e_ab(&a, &b).unwrap() > 1e-6);
            }
        }
    }
}
