use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// Offset added to every class hue so class 0 is not pure red.
const HUE_OFFSET: f64 = 0.05;
const HUE_JITTER: f64 = 0.03;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue in `[0, 1)` of an RGB triple (0 for greys).
pub fn hue_of(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h / 6.0
}

/// Distance between two hues on the unit circle, in `[0, 0.5]`.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Centre hue of a content class.
pub fn class_hue(class_id: usize, n_classes: usize) -> f64 {
    class_id as f64 / n_classes as f64 + HUE_OFFSET
}

/// Procedural scene for `class_id`. Each class has its own hue band and
/// one of three layouts (horizon gradient, radial blob, diagonal stripes);
/// the seed varies geometry, brightness and texture.
pub fn synth_scene(class_id: usize, n_classes: usize, seed: u64, size: usize) -> Result<Image> {
    if class_id >= n_classes {
        return Err(Error::InvalidInput(format!("class {class_id} out of range for {n_classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class_id as u64 + 1) << 48));
    let hue = class_hue(class_id, n_classes) + rng.random_range(-HUE_JITTER..HUE_JITTER);
    let sat = rng.random_range(0.5..0.8);
    let val = rng.random_range(0.45..0.65);
    let a = rng.random_range(0.2..0.8);
    let b = rng.random_range(0.2..0.8);
    let r = rng.random_range(0.2..0.45);
    let freq = rng.random_range(2.0..4.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise_amp = 0.03;
    let s = size as f64;
    Image::from_fn(size, size, |row, col| {
        let u = (col as f64 + 0.5) / s;
        let v = (row as f64 + 0.5) / s;
        let (dh, ds, dv) = match class_id % 3 {
            0 => {
                // horizon: bright upper band, darker and shifted lower band
                if v < a {
                    (0.0, -0.15, 0.2 * (1.0 - v / a))
                } else {
                    (0.06, 0.1, -0.2 * (v - a) / (1.0 - a))
                }
            }
            1 => {
                let d = ((u - a).powi(2) + (v - b).powi(2)).sqrt();
                let t = (1.0 - d / r).clamp(0.0, 1.0);
                (0.04 * t, -0.2 * t, 0.3 * t - 0.1)
            }
            _ => {
                let w = (freq * std::f64::consts::TAU * (u + v) / 2.0 + phase).sin();
                (0.03 * w, 0.1 * w, 0.15 * w)
            }
        };
        let n = noise_amp * (rng.random::<f64>() - 0.5);
        hsv_to_rgb(hue + dh, (sat + ds).clamp(0.0, 1.0), (val + dv + n).clamp(0.0, 1.0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = synth_scene(0, 3, 7, 64).unwrap();
        let b = synth_scene(0, 3, 7, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), (64, 64));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_unknown_class() {
        assert!(synth_scene(3, 3, 0, 16).is_err());
    }

    #[test]
    fn hsv_round_trip_hue() {
        for h in [0.0, 0.1, 0.3, 0.55, 0.8, 0.95] {
            let rgb = hsv_to_rgb(h, 0.7, 0.6);
            assert!(hue_distance(hue_of(rgb), h) < 1e-9);
        }
    }

    #[test]
    fn classes_separate_by_mean_hue() {
        // Hue centres sit 1/3 apart; jitter and layout keep each class within
        // about 0.1 of its centre, so the observed margin is far above 0.1.
        let mut min_gap = f64::INFINITY;
        for seed in 0..100 {
            for (c0, c1) in [(0, 1), (1, 2), (0, 2)] {
                let h0 = hue_of(synth_scene(c0, 3, seed, 32).unwrap().mean_rgb());
                let h1 = hue_of(synth_scene(c1, 3, seed, 32).unwrap().mean_rgb());
                min_gap = min_gap.min(hue_distance(h0, h1));
            }
        }
        assert!(min_gap > 0.1, "min gap {min_gap}");
    }
}
