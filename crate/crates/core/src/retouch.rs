//! Parametric retouch operator bank.
//!
//! Six pixelwise primitives applied in a fixed order:
//! exposure, temperature, tone curve, gamma, contrast S-curve, saturation.
//! Every stage clamps to `[0, 1]`, and stages at their identity value are
//! skipped so identity parameters reproduce the input bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetouchParams {
    pub gamma: f64,
    pub exposure_ev: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub temperature_shift: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tone_curve_knots: Option<Vec<(f64, f64)>>,
}

impl Default for RetouchParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl RetouchParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            exposure_ev: 0.0,
            contrast: 1.0,
            saturation: 1.0,
            temperature_shift: 0.0,
            tone_curve_knots: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma, self.exposure_ev, self.contrast, self.saturation, self.temperature_shift];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("retouch parameters must be finite".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::InvalidInput(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.contrast <= 0.0 {
            return Err(Error::InvalidInput(format!("contrast must be > 0, got {}", self.contrast)));
        }
        if self.saturation < 0.0 {
            return Err(Error::InvalidInput(format!("saturation must be >= 0, got {}", self.saturation)));
        }
        if self.temperature_shift.abs() >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "temperature_shift must lie in (-1, 1), got {}",
                self.temperature_shift
            )));
        }
        if let Some(knots) = &self.tone_curve_knots {
            ToneCurve::new(knots)?;
        }
        Ok(())
    }
}

/// Piecewise-linear monotone curve. Anchors (0,0) and (1,1) are implied
/// unless a knot already sits at input 0 or 1.
#[derive(Clone, Debug)]
pub struct ToneCurve {
    points: Vec<(f64, f64)>,
}

impl ToneCurve {
    pub fn new(knots: &[(f64, f64)]) -> Result<Self> {
        let mut points = Vec::with_capacity(knots.len() + 2);
        for &(i, o) in knots {
            if !(0.0..=1.0).contains(&i) || !(0.0..=1.0).contains(&o) {
                return Err(Error::InvalidInput(format!("tone curve knot ({i}, {o}) outside [0,1]")));
            }
        }
        if knots.first().map_or(true, |k| k.0 > 0.0) {
            points.push((0.0, 0.0));
        }
        points.extend_from_slice(knots);
        if knots.last().map_or(true, |k| k.0 < 1.0) {
            points.push((1.0, 1.0));
        }
        for w in points.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(Error::InvalidInput(
                    "tone curve knots must be strictly increasing in both coordinates".into(),
                ));
            }
        }
        Ok(Self { points })
    }

    pub fn eval(&self, v: f64) -> f64 {
        let pts = &self.points;
        if v <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if v <= x1 {
                return y0 + (v - x0) * (y1 - y0) / (x1 - x0);
            }
        }
        pts[pts.len() - 1].1
    }
}

/// Contrast S-curve pivoting at 0.5 with slope `c` there; identity at `c = 1`.
pub fn s_curve(v: f64, c: f64) -> f64 {
    if v < 0.5 {
        0.5 * (2.0 * v).powf(c)
    } else {
        1.0 - 0.5 * (2.0 * (1.0 - v)).powf(c)
    }
}

/// Rec. 709 luma weights used by the saturation stage.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// A validated parameter set ready to be applied pixel by pixel.
#[derive(Clone, Debug)]
pub struct RetouchOp {
    params: RetouchParams,
    curve: Option<ToneCurve>,
    exposure_gain: f64,
}

impl RetouchOp {
    pub fn new(params: &RetouchParams) -> Result<Self> {
        params.validate()?;
        let curve = params.tone_curve_knots.as_deref().map(ToneCurve::new).transpose()?;
        Ok(Self { params: params.clone(), curve, exposure_gain: params.exposure_ev.exp2() })
    }

    pub fn apply_pixel(&self, px: [f64; 3]) -> [f64; 3] {
        let p = &self.params;
        let mut v = px;
        if p.exposure_ev != 0.0 {
            v = v.map(|c| (c * self.exposure_gain).clamp(0.0, 1.0));
        }
        if p.temperature_shift != 0.0 {
            v[0] = (v[0] * (1.0 + p.temperature_shift)).clamp(0.0, 1.0);
            v[2] = (v[2] * (1.0 - p.temperature_shift)).clamp(0.0, 1.0);
        }
        if let Some(curve) = &self.curve {
            v = v.map(|c| curve.eval(c).clamp(0.0, 1.0));
        }
        if p.gamma != 1.0 {
            v = v.map(|c| c.powf(p.gamma).clamp(0.0, 1.0));
        }
        if p.contrast != 1.0 {
            v = v.map(|c| s_curve(c, p.contrast).clamp(0.0, 1.0));
        }
        if p.saturation != 1.0 {
            let luma = LUMA[0] * v[0] + LUMA[1] * v[1] + LUMA[2] * v[2];
            v = v.map(|c| (luma + p.saturation * (c - luma)).clamp(0.0, 1.0));
        }
        v
    }

    pub fn apply(&self, img: &Image) -> Image {
        img.map_pixels(|px| self.apply_pixel(px))
    }
}

/// Applies the operator chain described by `params` to `img`.
pub fn apply_retouch(img: &Image, params: &RetouchParams) -> Result<Image> {
    Ok(RetouchOp::new(params)?.apply(img))
}
