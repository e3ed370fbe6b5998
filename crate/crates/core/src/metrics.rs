//! Perceptually uniform HDR quality metrics.
//!
//! Frames are mapped to absolute display luminance, encoded with the PU21
//! transfer curve, and then compared with ordinary PSNR and SSIM.

use crate::error::{Error, Result};
use crate::exposure::HdrFrame;

/// Target display: peak and black luminance in cd/m².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplayModel {
    pub peak_luminance: f64,
    pub black_level: f64,
    /// Reference luminance percentile mapped to the display peak.
    pub scale_percentile: f64,
}

impl Default for DisplayModel {
    fn default() -> Self {
        Self {
            peak_luminance: 1400.0,
            black_level: 0.02,
            scale_percentile: 99.9,
        }
    }
}

impl DisplayModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.black_level > 0.0
            && self.black_level < self.peak_luminance
            && self.peak_luminance.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "display needs 0 < black ({}) < peak ({})",
                self.black_level, self.peak_luminance
            )));
        }
        if !(self.scale_percentile > 0.0 && self.scale_percentile <= 100.0) {
            return Err(Error::InvalidConfig(format!(
                "scale percentile must be in (0, 100], got {}",
                self.scale_percentile
            )));
        }
        Ok(())
    }
}

/// PU21 encoding curve `V(Y) = p6 * (((p0 + p1 Y^p3) / (1 + p2 Y^p3))^p4 - p5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PuCurve {
    pub params: [f64; 7],
    pub min_luminance: f64,
    pub max_luminance: f64,
}

impl Default for PuCurve {
    fn default() -> Self {
        Self::banding_glare()
    }
}

impl PuCurve {
    /// The recommended PU21 variant, fitted to banding with glare.
    pub fn banding_glare() -> Self {
        Self {
            params: [
                0.353487901,
                0.3734658629,
                8.277049286e-05,
                0.9062562627,
                0.09150303166,
                0.9099517204,
                596.3148142,
            ],
            min_luminance: 0.005,
            max_luminance: 10000.0,
        }
    }

    /// Encodes one luminance value, clamping to the curve's domain first.
    #[inline]
    pub fn encode_value(&self, y: f64) -> f64 {
        let p = &self.params;
        let y = y.clamp(self.min_luminance, self.max_luminance);
        let yp = y.powf(p[3]);
        p[6] * (((p[0] + p[1] * yp) / (1.0 + p[2] * yp)).powf(p[4]) - p[5])
    }
}

/// Luminance image in cd/m².
#[derive(Debug, Clone, PartialEq)]
pub struct LuminanceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Linearly interpolated percentile (`p` in `[0, 100]`) of `values`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Maps `frame` to display luminance using a scale derived from `reference`.
///
/// The reference's luminance percentile lands on the display peak; the same
/// scale is applied to both frames before clamping to the display range.
pub fn display_map(
    frame: &HdrFrame,
    reference: &HdrFrame,
    model: &DisplayModel,
) -> Result<LuminanceMap> {
    let scale = display_scale(reference, model)?;
    frame.image.expect_same_size(&reference.image)?;
    Ok(apply_display(frame, scale, model))
}

fn display_scale(reference: &HdrFrame, model: &DisplayModel) -> Result<f64> {
    model.validate()?;
    let anchor = percentile(&reference.image.luminance(), model.scale_percentile);
    if !(anchor > 0.0) {
        return Err(Error::InvalidInput(
            "reference frame is black at the scaling percentile".into(),
        ));
    }
    Ok(model.peak_luminance / anchor)
}

fn apply_display(frame: &HdrFrame, scale: f64, model: &DisplayModel) -> LuminanceMap {
    LuminanceMap {
        width: frame.width(),
        height: frame.height(),
        data: frame
            .image
            .luminance()
            .into_iter()
            .map(|l| (scale * l).clamp(model.black_level, model.peak_luminance))
            .collect(),
    }
}

/// PU-encoded values and how many inputs fell outside the curve's domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PuEncoded {
    pub values: Vec<f64>,
    pub clamped: usize,
}

pub fn pu_encode(luminance: &[f64], curve: &PuCurve) -> PuEncoded {
    let clamped = luminance
        .iter()
        .filter(|&&y| !(curve.min_luminance..=curve.max_luminance).contains(&y))
        .count();
    PuEncoded {
        values: luminance.iter().map(|&y| curve.encode_value(y)).collect(),
        clamped,
    }
}

/// PU-encoded luminance of a prediction and its reference.
fn encode_pair(
    pred: &HdrFrame,
    reference: &HdrFrame,
    model: &DisplayModel,
    curve: &PuCurve,
) -> Result<(PuEncoded, PuEncoded, LuminanceMap)> {
    pred.image.expect_same_size(&reference.image)?;
    let scale = display_scale(reference, model)?;
    let p = apply_display(pred, scale, model);
    let r = apply_display(reference, scale, model);
    let pe = pu_encode(&p.data, curve);
    let re = pu_encode(&r.data, curve);
    Ok((pe, re, r))
}

/// PU range of the display, used as the signal peak.
pub fn pu_dynamic_range(model: &DisplayModel, curve: &PuCurve) -> f64 {
    curve.encode_value(model.peak_luminance) - curve.encode_value(model.black_level)
}

/// PSNR in dB of PU-encoded luminance; `+inf` for identical inputs.
pub fn pu_psnr(
    pred: &HdrFrame,
    reference: &HdrFrame,
    model: &DisplayModel,
    curve: &PuCurve,
) -> Result<f64> {
    let (p, r, _) = encode_pair(pred, reference, model, curve)?;
    Ok(psnr(&p.values, &r.values, pu_dynamic_range(model, curve)))
}

pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// SSIM of PU-encoded luminance with an 11x11 Gaussian window over valid positions.
pub fn pu_ssim(
    pred: &HdrFrame,
    reference: &HdrFrame,
    model: &DisplayModel,
    curve: &PuCurve,
) -> Result<f64> {
    let (w, h) = (reference.width(), reference.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let (p, r, _) = encode_pair(pred, reference, model, curve)?;
    Ok(ssim(
        &p.values,
        &r.values,
        w,
        h,
        pu_dynamic_range(model, curve),
    ))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filter of a `w x h` image.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel images with the given dynamic range.
pub fn ssim(a: &[f64], b: &[f64], w: usize, h: usize, range: f64) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Per-frame metric record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub index: usize,
    pub pu_psnr: f64,
    pub pu_ssim: f64,
}

pub fn score_frames(
    preds: &[HdrFrame],
    refs: &[HdrFrame],
    model: &DisplayModel,
    curve: &PuCurve,
) -> Result<Vec<FrameScore>> {
    use rayon::prelude::*;
    if preds.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "prediction has {} frames, reference has {}",
            preds.len(),
            refs.len()
        )));
    }
    preds
        .par_iter()
        .zip(refs)
        .enumerate()
        .map(|(index, (p, r))| {
            Ok(FrameScore {
                index,
                pu_psnr: pu_psnr(p, r, model, curve)?,
                pu_ssim: pu_ssim(p, r, model, curve)?,
            })
        })
        .collect()
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// CSV with a header, one row per frame, and a trailing `mean` row.
pub fn scores_to_csv(scores: &[FrameScore]) -> String {
    let mut out = String::from("frame,pu_psnr,pu_ssim\n");
    for s in scores {
        out.push_str(&format!(
            "{},{},{}\n",
            s.index,
            fmt_metric(s.pu_psnr),
            fmt_metric(s.pu_ssim)
        ));
    }
    let n = scores.len().max(1) as f64;
    let mean_psnr = scores.iter().map(|s| s.pu_psnr).sum::<f64>() / n;
    let mean_ssim = scores.iter().map(|s| s.pu_ssim).sum::<f64>() / n;
    out.push_str(&format!(
        "mean,{},{}\n",
        fmt_metric(mean_psnr),
        fmt_metric(mean_ssim)
    ));
    out
}
