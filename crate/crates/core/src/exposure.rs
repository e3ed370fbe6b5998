//! Camera and exposure simulation.
//!
//! The camera response is modelled as a pure gamma 2.2 curve, so re-exposing
//! a display-referred value by `dv` stops multiplies it by `2^(dv / 2.2)`
//! before clipping to `[0, 1]` and rounding to 8 bits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

pub const GAMMA: f64 = 2.2;

/// Exposure gap between a training input and its target, in stops.
pub const TRAINING_EXPOSURE_GAP: f64 = 2.0;

/// Augmentation shifts are drawn from `U(0, MAX_SHIFT)`.
pub const MAX_SHIFT: f64 = 0.25;

/// Training frames are subsampled to this rate.
pub const TRAINING_FPS: f64 = 6.0;

/// Display mid-grey that auto-exposure maps the mean luminance to.
pub const MID_GREY: f64 = 0.5;

/// Round to the nearest multiple of 1/255, halves away from zero.
#[inline]
pub fn quantize8(x: f64) -> f64 {
    (x * 255.0).round() / 255.0
}

#[inline]
fn clip_quantize(x: f64) -> f64 {
    quantize8(x.clamp(0.0, 1.0))
}

/// Display-referred 8-bit frame with its exposure in stops relative to the
/// sequence base.
#[derive(Debug, Clone, PartialEq)]
pub struct SdrFrame {
    pub image: Image,
    pub exposure_value: f64,
}

impl SdrFrame {
    /// Validates that every sample is a multiple of 1/255 in `[0, 1]`.
    pub fn new(image: Image, exposure_value: f64) -> Result<Self> {
        if !exposure_value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "exposure value must be finite, got {exposure_value}"
            )));
        }
        if let Some(v) = image
            .data()
            .iter()
            .find(|&&v| !(0.0..=1.0).contains(&v) || quantize8(v) != v)
        {
            return Err(Error::InvalidInput(format!(
                "SDR sample {v} is not an 8-bit value in [0, 1]"
            )));
        }
        Ok(Self {
            image,
            exposure_value,
        })
    }

    /// Quantizes an arbitrary image into a valid frame.
    pub fn quantized(image: &Image, exposure_value: f64) -> Self {
        Self {
            image: image.map(clip_quantize),
            exposure_value,
        }
    }

    /// Interleaved RGB bytes, `v / 255` per sample.
    pub fn from_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        let values: Vec<f64> = rgb.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Self {
            image: Image::from_interleaved(width, height, &values)?,
            exposure_value: 0.0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.image
            .to_interleaved()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

/// Linear scene-referred radiance; finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrFrame {
    pub image: Image,
}

impl HdrFrame {
    pub fn new(image: Image) -> Result<Self> {
        if let Some(v) = image.data().iter().find(|&&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "HDR sample {v} is negative or non-finite"
            )));
        }
        Ok(Self { image })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn mean_luminance(&self) -> f64 {
        let l = self.image.luminance();
        l.iter().sum::<f64>() / l.len() as f64
    }
}

/// Per-pixel multiplicative residual mapping an exposure to a darker one.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap(pub Image);

/// Re-exposes a frame by `delta_v` stops with clipping and 8-bit rounding.
pub fn apply_exposure(frame: &SdrFrame, delta_v: f64) -> SdrFrame {
    let gain = 2f64.powf(delta_v / GAMMA);
    SdrFrame {
        image: frame.image.map(|v| clip_quantize(v * gain)),
        exposure_value: frame.exposure_value + delta_v,
    }
}

/// `base / high` per sample, with `1` where `high` is zero, clamped to `[0, 1]`.
pub fn compute_residual(base: &SdrFrame, high: &SdrFrame) -> Result<ResidualMap> {
    let img = base.image.zip_map(&high.image, |b, h| {
        if h == 0.0 {
            1.0
        } else {
            (b / h).clamp(0.0, 1.0)
        }
    })?;
    Ok(ResidualMap(img))
}

/// One self-supervised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Frame re-exposed to `b + 2 + s`.
    pub input: SdrFrame,
    /// `target_base / input`.
    pub target_residual: ResidualMap,
    /// Frame re-exposed to `b + s`.
    pub target_base: SdrFrame,
    pub shift: f64,
}

/// Indices kept when subsampling `len` frames at `fps` down to 6 fps.
pub fn subsample_indices(len: usize, fps: f64) -> Vec<usize> {
    let stride = ((fps / TRAINING_FPS).round() as usize).max(1);
    (0..len).step_by(stride).collect()
}

pub fn make_training_pair(frame: &SdrFrame, shift: f64) -> Result<TrainingPair> {
    let target_base = apply_exposure(frame, shift);
    let input = apply_exposure(frame, TRAINING_EXPOSURE_GAP + shift);
    let target_residual = compute_residual(&target_base, &input)?;
    Ok(TrainingPair {
        input,
        target_residual,
        target_base,
        shift,
    })
}

/// Builds one epoch of training pairs with fresh augmentation shifts.
pub fn build_training_set(video: &[SdrFrame], fps: f64, seed: u64) -> Result<Vec<TrainingPair>> {
    if video.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty video".into()));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "fps must be positive, got {fps}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subsample_indices(video.len(), fps)
        .into_iter()
        .map(|i| {
            let s = rng.random_range(0.0..MAX_SHIFT);
            make_training_pair(&video[i], s)
        })
        .collect()
}

/// Exponentially smoothed auto-exposure state, fed frames in temporal order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoExposureState {
    pub smoothed_f: Option<f64>,
    pub alpha: f64,
}

impl AutoExposureState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "smoothing factor must lie in [0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            smoothed_f: None,
            alpha,
        })
    }
}

/// Exposure in stops that maps `mean_luminance` to display mid-grey.
pub fn raw_exposure(mean_luminance: f64) -> f64 {
    (MID_GREY.powf(GAMMA) / mean_luminance).log2()
}

/// Smoothed exposure for the next frame; updates `state`.
pub fn auto_exposure_value(frame: &HdrFrame, state: &mut AutoExposureState) -> Result<f64> {
    let mean = frame.mean_luminance();
    if !(mean > 0.0) {
        return Err(Error::InvalidInput(
            "auto-exposure is undefined for an all-black frame".into(),
        ));
    }
    let raw = raw_exposure(mean);
    let f = match state.smoothed_f {
        None => raw,
        Some(prev) => state.alpha * prev + (1.0 - state.alpha) * raw,
    };
    state.smoothed_f = Some(f);
    Ok(f)
}

/// Renders radiance at exposure `f`: `q8(clip((E * 2^f)^(1/2.2)))`.
pub fn simulate_sdr(frame: &HdrFrame, f: f64) -> SdrFrame {
    let gain = 2f64.powf(f);
    SdrFrame {
        image: frame
            .image
            .map(|e| clip_quantize((e * gain).powf(1.0 / GAMMA))),
        exposure_value: f,
    }
}

/// Auto-exposes and renders a whole sequence.
///
/// Returns the frames (exposure values relative to the first frame) and the
/// absolute per-frame exposures.
pub fn simulate_sdr_sequence(frames: &[HdrFrame], alpha: f64) -> Result<(Vec<SdrFrame>, Vec<f64>)> {
    let mut state = AutoExposureState::new(alpha)?;
    let mut exposures = Vec::with_capacity(frames.len());
    for frame in frames {
        exposures.push(auto_exposure_value(frame, &mut state)?);
    }
    let base = exposures.first().copied().unwrap_or(0.0);
    let sdr = frames
        .iter()
        .zip(&exposures)
        .map(|(frame, &f)| {
            let mut out = simulate_sdr(frame, f);
            out.exposure_value = f - base;
            out
        })
        .collect();
    Ok((sdr, exposures))
}
