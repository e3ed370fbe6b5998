//! Exposure-stack generation and fusion into linear radiance.
//!
//! Darker exposures are produced by multiplying a frame by the predicted
//! residual, brighter ones by dividing by it. Each step re-runs the predictor
//! on the previous step's output. The stack is then merged with a hat-weighted
//! average in the linear domain.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::exposure::{HdrFrame, SdrFrame, GAMMA, TRAINING_EXPOSURE_GAP};
use crate::image::Image;
use crate::unet::{ModelWeights, SIZE_MULTIPLE};

/// Samples at or above this value are treated as saturated.
pub const SATURATION: f64 = 254.5 / 255.0;

/// Anything that maps a display-referred frame to a per-pixel residual.
pub trait ResidualPredictor: Sync {
    fn predict(&self, frame: &Image) -> Result<Image>;
}

impl ResidualPredictor for ModelWeights {
    /// Pads to a multiple of 8 by edge replication, runs the network, crops back.
    fn predict(&self, frame: &Image) -> Result<Image> {
        let padded = frame.pad_to_multiple(SIZE_MULTIPLE);
        let out = Image::from_tensor(&self.forward(&padded.to_tensor())?)?;
        out.crop(frame.width(), frame.height())
    }
}

/// Predicts the same residual everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ConstantResidual(pub f64);

impl ResidualPredictor for ConstantResidual {
    fn predict(&self, frame: &Image) -> Result<Image> {
        Ok(Image::filled(frame.width(), frame.height(), self.0))
    }
}

/// One exposure darker: `delta * frame`.
pub fn step_down(predictor: &dyn ResidualPredictor, frame: &Image) -> Result<Image> {
    let delta = predictor.predict(frame)?;
    frame.zip_map(&delta, |z, d| z * d)
}

/// One exposure brighter: `frame / delta`, optionally clamped to `[0, 1]`.
pub fn step_up_with(
    predictor: &dyn ResidualPredictor,
    frame: &Image,
    clamp: bool,
) -> Result<Image> {
    let delta = predictor.predict(frame)?;
    frame.zip_map(&delta, |z, d| {
        let v = z / d;
        if clamp {
            v.clamp(0.0, 1.0)
        } else {
            v
        }
    })
}

pub fn step_up(predictor: &dyn ResidualPredictor, frame: &Image) -> Result<Image> {
    step_up_with(predictor, frame, true)
}

/// Frames of one source frame at strictly increasing exposure offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureStack {
    entries: Vec<(Image, f64)>,
}

impl ExposureStack {
    pub fn new(entries: Vec<(Image, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("exposure stack is empty".into()));
        }
        if entries.windows(2).any(|w| !(w[0].1 < w[1].1)) {
            return Err(Error::InvalidInput(
                "exposure offsets must be strictly increasing".into(),
            ));
        }
        if !entries.iter().any(|(_, v)| *v == 0.0) {
            return Err(Error::InvalidInput(
                "exposure stack must contain the offset-0 frame".into(),
            ));
        }
        let first = &entries[0].0;
        if entries.iter().any(|(img, _)| !img.same_size(first)) {
            return Err(Error::Shape("exposure stack frames differ in size".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(Image, f64)] {
        &self.entries
    }

    pub fn offsets(&self) -> Vec<f64> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn get(&self, offset: f64) -> Option<&Image> {
        self.entries
            .iter()
            .find(|(_, v)| *v == offset)
            .map(|(img, _)| img)
    }
}

/// How many darker and brighter steps to chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackOptions {
    pub n_down: usize,
    pub n_up: usize,
    /// Clamp brighter predictions to `[0, 1]` before chaining.
    pub clamp_up: bool,
}

impl Default for StackOptions {
    fn default() -> Self {
        Self {
            n_down: 2,
            n_up: 2,
            clamp_up: true,
        }
    }
}

impl StackOptions {
    /// Parses an offset list such as `-4,-2,0,2,4`.
    ///
    /// Offsets must be consecutive multiples of two around zero.
    pub fn from_offsets(offsets: &[f64]) -> Result<Self> {
        let mut sorted = offsets.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n_down = sorted.iter().filter(|&&v| v < 0.0).count();
        let n_up = sorted.iter().filter(|&&v| v > 0.0).count();
        let expected: Vec<f64> = (-(n_down as i64)..=n_up as i64)
            .map(|i| i as f64 * TRAINING_EXPOSURE_GAP)
            .collect();
        if sorted != expected {
            return Err(Error::InvalidConfig(format!(
                "stack offsets {offsets:?} must be consecutive multiples of {TRAINING_EXPOSURE_GAP} including 0"
            )));
        }
        Ok(Self {
            n_down,
            n_up,
            clamp_up: true,
        })
    }
}

/// Builds the stack by chaining residual steps from the input frame.
pub fn expand_stack(
    predictor: &dyn ResidualPredictor,
    frame: &SdrFrame,
    options: StackOptions,
) -> Result<ExposureStack> {
    let mut darker = Vec::with_capacity(options.n_down);
    let mut current = frame.image.clone();
    for i in 1..=options.n_down {
        current = step_down(predictor, &current)?;
        darker.push((current.clone(), -(i as f64) * TRAINING_EXPOSURE_GAP));
    }
    darker.reverse();

    let mut entries = darker;
    entries.push((frame.image.clone(), 0.0));
    let mut current = frame.image.clone();
    for i in 1..=options.n_up {
        current = step_up_with(predictor, &current, options.clamp_up)?;
        entries.push((current.clone(), i as f64 * TRAINING_EXPOSURE_GAP));
    }
    ExposureStack::new(entries)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub weight_floor: f64,
    pub gamma: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            weight_floor: 1e-4,
            gamma: GAMMA,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_floor > 0.0 && self.weight_floor.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "fusion weight floor must be positive, got {}",
                self.weight_floor
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Hat weight; saturated samples get zero weight.
#[inline]
fn hat_weight(z: f64, floor: f64) -> f64 {
    if z >= SATURATION {
        0.0
    } else {
        z.min(1.0 - z).max(floor)
    }
}

/// Merges a stack into relative radiance anchored at the offset-0 frame.
///
/// Each unsaturated sample `z` at offset `v` votes for `z^gamma * 2^-v` with a
/// hat weight. Pixels saturated in every exposure fall back to the darkest one.
pub fn fuse_stack(stack: &ExposureStack, config: &FusionConfig) -> Result<HdrFrame> {
    config.validate()?;
    let entries = stack.entries();
    let (first, lowest_offset) = (&entries[0].0, entries[0].1);
    let scales: Vec<f64> = entries.iter().map(|(_, v)| 2f64.powf(-v)).collect();
    let data: Vec<f64> = (0..first.data().len())
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for ((img, _), &scale) in entries.iter().zip(&scales) {
                let z = img.data()[i].max(0.0);
                let w = hat_weight(z, config.weight_floor);
                num += w * z.powf(config.gamma) * scale;
                den += w;
            }
            if den > 0.0 {
                num / den
            } else {
                first.data()[i].max(0.0).powf(config.gamma) * 2f64.powf(-lowest_offset)
            }
        })
        .collect();
    HdrFrame::new(Image::new(first.width(), first.height(), data)?)
}

/// Expands every frame independently; output order matches input order.
pub fn expand_video(
    predictor: &dyn ResidualPredictor,
    video: &[SdrFrame],
    options: StackOptions,
    fusion: &FusionConfig,
) -> Result<Vec<HdrFrame>> {
    fusion.validate()?;
    video
        .par_iter()
        .map(|frame| fuse_stack(&expand_stack(predictor, frame, options)?, fusion))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exposure::{apply_exposure, quantize8, simulate_sdr};

    fn sdr(values: &[f64]) -> SdrFrame {
        let n = values.len();
        let data: Vec<f64> = (0..3).flat_map(|_| values.iter().copied()).collect();
        SdrFrame::new(Image::new(n, 1, data).unwrap(), 0.0).unwrap()
    }

    fn ramp() -> SdrFrame {
        sdr(&(0..=255).map(|b| f64::from(b) / 255.0).collect::<Vec<_>>())
    }

    #[test]
    fn black_stays_black() {
        let black = Image::filled(4, 4, 0.0);
        let p = ConstantResidual(0.4);
        assert!(step_down(&p, &black)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(step_up(&p, &black)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn step_up_with_half_residual() {
        let f = sdr(&[51.0 / 255.0, 204.0 / 255.0]);
        let p = ConstantResidual(0.5);
        let up = step_up(&p, &f.image).unwrap();
        assert!((up.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(up.data()[1], 1.0);
        let raw = step_up_with(&p, &f.image, false).unwrap();
        assert!((raw.data()[1] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn step_down_matches_reexposure() {
        let f = ramp();
        let p = ConstantResidual(2f64.powf(-2.0 / 2.2));
        let down = step_down(&p, &f.image).unwrap();
        let reference = apply_exposure(&f, -2.0);
        for (a, b) in down.data().iter().zip(reference.image.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
            assert!(*a <= 1.0);
        }
        assert!(down.data().iter().zip(f.image.data()).all(|(d, z)| d <= z));
    }

    #[test]
    fn identity_stack() {
        let f = ramp();
        let none = StackOptions {
            n_down: 0,
            n_up: 0,
            clamp_up: true,
        };
        let stack = expand_stack(&ConstantResidual(0.5), &f, none).unwrap();
        assert_eq!(stack.offsets(), vec![0.0]);
        assert_eq!(stack.entries()[0].0, f.image);
    }

    #[test]
    fn chained_steps() {
        let f = ramp();
        let c = 2f64.powf(-2.0 / 2.2);
        let p = ConstantResidual(c);
        let stack = expand_stack(&p, &f, StackOptions::default()).unwrap();
        assert_eq!(stack.offsets(), vec![-4.0, -2.0, 0.0, 2.0, 4.0]);
        let twice = step_down(&p, &step_down(&p, &f.image).unwrap()).unwrap();
        assert_eq!(stack.get(-4.0).unwrap(), &twice);
        for (a, z) in stack.get(-4.0).unwrap().data().iter().zip(f.image.data()) {
            assert_eq!(*a, z * c * c);
            assert!((a - z * 2f64.powf(-4.0 / 2.2)).abs() <= 2.0 / 255.0);
        }
    }

    #[test]
    fn stack_is_monotone_in_offset() {
        let f = ramp();
        let stack = expand_stack(&ConstantResidual(0.61), &f, StackOptions::default()).unwrap();
        for w in stack.entries().windows(2) {
            for (lo, hi) in w[0].0.data().iter().zip(w[1].0.data()) {
                assert!(lo <= hi);
            }
        }
    }

    #[test]
    fn stack_validation() {
        let img = Image::filled(2, 2, 0.5);
        assert!(ExposureStack::new(vec![]).is_err());
        assert!(ExposureStack::new(vec![(img.clone(), 2.0), (img.clone(), 0.0)]).is_err());
        assert!(ExposureStack::new(vec![(img.clone(), -2.0), (img.clone(), 2.0)]).is_err());
        assert!(
            ExposureStack::new(vec![(img.clone(), 0.0), (Image::filled(3, 2, 0.5), 2.0)]).is_err()
        );
    }

    #[test]
    fn offsets_parse() {
        let o = StackOptions::from_offsets(&[-4.0, -2.0, 0.0, 2.0, 4.0]).unwrap();
        assert_eq!((o.n_down, o.n_up), (2, 2));
        let o = StackOptions::from_offsets(&[0.0]).unwrap();
        assert_eq!((o.n_down, o.n_up), (0, 0));
        let o = StackOptions::from_offsets(&[2.0, 0.0, -2.0]).unwrap();
        assert_eq!((o.n_down, o.n_up), (1, 1));
        assert!(StackOptions::from_offsets(&[-4.0, 0.0]).is_err());
        assert!(StackOptions::from_offsets(&[-2.0, 2.0]).is_err());
        assert!(StackOptions::from_offsets(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn single_exposure_fusion_linearizes() {
        let stack = ExposureStack::new(vec![(Image::filled(1, 1, 0.5), 0.0)]).unwrap();
        let e = fuse_stack(&stack, &FusionConfig::default()).unwrap();
        assert!((e.image.data()[0] - 0.5f64.powf(2.2)).abs() < 1e-15);
        assert!((e.image.data()[0] - 0.2176).abs() < 1e-4);
    }

    #[test]
    fn fallback_uses_darkest_exposure() {
        let mut entries = vec![(Image::filled(1, 1, 0.8), -4.0)];
        for v in [-2.0, 0.0, 2.0, 4.0] {
            entries.push((Image::filled(1, 1, 1.0), v));
        }
        let e = fuse_stack(
            &ExposureStack::new(entries).unwrap(),
            &FusionConfig::default(),
        )
        .unwrap();
        let expected = 0.8f64.powf(2.2) * 16.0;
        assert!((e.image.data()[0] - expected).abs() < 1e-12);
        assert!((expected - 9.7930).abs() < 1e-4);

        // Everything saturated: the darkest sample still anchors the estimate.
        let all: Vec<_> = [-4.0, -2.0, 0.0]
            .iter()
            .map(|&v| (Image::filled(1, 1, 1.0), v))
            .collect();
        let e = fuse_stack(&ExposureStack::new(all).unwrap(), &FusionConfig::default()).unwrap();
        assert_eq!(e.image.data()[0], 16.0);
    }

    #[test]
    fn consistent_constant_scene_recovered() {
        let radiance = 0.2176;
        let hdr = HdrFrame::new(Image::filled(1, 1, radiance)).unwrap();
        let entries: Vec<_> = [-4.0, -2.0, 0.0, 2.0, 4.0]
            .iter()
            .map(|&v| (simulate_sdr(&hdr, v).image, v))
            .collect();
        let e = fuse_stack(
            &ExposureStack::new(entries).unwrap(),
            &FusionConfig::default(),
        )
        .unwrap();
        assert!((e.image.data()[0] - radiance).abs() / radiance < 0.01);
    }

    #[test]
    fn fusion_is_finite_and_non_negative() {
        let f = ramp();
        for c in [1e-3, 0.2, 0.53, 0.99] {
            let stack = expand_stack(&ConstantResidual(c), &f, StackOptions::default()).unwrap();
            let e = fuse_stack(&stack, &FusionConfig::default()).unwrap();
            assert!(e.image.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        let bad = FusionConfig {
            weight_floor: 0.0,
            ..Default::default()
        };
        let stack = ExposureStack::new(vec![(f.image.clone(), 0.0)]).unwrap();
        assert!(fuse_stack(&stack, &bad).is_err());
    }

    #[test]
    fn video_frames_are_independent() {
        let a = ramp();
        let b = sdr(&(0..=255)
            .rev()
            .map(|v| quantize8(f64::from(v) / 300.0))
            .collect::<Vec<_>>());
        let p = ConstantResidual(0.55);
        let cfg = FusionConfig::default();
        let both =
            expand_video(&p, &[a.clone(), b.clone()], StackOptions::default(), &cfg).unwrap();
        let only_b = expand_video(&p, &[b], StackOptions::default(), &cfg).unwrap();
        assert_eq!(both.len(), 2);
        assert_eq!(both[1], only_b[0]);
        assert!(expand_video(&p, &[], StackOptions::default(), &cfg)
            .unwrap()
            .is_empty());
        assert_eq!(both[0].width(), a.width());
    }
}
