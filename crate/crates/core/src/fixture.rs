//! Synthetic HDR test scene: a bright disk sliding across a textured
//! background whose illumination ramps up over the clip.
//!
//! The ramp makes auto-exposure darken later frames, so the disk is clipped
//! for most of the clip and unclipped near the end. The background texture
//! spans three stops so brighter re-exposures still contain unclipped
//! mid-tones.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::exposure::HdrFrame;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub frames: usize,
    pub size: usize,
    /// Radiance of the disk.
    pub disk_radiance: f64,
    pub disk_radius: f64,
    /// Background brightening over the whole clip, in stops.
    pub ramp_stops: f64,
    /// Exponent applied to clip progress; above 1 the ramp starts slowly.
    pub ramp_shape: f64,
    pub background_level: f64,
    /// Half the texture's range, in stops.
    pub texture_stops: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            size: 64,
            disk_radiance: 1.0,
            disk_radius: 9.5,
            ramp_stops: 5.0,
            ramp_shape: 2.0,
            background_level: 0.05,
            texture_stops: 1.5,
        }
    }
}

const BACKGROUND_TINT: [f64; 3] = [1.0, 0.85, 0.7];
const DISK_TINT: [f64; 3] = [1.0, 0.9, 0.75];

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.size < 8 {
            return Err(Error::InvalidConfig(
                "fixture needs at least 1 frame of 8x8".into(),
            ));
        }
        let positive = [
            self.disk_radiance,
            self.disk_radius,
            self.background_level,
            self.ramp_shape,
        ];
        let finite = [self.ramp_stops, self.texture_stops];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || finite.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidConfig(
                "fixture parameters must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    /// Disk centre at frame `t`, in pixel units.
    pub fn disk_centre(&self, t: usize) -> (f64, f64) {
        let s = self.size as f64;
        let progress = self.progress(t);
        (s * (0.1875 + 0.625 * progress), s * 0.5)
    }

    fn progress(&self, t: usize) -> f64 {
        if self.frames > 1 {
            t as f64 / (self.frames - 1) as f64
        } else {
            0.0
        }
    }

    /// Soft disk coverage of pixel centre `(x, y)` at frame `t`.
    pub fn disk_coverage(&self, t: usize, x: usize, y: usize) -> f64 {
        let (cx, cy) = self.disk_centre(t);
        let r = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
        (self.disk_radius - r).clamp(0.0, 1.0)
    }

    pub fn frame(&self, t: usize) -> HdrFrame {
        let gain = 2f64.powf(self.ramp_stops * self.progress(t).powf(self.ramp_shape));
        let phase = 0.3 * t as f64;
        let image = Image::from_fn(self.size, self.size, |c, y, x| {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let wave = (2.0 * PI * xf / 16.0 + phase).sin() * (2.0 * PI * yf / 12.0).sin();
            let texture = 2f64.powf(self.texture_stops * wave);
            let background = self.background_level * texture * BACKGROUND_TINT[c] * gain;
            let m = self.disk_coverage(t, x, y);
            background * (1.0 - m) + self.disk_radiance * DISK_TINT[c] * m
        });
        HdrFrame { image }
    }

    pub fn generate(&self) -> Result<Vec<HdrFrame>> {
        self.validate()?;
        Ok((0..self.frames).map(|t| self.frame(t)).collect())
    }
}
