use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bicubic_resize, Image, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub brightness_prob: f64,
    /// Offsets are drawn from `uniform(-brightness_range, brightness_range)`.
    pub brightness_range: f64,
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Side fraction kept by a random crop before resizing back.
    pub crop_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            brightness_prob: 0.5,
            brightness_range: 0.2,
            flip_prob: 0.5,
            crop_prob: 0.5,
            crop_fraction: 0.9,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("brightness_prob", self.brightness_prob),
            ("flip_prob", self.flip_prob),
            ("crop_prob", self.crop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.brightness_range >= 0.0) {
            return Err(Error::Config(format!("augment.brightness_range must be non-negative, got {}", self.brightness_range)));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!("augment.crop_fraction must lie in (0, 1], got {}", self.crop_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// A concrete augmentation, applied identically to input and target.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentOps {
    pub brightness: Option<f32>,
    pub flip: bool,
    pub crop: Option<CropWindow>,
}

impl AugmentOps {
    /// Draws each transform independently. Always consumes the same number
    /// of random values so streams stay aligned across configurations.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let u_b: f64 = rng.random();
        let offset: f64 = rng.random_range(-1.0..=1.0);
        let u_f: f64 = rng.random();
        let u_c: f64 = rng.random();
        let fy: f64 = rng.random();
        let fx: f64 = rng.random();
        if !cfg.enabled {
            return AugmentOps::default();
        }
        let ch = ((height as f64 * cfg.crop_fraction).round() as usize).clamp(1, height);
        let cw = ((width as f64 * cfg.crop_fraction).round() as usize).clamp(1, width);
        AugmentOps {
            brightness: (u_b < cfg.brightness_prob).then_some((offset * cfg.brightness_range) as f32),
            flip: u_f < cfg.flip_prob,
            crop: (u_c < cfg.crop_prob).then(|| CropWindow {
                top: ((height - ch + 1) as f64 * fy) as usize,
                left: ((width - cw + 1) as f64 * fx) as usize,
                height: ch,
                width: cw,
            }),
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut out = img.clone();
        if let Some(b) = self.brightness {
            brighten(&mut out, b);
        }
        if self.flip {
            out = hflip(&out);
        }
        if let Some(c) = self.crop {
            out = crop(&out, c)?;
            out = bicubic_resize(&out, img.height(), img.width())?;
        }
        Ok(out)
    }
}

pub fn brighten(img: &mut Image, offset: f32) {
    for v in img.data_mut() {
        *v = (*v + offset).clamp(0.0, 1.0);
    }
}

/// Mirror about the vertical axis.
pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

pub fn crop(img: &Image, win: CropWindow) -> Result<Image> {
    if win.height == 0 || win.width == 0 || win.top + win.height > img.height() || win.left + win.width > img.width() {
        return Err(Error::InvalidArgument(format!(
            "crop window {win:?} outside {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let mut data = Vec::with_capacity(img.channels() * win.height * win.width);
    for c in 0..img.channels() {
        for y in win.top..win.top + win.height {
            for x in win.left..win.left + win.width {
                data.push(img.get(c, y, x));
            }
        }
    }
    Image::new(img.channels(), win.height, win.width, data)
}

/// Random augmentation of a training sample; the same transform hits the
/// input and the HR target.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    let ops = AugmentOps::sample(cfg, sample.input.height(), sample.input.width(), rng);
    apply_to_sample(sample, &ops)
}

pub fn apply_to_sample(sample: &Sample, ops: &AugmentOps) -> Result<Sample> {
    Ok(Sample {
        input: ops.apply(&sample.input)?,
        hr_target: ops.apply(&sample.hr_target)?,
        label: sample.label,
        resolution: sample.resolution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::new(2, 4, 5, (0..40).map(|v| v as f32 / 40.0).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp();
        assert_ne!(hflip(&img), img);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn zero_brightness_is_identity() {
        let img = ramp();
        let ops = AugmentOps {
            brightness: Some(0.0),
            ..Default::default()
        };
        assert_eq!(ops.apply(&img).unwrap(), img);
    }

    #[test]
    fn brightness_clamps() {
        let mut img = Image::filled(1, 1, 2, 0.9);
        brighten(&mut img, 0.2);
        assert_eq!(img.data(), &[1.0, 1.0]);
    }

    #[test]
    fn crop_bounds_checked() {
        let img = ramp();
        let bad = CropWindow { top: 1, left: 0, height: 4, width: 5 };
        assert!(crop(&img, bad).is_err());
        let ok = CropWindow { top: 1, left: 2, height: 2, width: 3 };
        let c = crop(&img, ok).unwrap();
        assert_eq!(c.get(1, 0, 0), img.get(1, 1, 2));
    }

    #[test]
    fn disabled_config_draws_nothing() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig { enabled: false, ..Default::default() };
        for _ in 0..20 {
            assert_eq!(AugmentOps::sample(&cfg, 8, 8, &mut rng), AugmentOps::default());
        }
    }
}
