use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Entry, Split};
use super::Image;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, tag};

/// Parameters of the synthetic glyph dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    /// Defaults to a quarter of `train_per_class` (at least one).
    pub test_per_class: Option<usize>,
    pub hr_size: usize,
    pub vlr_size: usize,
    pub channels: usize,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            train_per_class: 200,
            test_per_class: None,
            hr_size: 32,
            vlr_size: 8,
            channels: 1,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn test_count(&self) -> usize {
        self.test_per_class.unwrap_or((self.train_per_class / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.train_per_class == 0 {
            return Err(Error::InvalidArgument("train_per_class must be positive".into()));
        }
        if self.vlr_size == 0 || self.vlr_size >= self.hr_size {
            return Err(Error::InvalidArgument(format!(
                "VLR size {} must be positive and below HR size {}",
                self.vlr_size, self.hr_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        Ok(())
    }
}

const SUPERSAMPLE: usize = 4;

/// Whether the unit-frame point lies on glyph `class`. Classes cycle
/// through four base shapes; higher classes use hollow and dotted variants.
fn inside(class: usize, x: f64, y: f64) -> bool {
    let base = match class % 4 {
        0 => x * x + y * y <= 1.0,
        1 => x.abs().max(y.abs()) <= 0.85,
        2 => {
            // Equilateral triangle pointing up, inscribed in the unit circle.
            let h = 3f64.sqrt();
            y <= 0.5 && h * x - y <= 1.0 && -h * x - y <= 1.0
        }
        _ => (x.abs() <= 0.32 && y.abs() <= 1.0) || (y.abs() <= 0.32 && x.abs() <= 1.0),
    };
    let variant = class / 4;
    let hollow = variant % 2 == 1;
    let dotted = (variant / 2) % 2 == 1;
    let mut v = base;
    if hollow && base {
        v = !inside(class % 4, x / 0.5, y / 0.5);
    }
    if dotted && x * x + y * y <= 0.06 {
        v = !v;
    }
    v
}

/// Renders one glyph with random placement, scale, rotation, contrast and
/// noise, quantized to 8 bits.
pub fn render_glyph<R: Rng + ?Sized>(class: usize, size: usize, channels: usize, noise: f64, rng: &mut R) -> Image {
    let s = size as f64;
    let radius = s * rng.random_range(0.26..0.38);
    let cx = s / 2.0 + s * rng.random_range(-0.1..0.1);
    let cy = s / 2.0 + s * rng.random_range(-0.1..0.1);
    let theta: f64 = rng.random_range(-PI / 6.0..PI / 6.0);
    let (sin, cos) = theta.sin_cos();
    let bg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..0.3)).collect();
    let fg: Vec<f64> = (0..channels).map(|_| rng.random_range(0.6..1.0)).collect();

    let mut img = Image::filled(channels, size, size, 0.0);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let dx = (px as f64 + (sx as f64 + 0.5) * step - cx) / radius;
                    let dy = (py as f64 + (sy as f64 + 0.5) * step - cy) / radius;
                    let (ux, uy) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                    if inside(class, ux, uy) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..channels {
                let n = if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
                let v = bg[c] + (fg[c] - bg[c]) * cover + n;
                img.set(c, py, px, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img.quantized()
}

fn sample_seed(cfg: &SynthConfig, split: Split, class: usize, index: usize) -> u64 {
    let split_tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    derive_seed(cfg.seed, &[tag::SYNTH, split_tag, class as u64, index as u64])
}

/// In-memory dataset: `(image, label)` for every sample of a split, in
/// file order.
pub fn synth_images(cfg: &SynthConfig, split: Split) -> Result<Vec<(Image, usize)>> {
    cfg.validate()?;
    let per_class = match split {
        Split::Train => cfg.train_per_class,
        Split::Test => cfg.test_count(),
    };
    let mut out = Vec::with_capacity(per_class * cfg.num_classes);
    for class in 0..cfg.num_classes {
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg, split, class, i));
            out.push((render_glyph(class, cfg.hr_size, cfg.channels, cfg.noise, &mut rng), class));
        }
    }
    Ok(out)
}

fn file_name(class: usize, index: usize) -> String {
    format!("c{class:03}_{index:05}.png")
}

/// Writes a class-balanced PNG dataset with labels CSVs and a manifest
/// under `root`. Output is byte-identical for a given configuration.
pub fn synth_dataset(root: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let per_class = match split {
            Split::Train => cfg.train_per_class,
            Split::Test => cfg.test_count(),
        };
        for (n, (img, label)) in synth_images(cfg, split)?.into_iter().enumerate() {
            let name = file_name(label, n % per_class);
            img.save_png(&dir.join(&name))?;
            entries.push(Entry {
                file: PathBuf::from(split.as_str()).join(name),
                label,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        num_classes: cfg.num_classes,
        channels: cfg.channels,
        hr_size: cfg.hr_size,
        vlr_size: cfg.vlr_size,
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_classes_differ() {
        let shapes: Vec<Vec<bool>> = (0..8)
            .map(|k| {
                (0..400)
                    .map(|i| inside(k, (i % 20) as f64 / 10.0 - 1.0, (i / 20) as f64 / 10.0 - 1.0))
                    .collect()
            })
            .collect();
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(shapes[a], shapes[b], "classes {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn counts_and_determinism() {
        let cfg = SynthConfig {
            train_per_class: 8,
            hr_size: 16,
            vlr_size: 4,
            ..Default::default()
        };
        let a = synth_images(&cfg, Split::Train).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(synth_images(&cfg, Split::Test).unwrap().len(), 8);
        for k in 0..4 {
            assert_eq!(a.iter().filter(|(_, l)| *l == k).count(), 8);
        }
        let b = synth_images(&cfg, Split::Train).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|(img, _)| img.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
