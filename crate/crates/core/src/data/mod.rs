//! Paired HR/VLR data: image I/O, bicubic resampling, augmentation,
//! batching and the synthetic glyph dataset.

mod augment;
mod batch;
mod image;
mod manifest;
mod resample;
mod synth;

pub use augment::{apply_to_sample, augment, brighten, crop, hflip, AugmentConfig, AugmentOps, CropWindow};
pub use batch::{epoch_batches, Mix, View};
pub use image::{tile, Image};
pub use manifest::{DatasetManifest, Entry, LoadedSplit, Split, MANIFEST_SCHEMA};
pub use resample::{bicubic_resize, make_vlr_pair, nearest_resize, BICUBIC_A};
pub use synth::{render_glyph, synth_dataset, synth_images, SynthConfig};

use crate::error::{Error, Result};
use crate::losses::Resolution;

/// One training or test example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Network input at HR geometry (VLR inputs are upscaled).
    pub input: Image,
    pub hr_target: Image,
    pub label: usize,
    pub resolution: Resolution,
}

/// HR images with their VLR counterparts upscaled back to HR size.
#[derive(Debug, Clone)]
pub struct PairedSet {
    pub hr: Vec<Image>,
    pub vlr: Vec<Image>,
    pub labels: Vec<usize>,
}

impl PairedSet {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, vlr_size: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape("paired_set", format!("{} images, {} labels", images.len(), labels.len())));
        }
        let vlr = images
            .iter()
            .map(|img| make_vlr_pair(img, vlr_size).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        Ok(PairedSet {
            hr: images,
            vlr,
            labels,
        })
    }

    pub fn from_split(split: LoadedSplit, vlr_size: usize) -> Result<Self> {
        Self::new(split.images, split.labels, vlr_size)
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn sample(&self, view: View) -> Sample {
        let input = match view.resolution {
            Resolution::Hr => &self.hr[view.index],
            Resolution::Vlr => &self.vlr[view.index],
        };
        Sample {
            input: input.clone(),
            hr_target: self.hr[view.index].clone(),
            label: self.labels[view.index],
            resolution: view.resolution,
        }
    }
}
