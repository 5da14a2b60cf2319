use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Planar (CHW) image with `f32` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Mean squared pixel difference.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if !self.same_geometry(other) {
            return Err(Error::shape(
                "mse",
                format!(
                    "{}x{}x{} vs {}x{}x{}",
                    self.channels, self.height, self.width, other.channels, other.height, other.width
                ),
            ));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f32(v)).collect(),
        )
        .expect("image geometry is valid")
    }

    /// From a `[C, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::shape("image", format!("expected [C, H, W], got {s:?}")));
        }
        Image::new(s[0], s[1], s[2], t.data().iter().map(|v| v.as_f32()).collect())
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Decodes an 8- or 16-bit grayscale or RGB PNG; alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Image {
            path: path.to_path_buf(),
            detail,
        };
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        let (stride, channels) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            other => return Err(bad(format!("unsupported color type {other:?}"))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut img = Image::filled(channels, h, w, 0.0);
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                for c in 0..channels {
                    img.set(c, y, x, f32::from(row[x * stride + c]) / 255.0);
                }
            }
        }
        Ok(img)
    }

    /// Writes an 8-bit PNG (grayscale for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    detail: format!("cannot encode {c} channels"),
                })
            }
        };
        let bytes = self.to_interleaved_u8();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(fail)?;
        writer.write_image_data(&bytes).map_err(fail)?;
        writer.finish().map_err(fail)
    }

    /// Row-major interleaved 8-bit samples, rounding to nearest.
    pub fn to_interleaved_u8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.push(quantize(self.get(c, y, x)));
                }
            }
        }
        out
    }

    /// Snaps values to the 8-bit grid, so that saving and reloading is
    /// lossless.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| f32::from(quantize(v)) / 255.0).collect(),
            ..self.clone()
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles equally sized images into rows of `per_row` with a one-pixel gap.
pub fn tile(images: &[Image], per_row: usize, background: f32) -> Result<Option<Image>> {
    let Some(first) = images.first() else {
        return Ok(None);
    };
    if per_row == 0 {
        return Err(Error::InvalidArgument("tile row width must be positive".into()));
    }
    if let Some(odd) = images.iter().find(|i| !i.same_geometry(first)) {
        return Err(Error::shape(
            "tile",
            format!("mixed geometries {}x{} and {}x{}", first.height, first.width, odd.height, odd.width),
        ));
    }
    let rows = images.len().div_ceil(per_row);
    let cols = per_row.min(images.len());
    let (h, w) = (first.height, first.width);
    let mut grid = Image::filled(first.channels, rows * (h + 1) - 1, cols * (w + 1) - 1, background);
    for (i, img) in images.iter().enumerate() {
        let (oy, ox) = ((i / per_row) * (h + 1), (i % per_row) * (w + 1));
        for c in 0..img.channels {
            for y in 0..h {
                for x in 0..w {
                    grid.set(c, oy + y, ox + x, img.get(c, y, x));
                }
            }
        }
    }
    Ok(Some(grid))
}
