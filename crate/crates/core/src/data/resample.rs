use super::Image;
use crate::error::{Error, Result};

/// Keys' cubic convolution parameter.
pub const BICUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four source indices and weights per output position, using half-pixel
/// centers and clamping at the borders.
fn taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let t = s - base;
            let base = base as isize;
            let clamp = |i: isize| i.clamp(0, src as isize - 1) as usize;
            (
                [clamp(base - 1), clamp(base), clamp(base + 1), clamp(base + 2)],
                [cubic(t + 1.0), cubic(t), cubic(1.0 - t), cubic(2.0 - t)],
            )
        })
        .collect()
}

/// Separable bicubic resampling (horizontal pass first, `f64` accumulation).
/// No antialiasing prefilter is applied on downscaling; results are clamped
/// to `[0, 1]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("target size must be positive, got {out_h}x{out_w}")));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut mid = vec![0.0f64; h * out_w];
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, (idx, wt)) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * f64::from(row[idx[k]]);
                }
                mid[y * out_w + x] = acc;
            }
        }
        for (idx, wt) in &ty {
            for x in 0..out_w {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * mid[idx[k] * out_w + x];
                }
                out.push(acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(c, out_h, out_w, out)
}

/// Nearest-neighbour resampling with the same pixel-center convention.
pub fn nearest_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("target size must be positive, got {out_h}x{out_w}")));
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let pick = |o: usize, src: usize, dst: usize| (((o as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                out.push(img.get(ch, pick(y, h, out_h), pick(x, w, out_w)));
            }
        }
    }
    Image::new(c, out_h, out_w, out)
}

/// Downsamples to `vlr_size` and back up to the HR geometry. Returns the
/// VLR input at HR size and the untouched HR target.
pub fn make_vlr_pair(hr: &Image, vlr_size: usize) -> Result<(Image, Image)> {
    let side = hr.height().min(hr.width());
    if vlr_size == 0 || vlr_size >= side {
        return Err(Error::InvalidArgument(format!(
            "VLR size {vlr_size} must be positive and smaller than the HR size {}x{}",
            hr.height(),
            hr.width()
        )));
    }
    let (vh, vw) = if hr.height() == hr.width() {
        (vlr_size, vlr_size)
    } else {
        let r = vlr_size as f64 / side as f64;
        (
            ((hr.height() as f64 * r).round() as usize).max(1),
            ((hr.width() as f64 * r).round() as usize).max(1),
        )
    };
    let low = bicubic_resize(hr, vh, vw)?;
    let up = bicubic_resize(&low, hr.height(), hr.width())?;
    Ok((up, hr.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
        for t in [0.0, 0.1, 0.37, 0.5, 0.99] {
            let s = cubic(t + 1.0) + cubic(t) + cubic(1.0 - t) + cubic(2.0 - t);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_constant() {
        let img = Image::new(1, 3, 4, (0..12).map(|v| v as f32 / 12.0).collect()).unwrap();
        assert_eq!(bicubic_resize(&img, 3, 4).unwrap(), img);
        let c = Image::filled(3, 32, 32, 0.37);
        let (vlr, hr) = make_vlr_pair(&c, 8).unwrap();
        assert!(vlr.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
        assert_eq!(hr, c);
    }

    #[test]
    fn vlr_size_must_be_smaller() {
        let img = Image::filled(1, 8, 8, 0.0);
        assert!(make_vlr_pair(&img, 8).is_err());
        assert!(make_vlr_pair(&img, 0).is_err());
    }
}
