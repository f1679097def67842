//! Image decoding/encoding and separable resampling.
//!
//! Images are `(1, 3, H, W)` tensors with values in `[0, 1]`. Resizing is a
//! pair of fixed matrix products, so it is differentiable.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f64 / 255.0;
        }
    }
    Tensor::new(data, &[1, 3, h, w]).expect("rgb shape")
}

/// Rounds to 8-bit after clamping to `[0, 1]`.
pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Channels(c));
    }
    if n != 1 {
        return Err(Error::shape("to_rgb", format!("batch of {n}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| Error::ImageFile {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes)?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    to_rgb(t)?.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_png(t)?)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    /// Cubic convolution with `a = -0.5`, widened when downsampling.
    Bicubic,
    Bilinear,
}

impl Filter {
    fn support(self) -> f64 {
        match self {
            Filter::Bicubic => 2.0,
            Filter::Bilinear => 1.0,
        }
    }

    fn eval(self, x: f64) -> f64 {
        let x = x.abs();
        match self {
            Filter::Bilinear => (1.0 - x).max(0.0),
            Filter::Bicubic => {
                let a = -0.5;
                if x < 1.0 {
                    ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    (((x - 5.0) * x + 8.0) * x - 4.0) * a
                } else {
                    0.0
                }
            }
        }
    }
}

/// `(out, in)` matrix mapping a signal of length `n_in` to `n_out` samples,
/// with antialiasing on downsampling.
pub fn resample_matrix(n_in: usize, n_out: usize, filter: Filter) -> Tensor {
    let scale = n_in as f64 / n_out as f64;
    let fscale = scale.max(1.0);
    let support = filter.support() * fscale;
    let mut m = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let center = (o as f64 + 0.5) * scale;
        let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
        let hi = ((center + support + 0.5).floor() as usize).min(n_in);
        let mut total = 0.0;
        for i in lo..hi {
            let w = filter.eval((i as f64 - center + 0.5) / fscale);
            m[o * n_in + i] = w;
            total += w;
        }
        if total != 0.0 {
            for i in lo..hi {
                m[o * n_in + i] /= total;
            }
        }
    }
    Tensor::new(m, &[n_out, n_in]).expect("resample shape")
}

/// Differentiable resize of a `(N, C, H, W)` tensor.
pub fn resize(t: &Tensor, out_h: usize, out_w: usize, filter: Filter) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize", format!("target {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let x = t.reshape(&[n * c, h, w])?;
    let x = if h != out_h {
        resample_matrix(h, out_h, filter).matmul(&x)?
    } else {
        x
    };
    let x = if w != out_w {
        x.matmul(&resample_matrix(w, out_w, filter).t()?)?
    } else {
        x
    };
    x.reshape(&[n, c, out_h, out_w])
}

/// Target size with the shorter side set to `side`, aspect preserved.
pub fn shorter_side_size(h: usize, w: usize, side: usize) -> (usize, usize) {
    if h <= w {
        (
            side,
            ((w * side) as f64 / h as f64).round().max(1.0) as usize,
        )
    } else {
        (
            ((h * side) as f64 / w as f64).round().max(1.0) as usize,
            side,
        )
    }
}

pub fn crop(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    t.narrow(2, top, h)?.narrow(3, left, w)
}

pub fn center_crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, th, tw) = t.dims4()?;
    if h > th || w > tw {
        return Err(Error::shape("center_crop", format!("{th}x{tw} -> {h}x{w}")));
    }
    crop(t, (th - h) / 2, (tw - w) / 2, h, w)
}

/// Mirror along the width axis.
pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let w = t.dims4()?.3;
    let idx: Vec<usize> = (0..w).rev().collect();
    t.index_select(3, &idx)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_of_resample_matrices_sum_to_one() {
        for (a, b) in [(10, 4), (4, 10), (7, 7), (512, 224)] {
            for f in [Filter::Bicubic, Filter::Bilinear] {
                let m = resample_matrix(a, b, f);
                for row in m.data().chunks(a) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_image_survives_resize() {
        let t = Tensor::full(0.3, &[1, 3, 9, 13]);
        let r = resize(&t, 4, 20, Filter::Bicubic).unwrap();
        assert_eq!(r.shape(), &[1, 3, 4, 20]);
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn downscaling_bilinear_is_antialiased() {
        let t = Tensor::new(vec![0.0, 1.0, 2.0, 3.0], &[1, 1, 1, 4]).unwrap();
        let r = resize(&t, 1, 2, Filter::Bilinear).unwrap();
        // Triangle of half-width 2 centred at 1.0: weights 0.75, 0.75, 0.25.
        assert!((r.data()[0] - 1.25 / 1.75).abs() < 1e-12);
        assert!(r.data()[0] < r.data()[1]);
    }

    #[test]
    fn png_round_trip_is_lossless_on_8bit_values() {
        let data: Vec<f64> = (0..3 * 4 * 5)
            .map(|i| ((i * 37) % 256) as f64 / 255.0)
            .collect();
        let t = Tensor::new(data, &[1, 3, 4, 5]).unwrap();
        let back = decode_image(&encode_png(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back
            .data()
            .iter()
            .zip(t.data())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn geometry_helpers() {
        assert_eq!(shorter_side_size(100, 200, 50), (50, 100));
        assert_eq!(shorter_side_size(300, 200, 100), (150, 100));
        let t = Tensor::new((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]).unwrap();
        assert_eq!(
            center_crop(&t, 2, 2).unwrap().data(),
            &[5.0, 6.0, 9.0, 10.0]
        );
        assert_eq!(
            flip_horizontal(&t).unwrap().data()[..4],
            [3.0, 2.0, 1.0, 0.0]
        );
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);
    }
}
