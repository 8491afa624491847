//! Image files to and from `[H, W, 3]` arrays in `[-1, 1]`.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::IxDyn;

use crate::autodiff::NdArray;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An RGB image, channels last, values in `[-1, 1]`.
pub type Image<T> = NdArray<T>;

pub fn check_rgb<T: Scalar>(img: &Image<T>) -> Result<(usize, usize)> {
    match img.shape() {
        &[h, w, 3] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::shape("image", format!("expected [H, W, 3], got {s:?}"))),
    }
}

pub fn from_rgb8<T: Scalar>(img: &RgbImage) -> Image<T> {
    let (w, h) = img.dimensions();
    NdArray::from_shape_fn(IxDyn(&[h as usize, w as usize, 3]), |d| {
        let p = img.get_pixel(d[1] as u32, d[0] as u32)[d[2]];
        T::lit(p as f64 / 127.5 - 1.0)
    })
}

/// Quantizes to 8 bits with round-half-up after clamping to `[-1, 1]`.
pub fn to_rgb8<T: Scalar>(img: &Image<T>) -> Result<RgbImage> {
    let (h, w) = check_rgb(img)?;
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = img[[y as usize, x as usize, c]].as_f64().clamp(-1.0, 1.0);
            ((v + 1.0) * 127.5 + 0.5).floor().min(255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit PNG atomically (temp file, then rename).
pub fn save_png<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let rgb = to_rgb8(img)?;
    let tmp = path.with_extension("png.tmp");
    rgb.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: tmp.clone(),
            source,
        })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Catmull-Rom resize; the filter support widens when shrinking, so it also
/// low-passes.
pub(crate) fn bicubic_resize<T: Scalar>(img: &Image<T>, target: (usize, usize)) -> Result<Image<T>> {
    let (h, w) = check_rgb(img)?;
    // The resampler clamps to [0, 1] for float pixels, so work in that range.
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| ((img[[y as usize, x as usize, c]].as_f64() + 1.0) * 0.5) as f32;
        Rgb([px(0), px(1), px(2)])
    });
    let out = imageops::resize(&buf, target.1 as u32, target.0 as u32, FilterType::CatmullRom);
    Ok(NdArray::from_shape_fn(IxDyn(&[target.0, target.1, 3]), |d| {
        T::lit(out.get_pixel(d[1] as u32, d[0] as u32)[d[2]] as f64 * 2.0 - 1.0)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_round_trip() {
        let rgb: RgbImage = ImageBuffer::from_fn(4, 3, |x, y| Rgb([(x * 60) as u8, (y * 100) as u8, 255]));
        let img: Image<f32> = from_rgb8(&rgb);
        assert_eq!(img.shape(), &[3, 4, 3]);
        assert_eq!(to_rgb8(&img).unwrap(), rgb);
    }

    #[test]
    fn half_step_rounds_up() {
        // 0 maps to 127.5 exactly.
        let img = NdArray::from_elem(IxDyn(&[1, 1, 3]), 0.0f64);
        assert_eq!(to_rgb8(&img).unwrap().get_pixel(0, 0)[0], 128);
    }
}
