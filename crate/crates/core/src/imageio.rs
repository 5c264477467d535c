//! Grayscale PNG read/write and resizing on `[0, 1]` float images.

use std::path::Path;

use image::{imageops, DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Decodes an image, collapses it to one channel and divides by the
/// container's maximum code value (255 for 8-bit, 65535 for 16-bit).
pub fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(to_unit_gray(&img))
}

fn to_unit_gray(img: &DynamicImage) -> Array2<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen_bit = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    if sixteen_bit {
        let raw = img.to_luma16().into_raw();
        Array2::from_shape_vec((h, w), raw.into_iter().map(|v| v as f32 / 65535.0).collect())
            .expect("buffer length matches dimensions")
    } else {
        let raw = img.to_luma8().into_raw();
        Array2::from_shape_vec((h, w), raw.into_iter().map(|v| v as f32 / 255.0).collect())
            .expect("buffer length matches dimensions")
    }
}

/// Bicubic (Catmull-Rom) resize; output clamped back into `[0, 1]`.
pub fn resize_bicubic(img: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    if img.dim() == (height, width) {
        return img.mapv(|v| v.clamp(0.0, 1.0));
    }
    let (h, w) = img.dim();
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, img.iter().copied().collect())
            .expect("buffer length matches dimensions");
    let out = imageops::resize(
        &buf,
        width as u32,
        height as u32,
        imageops::FilterType::CatmullRom,
    );
    Array2::from_shape_vec((height, width), out.into_raw())
        .expect("buffer length matches dimensions")
        .mapv(|v| v.clamp(0.0, 1.0))
}

/// Quantizes a `[0, 1]` image to 8 bits.
pub fn to_u8_codes(img: &Array2<f32>) -> Vec<u8> {
    img.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_gray(img: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, to_u8_codes(img))
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// 16-bit grayscale PNG; reading it back loses at most 1/131070 per pixel.
pub fn write_gray16(img: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = img.dim();
    let codes: Vec<u16> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, codes).expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_survives_resize() {
        let img = Array2::from_elem((224, 224), 128.0f32 / 255.0);
        let out = resize_bicubic(&img, 112, 112);
        assert_eq!(out.dim(), (112, 112));
        assert!(out.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn eight_bit_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Array2::from_shape_fn((8, 16), |(i, j)| ((i * 16 + j) as f32) / 255.0);
        write_gray(&img, &path).unwrap();
        let back = read_gray(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn sixteen_bit_scaled_by_container_max() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x16.png");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(2, 1, vec![0u16, 65535]).unwrap();
        buf.save(&path).unwrap();
        let back = read_gray(&path).unwrap();
        assert_eq!(back.as_slice().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_write_is_near_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y16.png");
        let img = Array2::from_shape_fn((5, 7), |(i, j)| (i as f32 * 0.173 + j as f32 * 0.031).fract());
        write_gray16(&img, &path).unwrap();
        let back = read_gray(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }
}
