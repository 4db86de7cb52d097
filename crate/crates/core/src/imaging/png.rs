use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use image::{DynamicImage, ExtendedColorType, ImageFormat, ImageReader};

use super::ImageTensor;
use crate::error::{Error, Result};

/// Reads an 8- or 16-bit PNG. Alpha is dropped; gray stays single-channel.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::with_format(BufReader::new(file), ImageFormat::Png);
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::Format(u.to_string()),
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode(other.to_string()),
    })?;
    from_dynamic(decoded)
}

pub(crate) fn from_dynamic(img: DynamicImage) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, scale8(b.as_raw())),
        DynamicImage::ImageLumaA8(b) => (1, scale8(&drop_alpha(b.as_raw(), 2))),
        DynamicImage::ImageRgb8(b) => (3, scale8(b.as_raw())),
        DynamicImage::ImageRgba8(b) => (3, scale8(&drop_alpha(b.as_raw(), 4))),
        DynamicImage::ImageLuma16(b) => (1, scale16(b.as_raw())),
        DynamicImage::ImageLumaA16(b) => (1, scale16(&drop_alpha(b.as_raw(), 2))),
        DynamicImage::ImageRgb16(b) => (3, scale16(b.as_raw())),
        DynamicImage::ImageRgba16(b) => (3, scale16(&drop_alpha(b.as_raw(), 4))),
        other => {
            return Err(Error::Format(format!(
                "unsupported sample type {:?}",
                other.color()
            )))
        }
    };
    ImageTensor::new(h, w, channels, data)
}

fn drop_alpha<T: Copy>(raw: &[T], stride: usize) -> Vec<T> {
    raw.chunks_exact(stride)
        .flat_map(|px| px[..stride - 1].iter().copied())
        .collect()
}

fn scale8(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&b| b as f32 / 255.0).collect()
}

fn scale16(raw: &[u16]) -> Vec<f32> {
    raw.iter().map(|&b| b as f32 / 65535.0).collect()
}

/// `round(v * 255)` with halves rounded up, clamped to `[0, 255]`.
#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub(crate) fn to_bytes(img: &ImageTensor) -> Vec<u8> {
    img.data().iter().map(|&v| quantize(v)).collect()
}

pub(crate) fn color_type(img: &ImageTensor) -> ExtendedColorType {
    if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    }
}

/// Writes an 8-bit PNG.
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    image::save_buffer_with_format(
        path,
        &to_bytes(img),
        img.width() as u32,
        img.height() as u32,
        color_type(img),
        ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    })
}
