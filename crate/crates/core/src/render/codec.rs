use std::io::Cursor;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageCodecError {
    #[error("image decode failed: {0}")]
    Decode(#[source] image::ImageError),
    #[error("image encode failed: {0}")]
    Encode(#[source] image::ImageError),
    #[error("image has zero width or height")]
    ZeroSize,
}

/// Decodes PNG (or JPEG) bytes into an 8-bit RGB raster. Alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, ImageCodecError> {
    let img = image::load_from_memory(bytes).map_err(ImageCodecError::Decode)?;
    let rgb = img.to_rgb8();
    if rgb.width() == 0 || rgb.height() == 0 {
        return Err(ImageCodecError::ZeroSize);
    }
    Ok(rgb)
}

/// Canonical PNG: 8-bit RGB, non-interlaced, default deflate level, `Sub`
/// filter on every row. Identical rasters always produce identical bytes.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ImageCodecError> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(Cursor::new(&mut out), CompressionType::Default, FilterType::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(ImageCodecError::Encode)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn round_trip_and_stable_bytes() {
        let img = RgbImage::from_fn(7, 5, |x, y| Rgb([x as u8 * 30, y as u8 * 40, 9]));
        let a = encode_png(&img).unwrap();
        let b = encode_png(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(decode_image(&a).unwrap(), img);
    }

    #[test]
    fn garbage_fails_to_decode() {
        assert!(matches!(decode_image(b"not a png"), Err(ImageCodecError::Decode(_))));
    }
}
