//! PNG and binary PPM (P6) images as 8-bit RGB.

use std::fs;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use vault_core::image::RgbImage;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Png,
    Ppm,
}

impl ImageKind {
    pub fn extension(self) -> &'static str {
        match self {
            ImageKind::Png => "png",
            ImageKind::Ppm => "ppm",
        }
    }

    pub fn parse(s: &str) -> Option<ImageKind> {
        match s {
            "png" => Some(ImageKind::Png),
            "ppm" => Some(ImageKind::Ppm),
            _ => None,
        }
    }
}

/// Decodes a PNG or P6 PPM from memory. Other formats, including ASCII PPM,
/// are rejected.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    match format {
        ImageFormat::Png => {}
        ImageFormat::Pnm if bytes.starts_with(b"P6") => {}
        ImageFormat::Pnm => return Err("only binary P6 PPM is supported".into()),
        other => return Err(format!("unsupported image format {other:?}")),
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let rgb = decoded.into_rgb8();
    let (w, h) = rgb.dimensions();
    RgbImage::new(w as usize, h as usize, rgb.into_raw()).map_err(|e| e.to_string())
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_image(&bytes).map_err(|m| Error::format(path, m))
}

pub fn encode_image(image: &RgbImage, kind: ImageKind) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    let (w, h) = (image.width() as u32, image.height() as u32);
    let result = match kind {
        ImageKind::Png => PngEncoder::new(&mut out).write_image(image.data(), w, h, ExtendedColorType::Rgb8),
        ImageKind::Ppm => PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(image.data(), w, h, ExtendedColorType::Rgb8),
    };
    result.map_err(|e| e.to_string())?;
    Ok(out)
}

pub fn write_image(path: &Path, image: &RgbImage, kind: ImageKind) -> Result<()> {
    let bytes = encode_image(image, kind).map_err(|m| Error::format(path, m))?;
    fs::write(path, bytes).map_err(Error::io(path))
}
