//! PNG boundary: decoding uploads into rasters and encoding rasters for tests
//! and demos.

use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use thiserror::Error;

use crate::detector::RasterImage;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("not a decodable PNG: {0}")]
    Decode(String),
    #[error("PNG encoding failed: {0}")]
    Encode(String),
    #[error("cannot pad a {actual}-byte PNG to {target} bytes")]
    PadTarget { actual: usize, target: usize },
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];
const CHUNK_OVERHEAD: usize = 12;
const IEND_LEN: usize = 12;

pub fn is_png(bytes: &[u8]) -> bool {
    bytes.starts_with(&PNG_SIGNATURE)
}

/// Decodes any PNG colour type into 8-bit RGB.
pub fn decode_png(bytes: &[u8]) -> Result<RasterImage, ImagingError> {
    if !is_png(bytes) {
        return Err(ImagingError::Decode("missing PNG signature".into()));
    }
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| ImagingError::Decode(e.to_string()))?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let pixels = decoded.pixels().map(|p| p.0).collect();
    RasterImage::new(w, h, pixels).map_err(|e| ImagingError::Decode(e.to_string()))
}

pub fn encode_png(raster: &RasterImage) -> Result<Vec<u8>, ImagingError> {
    let flat: Vec<u8> = raster.pixels().iter().flat_map(|p| *p).collect();
    let img = RgbImage::from_raw(raster.width(), raster.height(), flat)
        .ok_or_else(|| ImagingError::Encode("buffer size mismatch".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ImagingError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Grows a PNG to exactly `target` bytes by inserting a private ancillary
/// chunk before `IEND`. Decoders skip the chunk, so pixels are unchanged.
pub fn pad_png(png: &[u8], target: usize) -> Result<Vec<u8>, ImagingError> {
    if !is_png(png) || png.len() < PNG_SIGNATURE.len() + IEND_LEN {
        return Err(ImagingError::Encode("input is not a PNG".into()));
    }
    if target == png.len() {
        return Ok(png.to_vec());
    }
    if target < png.len() + CHUNK_OVERHEAD {
        return Err(ImagingError::PadTarget {
            actual: png.len(),
            target,
        });
    }
    let data_len = target - png.len() - CHUNK_OVERHEAD;
    let split = png.len() - IEND_LEN;

    let chunk_type = *b"paDd";
    let mut crc = crc32fast::Hasher::new();
    crc.update(&chunk_type);
    let padding = vec![0u8; data_len];
    crc.update(&padding);

    let mut out = Vec::with_capacity(target);
    out.extend_from_slice(&png[..split]);
    out.extend_from_slice(&(data_len as u32).to_be_bytes());
    out.extend_from_slice(&chunk_type);
    out.extend_from_slice(&padding);
    out.extend_from_slice(&crc.finalize().to_be_bytes());
    out.extend_from_slice(&png[split..]);
    debug_assert_eq!(out.len(), target);
    Ok(out)
}
