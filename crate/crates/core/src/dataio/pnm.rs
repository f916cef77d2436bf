//! Binary PGM (P5) and PPM (P6) frames with maxval 255.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Reads a P5/P6 file into an `[h, w, c]` frame with values `v/255`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| data_err(path, e.to_string()))?;
    decode_pnm(&bytes).map_err(|msg| data_err(path, msg))
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    match bytes.get(..2) {
        Some(b"P5") | Some(b"P6") => {}
        _ => return Err("not a binary PGM/PPM file (expected P5 or P6 magic)".into()),
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| format!("malformed PGM/PPM: {e}"))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        other => {
            return Err(format!(
                "unsupported sample layout {:?}; only 8-bit gray or RGB (maxval 255)",
                other.color()
            ))
        }
    };
    Tensor::new(
        vec![h, w, c],
        raw.iter().map(|&v| v as f32 / 255.0).collect(),
    )
    .map_err(|e| e.to_string())
}

/// Quantizes to 8 bits (clamped, rounded) and encodes as P5 or P6.
pub fn encode_pnm(frame: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = frame.hwc()?;
    let (subtype, color) = match c {
        1 => (
            PnmSubtype::Graymap(SampleEncoding::Binary),
            ExtendedColorType::L8,
        ),
        3 => (
            PnmSubtype::Pixmap(SampleEncoding::Binary),
            ExtendedColorType::Rgb8,
        ),
        _ => {
            return Err(Error::shape(format!(
                "PGM/PPM needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Cursor::new(Vec::new());
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn write_pnm(path: &Path, frame: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(frame)?)?;
    Ok(())
}
