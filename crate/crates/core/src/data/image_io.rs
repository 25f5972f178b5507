//! Grayscale image files and flow-magnitude visualisation.

use std::path::Path;

use image::{ImageBuffer, Luma};

use super::{write_bytes, DataError};
use crate::types::{FlowField, GrayImage};

/// Reads an 8- or 16-bit single-channel image as luminance in [0,1].
pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage, DataError> {
    let img = image::open(path.as_ref()).map_err(|e| DataError::Codec(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(DataError::UnsupportedImage(format!(
                "expected single-channel 8/16-bit, found {:?}",
                other.color()
            )))
        }
    };
    Ok(GrayImage::new(w, h, data)?)
}

pub fn write_gray_png16(path: impl AsRef<Path>, img: &GrayImage) -> Result<(), DataError> {
    let data: Vec<u16> = img.data().iter().map(|v| (v * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, data).expect("sized buffer");
    buf.save(path.as_ref()).map_err(|e| DataError::Codec(e.to_string()))
}

/// 8-bit binary PGM of `‖flow‖`, linearly scaled so the largest valid
/// magnitude maps to 255; invalid pixels are 0. Returns that maximum.
pub fn write_flow_magnitude_pgm(path: impl AsRef<Path>, flow: &FlowField) -> Result<f64, DataError> {
    let n = flow.u().len();
    let mags: Vec<f64> = (0..n)
        .map(|i| if flow.valid()[i] { flow.u()[i].hypot(flow.v()[i]) } else { 0.0 })
        .collect();
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", flow.width(), flow.height()).into_bytes();
    out.extend(mags.iter().map(|&m| if max > 0.0 { (255.0 * m / max).round() as u8 } else { 0 }));
    write_bytes(path.as_ref(), &out)?;
    Ok(max)
}
