//! KITTI flow PNGs: 16-bit RGB with `u = (R − 2¹⁵)/64`, `v = (G − 2¹⁵)/64`
//! and validity in B.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use super::DataError;
use crate::types::FlowField;

const OFFSET: f64 = 32768.0;
const SCALE: f64 = 64.0;

pub fn read_kitti_flow_png(path: impl AsRef<Path>) -> Result<FlowField, DataError> {
    let img = image::open(path.as_ref()).map_err(|e| DataError::Codec(e.to_string()))?;
    let image::DynamicImage::ImageRgb16(buf) = img else {
        return Err(DataError::UnsupportedImage(format!(
            "expected 16-bit RGB, found {:?}",
            img.color()
        )));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut flow = FlowField::invalid(w, h)?;
    for (x, y, px) in buf.enumerate_pixels() {
        let [r, g, b] = px.0;
        if b > 0 {
            flow.set(
                x as usize,
                y as usize,
                Some(((r as f64 - OFFSET) / SCALE, (g as f64 - OFFSET) / SCALE)),
            );
        }
    }
    Ok(flow)
}

/// Encodes with rounding to the 1/64 px grid; out-of-range values saturate.
pub fn write_kitti_flow_png(path: impl AsRef<Path>, flow: &FlowField) -> Result<(), DataError> {
    let enc = |c: f64| (c * SCALE + OFFSET).round().clamp(0.0, 65535.0) as u16;
    let buf = ImageBuffer::from_fn(flow.width() as u32, flow.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if flow.is_valid(x, y) {
            let (u, v) = flow.get(x, y);
            Rgb([enc(u), enc(v), 1u16])
        } else {
            Rgb([0u16, 0, 0])
        }
    });
    buf.save(path.as_ref()).map_err(|e| DataError::Codec(e.to_string()))
}
