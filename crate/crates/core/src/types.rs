//! Image, flow and descriptor containers plus patch extraction.
//!
//! Everything here is immutable after construction and stored row-major in
//! 64-bit floats.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
    #[error("buffer length {got} does not match {width}x{height}x{channels}")]
    BufferSize {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
    #[error("luminance value {value} at index {index} is not a finite number in [0,1]")]
    BadLuminance { index: usize, value: f64 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("patch size {0} must be odd")]
    EvenPatchSize(usize),
    #[error("pixel ({x},{y}) outside {width}x{height} image")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },
    #[error("flow is invalid at pixel ({x},{y})")]
    InvalidFlow { x: i64, y: i64 },
    #[error("descriptor dimension must be at least 1")]
    ZeroDim,
}

/// Integer pixel coordinate. Signed so that intermediate geometry may leave
/// the image before being clipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Pixel {
    pub x: i64,
    pub y: i64,
}

impl Pixel {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Pixel) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn chebyshev(self, other: Pixel) -> i64 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }
}

/// Reflect-101 index mapping (`d c b | a b c d | c b a`), the border pixel
/// itself is not repeated.
pub fn mirror_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

fn check_dims(width: usize, height: usize) -> Result<(), ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::EmptyImage { width, height });
    }
    Ok(())
}

/// Single-channel luminance image with values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(ImageError::BufferSize {
                width,
                height,
                channels: 1,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(ImageError::BadLuminance { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Converts interleaved 8-bit RGB with ITU-R 601 luma weights.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self, ImageError> {
        check_dims(width, height)?;
        if rgb.len() != width * height * 3 {
            return Err(ImageError::BufferSize {
                width,
                height,
                channels: 3,
                got: rgb.len(),
            });
        }
        let data = rgb
            .chunks_exact(3)
            .map(|c| {
                let y = 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64;
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mirrored(&self, x: i64, y: i64) -> f64 {
        self.get(mirror_index(x, self.width), mirror_index(y, self.height))
    }

    /// Bilinear sample with mirrored borders.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let a = self.get_mirrored(x0, y0);
        let b = self.get_mirrored(x0 + 1, y0);
        let c = self.get_mirrored(x0, y0 + 1);
        let d = self.get_mirrored(x0 + 1, y0 + 1);
        let top = a + fx * (b - a);
        let bot = c + fx * (d - c);
        top + fy * (bot - top)
    }
}

/// Dense displacement field with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn new(
        width: usize,
        height: usize,
        u: Vec<f64>,
        v: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self, ImageError> {
        check_dims(width, height)?;
        let n = width * height;
        for len in [u.len(), v.len(), valid.len()] {
            if len != n {
                return Err(ImageError::BufferSize {
                    width,
                    height,
                    channels: 1,
                    got: len,
                });
            }
        }
        for i in 0..n {
            if valid[i] && !(u[i].is_finite() && v[i].is_finite()) {
                return Err(ImageError::NonFinite(i));
            }
        }
        Ok(Self {
            width,
            height,
            u,
            v,
            valid,
        })
    }

    /// All-invalid field of the given size.
    pub fn invalid(width: usize, height: usize) -> Result<Self, ImageError> {
        let n = width * height;
        Self::new(width, height, vec![0.0; n], vec![0.0; n], vec![false; n])
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Result<Self, ImageError> {
        let n = width * height;
        Self::new(width, height, vec![u; n], vec![v; n], vec![true; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = self.index(x, y);
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, flow: Option<(f64, f64)>) {
        let i = self.index(x, y);
        match flow {
            Some((u, v)) if u.is_finite() && v.is_finite() => {
                self.u[i] = u;
                self.v[i] = v;
                self.valid[i] = true;
            }
            _ => {
                self.u[i] = 0.0;
                self.v[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    /// Euclidean length of the flow vector at `p`.
    pub fn displacement_magnitude(&self, p: Pixel) -> Result<f64, ImageError> {
        if !self.contains(p) {
            return Err(ImageError::OutOfBounds {
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            });
        }
        let (x, y) = (p.x as usize, p.y as usize);
        if !self.is_valid(x, y) {
            return Err(ImageError::InvalidFlow { x: p.x, y: p.y });
        }
        let (u, v) = self.get(x, y);
        Ok(u.hypot(v))
    }
}

/// Per-pixel descriptor vectors, each `dim` values stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorField {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl DescriptorField {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        check_dims(width, height)?;
        if dim == 0 {
            return Err(ImageError::ZeroDim);
        }
        if data.len() != width * height * dim {
            return Err(ImageError::BufferSize {
                width,
                height,
                channels: dim,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn descriptor(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// L2 distance between `self[a]` and `other[b]`.
    #[inline]
    pub fn distance_to(&self, a: (usize, usize), other: &DescriptorField, b: (usize, usize)) -> f64 {
        l2(self.descriptor(a.0, a.1), other.descriptor(b.0, b.1))
    }
}

#[inline]
pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Square luminance window of odd side length.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    size: usize,
    data: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if size.is_multiple_of(2) {
            return Err(ImageError::EvenPatchSize(size));
        }
        if data.len() != size * size {
            return Err(ImageError::BufferSize {
                width: size,
                height: size,
                channels: 1,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite(i));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// `size`×`size` window centred on `center`, mirror-padded at the borders.
pub fn extract_patch(img: &GrayImage, center: Pixel, size: usize) -> Result<Patch, ImageError> {
    if size.is_multiple_of(2) {
        return Err(ImageError::EvenPatchSize(size));
    }
    if !img.contains(center) {
        return Err(ImageError::OutOfBounds {
            x: center.x,
            y: center.y,
            width: img.width(),
            height: img.height(),
        });
    }
    let mut data = Vec::with_capacity(size * size);
    fill_patch(img, center, size, &mut data);
    Ok(Patch { size, data })
}

/// Appends the mirror-padded window to `out` without validation.
pub(crate) fn fill_patch(img: &GrayImage, center: Pixel, size: usize, out: &mut Vec<f64>) {
    let half = (size / 2) as i64;
    for dy in -half..=half {
        let y = mirror_index(center.y + dy, img.height());
        let row = &img.data[y * img.width..(y + 1) * img.width];
        let x0 = center.x - half;
        if x0 >= 0 && (x0 + size as i64) <= img.width() as i64 {
            out.extend_from_slice(&row[x0 as usize..x0 as usize + size]);
        } else {
            for dx in -half..=half {
                out.push(row[mirror_index(center.x + dx, img.width())]);
            }
        }
    }
}

/// Zero mean, unit population standard deviation; near-constant patches map
/// to all zeros.
pub fn normalize_patch(p: &Patch) -> Patch {
    let mut data = p.data.clone();
    normalize_in_place(&mut data);
    Patch { size: p.size, data }
}

pub(crate) fn normalize_in_place(data: &mut [f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        data.iter_mut().for_each(|v| *v = 0.0);
    } else {
        data.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        let data = (0..w * h).map(|i| i as f64 / (w * h) as f64).collect();
        GrayImage::new(w, h, data).unwrap()
    }

    #[test]
    fn constant_image_patch() {
        let img = GrayImage::constant(5, 5, 0.5).unwrap();
        let p = extract_patch(&img, Pixel::new(2, 2), 3).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn corner_patch_uses_reflect_101() {
        // rows a=[0.1,0.2,0.3], b=[0.4,0.5,0.6], c=[0.7,0.8,0.9]
        let img = GrayImage::new(3, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        let p = extract_patch(&img, Pixel::new(0, 0), 3).unwrap();
        // Row -1 reflects to row 1 (b), column -1 reflects to column 1.
        #[rustfmt::skip]
        let expected = [
            0.5, 0.4, 0.5,
            0.2, 0.1, 0.2,
            0.5, 0.4, 0.5,
        ];
        assert_eq!(p.data(), &expected);
    }

    #[test]
    fn full_window_is_identity() {
        let img = ramp(7, 7);
        let p = extract_patch(&img, Pixel::new(3, 3), 7).unwrap();
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn patch_errors() {
        let img = ramp(4, 4);
        assert_eq!(
            extract_patch(&img, Pixel::new(1, 1), 4),
            Err(ImageError::EvenPatchSize(4))
        );
        assert!(matches!(
            extract_patch(&img, Pixel::new(4, 0), 3),
            Err(ImageError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn mirror_index_handles_large_offsets() {
        assert_eq!(mirror_index(-1, 4), 1);
        assert_eq!(mirror_index(4, 4), 2);
        assert_eq!(mirror_index(-7, 4), 1);
        assert_eq!(mirror_index(9, 4), 3);
        assert_eq!(mirror_index(-3, 1), 0);
    }

    #[test]
    fn normalize_degenerate_patch() {
        let p = Patch::new(3, vec![0.5; 9]).unwrap();
        assert!(normalize_patch(&p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_checkerboard_pm_one() {
        // Even pixel count keeps the {0,1} checkerboard perfectly balanced.
        let data: Vec<f64> = (0..16).map(|i| ((i + i / 4) % 2) as f64).collect();
        let mut out = data.clone();
        normalize_in_place(&mut out);
        for (o, d) in out.iter().zip(&data) {
            assert_eq!(*o, if *d == 1.0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn displacement_magnitudes() {
        let mut f = FlowField::invalid(2, 1).unwrap();
        f.set(0, 0, Some((3.0, 4.0)));
        assert_eq!(f.displacement_magnitude(Pixel::new(0, 0)), Ok(5.0));
        f.set(0, 0, Some((-6.0, 8.0)));
        assert_eq!(f.displacement_magnitude(Pixel::new(0, 0)), Ok(10.0));
        f.set(0, 0, Some((0.0, 0.0)));
        assert_eq!(f.displacement_magnitude(Pixel::new(0, 0)), Ok(0.0));
        assert_eq!(
            f.displacement_magnitude(Pixel::new(1, 0)),
            Err(ImageError::InvalidFlow { x: 1, y: 0 })
        );
    }

    #[test]
    fn luminance_validation_and_rgb() {
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::new(0, 1, vec![]).is_err());
        let g = GrayImage::from_rgb8(1, 1, &[255, 0, 0]).unwrap();
        assert!((g.get(0, 0) - 0.299).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalized_moments(values in prop::collection::vec(0.0f64..1.0, 9)) {
            let p = Patch::new(3, values).unwrap();
            let out = normalize_patch(&p);
            let n = 9.0;
            let mean = out.data().iter().sum::<f64>() / n;
            let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if out.data().iter().any(|&v| v != 0.0) {
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((std - 1.0).abs() < 1e-9);
                let again = normalize_patch(&out);
                for (a, b) in again.data().iter().zip(out.data()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn interior_translation_consistency(cx in 4i64..10, cy in 4i64..10, dx in -2i64..=2, dy in -2i64..=2) {
            let img = ramp(14, 14);
            let a = extract_patch(&img, Pixel::new(cx + dx, cy + dy), 5).unwrap();
            for j in 0..5i64 {
                for i in 0..5i64 {
                    let x = (cx + dx - 2 + i) as usize;
                    let y = (cy + dy - 2 + j) as usize;
                    prop_assert_eq!(a.data()[(j * 5 + i) as usize], img.get(x, y));
                }
            }
        }

        #[test]
        fn magnitude_sign_symmetric(u in -100.0f64..100.0, v in -100.0f64..100.0) {
            let f = FlowField::constant(1, 1, u, v).unwrap();
            let g = FlowField::constant(1, 1, -u, -v).unwrap();
            let a = f.displacement_magnitude(Pixel::new(0, 0)).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, g.displacement_magnitude(Pixel::new(0, 0)).unwrap());
        }
    }
}
