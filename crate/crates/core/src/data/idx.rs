//! Big-endian IDX tensors: `0x00000803` u8 images, `0x00000801` u8 labels.
//! Gzip-compressed files are decompressed transparently.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{read_bytes, DataError};

const IMAGES: u32 = 0x0803;
const LABELS: u32 = 0x0801;

#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Luminance in [0,1], image-major.
    pub pixels: Vec<f64>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    Images(IdxImages),
    Labels(Vec<u8>),
}

fn be32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_body(bytes: &[u8], header: usize, dims: &[usize]) -> Result<usize, DataError> {
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DataError::DimensionOverflow(format!("{dims:?}")))?;
    let expected = header + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes(bytes.len() - expected));
    }
    Ok(n)
}

pub fn decode_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    let magic = be32(bytes, 0)?;
    match magic {
        IMAGES => {
            let count = be32(bytes, 4)? as usize;
            let rows = be32(bytes, 8)? as usize;
            let cols = be32(bytes, 12)? as usize;
            check_body(bytes, 16, &[count, rows, cols])?;
            Ok(IdxData::Images(IdxImages {
                count,
                rows,
                cols,
                pixels: bytes[16..].iter().map(|&b| b as f64 / 255.0).collect(),
            }))
        }
        LABELS => {
            let count = be32(bytes, 4)? as usize;
            check_body(bytes, 8, &[count])?;
            Ok(IdxData::Labels(bytes[8..].to_vec()))
        }
        other => Err(DataError::BadMagic {
            expected: "0x00000803 or 0x00000801".into(),
            found: format!("{other:#010x}"),
        }),
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxData, DataError> {
    let path = path.as_ref();
    let raw = read_bytes(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        decode_idx(&out)
    } else {
        decode_idx(&raw)
    }
}

pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_image_file() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102];
        let IdxData::Images(img) = decode_idx(&bytes).unwrap() else {
            panic!("expected images");
        };
        assert_eq!((img.count, img.rows, img.cols), (1, 2, 2));
        assert_eq!(img.image(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(encode_idx_images(1, 2, 2, &bytes[16..]), bytes);
    }

    #[test]
    fn labels_and_errors() {
        let bytes = encode_idx_labels(&[3, 1, 4]);
        assert_eq!(decode_idx(&bytes).unwrap(), IdxData::Labels(vec![3, 1, 4]));
        assert!(matches!(decode_idx(&bytes[..10]), Err(DataError::Truncated { .. })));
        let img = encode_idx_images(2, 2, 2, &[0; 7]);
        assert!(matches!(decode_idx(&img), Err(DataError::Truncated { expected: 24, found: 23 })));
        assert!(matches!(decode_idx(&[0, 0, 8, 9, 0, 0, 0, 0]), Err(DataError::BadMagic { .. })));
        assert!(matches!(decode_idx(&[0, 0]), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&encode_idx_labels(&[9, 8])).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx(&path).unwrap(), IdxData::Labels(vec![9, 8]));
    }
}
