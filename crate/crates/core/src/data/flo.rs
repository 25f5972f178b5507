//! Middlebury `.flo`: `PIEH`, little-endian u32 width and height, then
//! row-major interleaved f32 `(u, v)`.

use std::path::Path;

use super::{read_bytes, write_bytes, DataError};
use crate::types::FlowField;

const MAGIC: &[u8; 4] = b"PIEH";
const HEADER: usize = 12;
/// Components with magnitude above this mark a pixel invalid.
pub const FLO_INVALID: f32 = 1e9;
const INVALID_VALUE: f32 = 1e10;

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + flow.u().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    for i in 0..flow.u().len() {
        let (u, v) = if flow.valid()[i] {
            (flow.u()[i] as f32, flow.v()[i] as f32)
        } else {
            (INVALID_VALUE, INVALID_VALUE)
        };
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField, DataError> {
    if bytes.len() < HEADER {
        return Err(DataError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic {
            expected: "PIEH".into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (w, h) = (word(4) as usize, word(8) as usize);
    let body = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .filter(|&n| n <= isize::MAX as usize - HEADER)
        .ok_or_else(|| DataError::DimensionOverflow(format!("{w}x{h}")))?;
    let expected = HEADER + body;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes(bytes.len() - expected));
    }
    let n = w * h;
    let (mut u, mut v, mut valid) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in bytes[HEADER..].chunks_exact(8) {
        let a = f32::from_le_bytes(px[..4].try_into().expect("4 bytes"));
        let b = f32::from_le_bytes(px[4..].try_into().expect("4 bytes"));
        let ok = a.abs() <= FLO_INVALID && b.abs() <= FLO_INVALID;
        u.push(if ok { a as f64 } else { 0.0 });
        v.push(if ok { b as f64 } else { 0.0 });
        valid.push(ok);
    }
    Ok(FlowField::new(w, h, u, v, valid)?)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField, DataError> {
    decode_flo(&read_bytes(path.as_ref())?)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<(), DataError> {
    write_bytes(path.as_ref(), &encode_flo(flow))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_assembled_single_pixel() {
        let mut bytes = b"PIEH".to_vec();
        bytes.extend([1, 0, 0, 0, 1, 0, 0, 0]);
        bytes.extend([0u8; 8]);
        assert_eq!(bytes.len(), 20);
        let f = decode_flo(&bytes).unwrap();
        assert_eq!((f.width(), f.height()), (1, 1));
        assert_eq!(f.get(0, 0), (0.0, 0.0));
        assert!(f.is_valid(0, 0));
    }

    #[test]
    fn malformed_inputs() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend([1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!(matches!(decode_flo(&bytes), Err(DataError::BadMagic { .. })));
        bytes[..4].copy_from_slice(b"PIEH");
        assert!(matches!(decode_flo(&bytes[..19]), Err(DataError::Truncated { expected: 20, found: 19 })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_flo(&long), Err(DataError::TrailingBytes(1))));
        let mut huge = b"PIEH".to_vec();
        huge.extend([0xff; 8]);
        let err = decode_flo(&huge).unwrap_err();
        assert!(matches!(err, DataError::DimensionOverflow(_) | DataError::Truncated { .. }));
        assert!(matches!(decode_flo(b"PIE"), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn round_trip_with_invalid_pixels() {
        let mut f = FlowField::new(3, 2, vec![0.1, -2.5, 3.25, 1e-3, 7.0, -0.0], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![true; 6]).unwrap();
        f.set(1, 1, None);
        let g = decode_flo(&encode_flo(&f)).unwrap();
        for i in 0..6 {
            assert_eq!(g.valid()[i], f.valid()[i]);
            if f.valid()[i] {
                assert_eq!(g.u()[i], f.u()[i] as f32 as f64);
                assert_eq!(g.v()[i], f.v()[i] as f32 as f64);
            }
        }
    }
}
