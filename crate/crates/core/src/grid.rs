//! Binary grid format for real-valued maps (entropy maps, teacher prompts).
//!
//! ```text
//! offset  size   content
//! 0       8      magic "TSGRID01"
//! 8       4      H, u32 little-endian
//! 12      4      W, u32 little-endian
//! 16      8*H*W  values, f64 little-endian, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

pub const GRID_MAGIC: &[u8; 8] = b"TSGRID01";
const HEADER_LEN: usize = 16;

pub fn encode_grid(values: &Array2<f64>) -> Vec<u8> {
    let (h, w) = values.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * h * w);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != GRID_MAGIC {
        return Err(Error::format("grid", "bad magic"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * h * w {
        return Err(Error::format("grid", format!("expected {} value bytes for {h}x{w}, found {}", 8 * h * w, body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Array2::from_shape_vec((h, w), values).expect("length checked"))
}

pub fn write_grid(path: &Path, values: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_grid(values)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_grid(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_grid(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_exact(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let values = Array2::from_shape_fn((h, w), |(y, x)| {
                f64::from_bits(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left((y * w + x) as u32) >> 2)
            });
            let back = decode_grid(&encode_grid(&values)).unwrap();
            prop_assert_eq!(back, values);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_grid(&Array2::from_elem((2, 3), 1.5));
        assert_eq!(&bytes[..8], GRID_MAGIC);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 48);
    }

    #[test]
    fn rejects_truncated() {
        let bytes = encode_grid(&Array2::zeros((2, 2)));
        assert!(decode_grid(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_grid(b"NOTAGRID00000000").is_err());
    }
}
