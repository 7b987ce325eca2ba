//! Binary volume container: the 8-byte magic `KUKVOL01`, a one-byte dtype
//! code, three little-endian `u32` extents `(H, W, D)` and the values in
//! little-endian order with `d` varying fastest. Images use `D = 1`.

use std::path::Path;

use kukan_core::volume::{Image2D, Volume3D};

use crate::error::{self, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"KUKVOL01";
pub const HEADER_LEN: usize = 8 + 1 + 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub dtype: Dtype,
    pub extents: [usize; 3],
    pub values: Vec<f64>,
}

pub fn encode(extents: [usize; 3], values: &[f64], dtype: Dtype) -> Vec<u8> {
    debug_assert_eq!(extents.iter().product::<usize>(), values.len());
    let mut out = Vec::with_capacity(HEADER_LEN + values.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    for e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => values.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => values.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Decodes one container from the front of `bytes`, returning it and the
/// number of bytes consumed. Errors are plain messages; callers attach paths.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Block, usize), String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let dtype = Dtype::from_code(bytes[8]).ok_or_else(|| format!("unknown dtype code {}", bytes[8]))?;
    let mut extents = [0usize; 3];
    for (i, e) in extents.iter_mut().enumerate() {
        let at = 9 + 4 * i;
        *e = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let n: usize = extents.iter().product();
    let end = HEADER_LEN + n * dtype.width();
    if bytes.len() < end {
        return Err(format!("truncated payload: need {end} bytes, have {}", bytes.len()));
    }
    let payload = &bytes[HEADER_LEN..end];
    let values = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((Block { dtype, extents, values }, end))
}

pub fn save_volume(path: &Path, v: &Volume3D, dtype: Dtype) -> Result<()> {
    error::write(path, encode(v.extents(), v.data(), dtype))
}

pub fn save_image(path: &Path, img: &Image2D, dtype: Dtype) -> Result<()> {
    error::write(path, encode([img.rows(), img.cols(), 1], img.data(), dtype))
}

fn load_block(path: &Path) -> Result<Block> {
    let bytes = error::read(path)?;
    let (block, used) = decode(&bytes).map_err(|m| HarnessError::format(path, m))?;
    if used != bytes.len() {
        return Err(HarnessError::format(path, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(block)
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let b = load_block(path)?;
    Ok(Volume3D::new(b.extents, b.values)?)
}

pub fn load_image(path: &Path) -> Result<Image2D> {
    let b = load_block(path)?;
    if b.extents[2] != 1 {
        return Err(HarnessError::format(path, format!("expected an image, found depth {}", b.extents[2])));
    }
    Ok(Image2D::new(b.extents[0], b.extents[1], b.values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode([2, 3, 1], &[0.0; 6], Dtype::F32);
        assert_eq!(&bytes[..8], b"KUKVOL01");
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..21], &[2, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(bytes.len(), HEADER_LEN + 24);
    }

    #[test]
    fn values_are_little_endian_and_d_fastest() {
        let v = Volume3D::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(v.extents(), v.data(), Dtype::F32);
        let idx = HEADER_LEN + 4 * v.index(0, 1, 0);
        assert_eq!(&bytes[idx..idx + 4], &3.0f32.to_le_bytes());
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let values: Vec<f64> = (0..24).map(|i| (i as f64).sin() * 1e-3 + 1.0 / 3.0).collect();
        let (b, used) = decode(&encode([2, 3, 4], &values, Dtype::F64)).unwrap();
        assert_eq!(used, HEADER_LEN + 24 * 8);
        assert_eq!(b.values, values);
        assert_eq!(b.extents, [2, 3, 4]);
    }

    #[test]
    fn f32_round_trip_rounds_once() {
        let values = vec![0.1, 254.9, 1e-7];
        let (b, _) = decode(&encode([3, 1, 1], &values, Dtype::F32)).unwrap();
        for (got, v) in b.values.iter().zip(&values) {
            assert_eq!(*got, *v as f32 as f64);
        }
    }

    #[test]
    fn malformed_input_is_rejected() {
        let good = encode([2, 2, 2], &[1.0; 8], Dtype::F32);
        assert!(decode(&good[..10]).is_err());
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        bad = good;
        bad[8] = 7;
        assert!(decode(&bad).is_err());
    }
}
