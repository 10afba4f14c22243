//! The `FMT1` binary array format.
//!
//! Layout: the four magic bytes `FMT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions, then the payload as little-endian `f64`
//! in row-major order. Feature tensors are rank 3 or 4; model parameters
//! are stored as rank 1 (channel vectors, biases) or rank 2 (head weights).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::new(self.dims, self.data)
    }
}

impl From<&Tensor> for Array {
    fn from(t: &Tensor) -> Self {
        Self {
            dims: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

pub fn encode(a: &Array) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * a.dims.len() + 8 * a.data.len());
    out.extend_from_slice(MAGIC);
    let rank = u32::try_from(a.dims.len()).map_err(|_| Error::Format("rank overflow".into()))?;
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in &a.dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} overflows u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &a.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Array> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let read_u32 = |r: &mut &[u8]| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated header".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(&mut r)? as usize);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if r.len() != len * 8 {
        return Err(Error::Format(format!(
            "payload has {} bytes, dims {dims:?} need {}",
            r.len(),
            len * 8
        )));
    }
    let data = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Array { dims, data })
}

pub fn write_array(path: impl AsRef<Path>, a: &Array) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(a)?)?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<Array> {
    decode(&fs::read(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_array(path, &Array::from(t))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_array(path)?.into_tensor()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![1, 1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&Array::from(&t)).unwrap();
        let mut expected = b"FMT1".to_vec();
        expected.extend_from_slice(&[3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"FMT").is_err());
        assert!(decode(b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00").is_err());
        let mut good = encode(&Array::vector(vec![1.0, 2.0])).unwrap();
        good.pop();
        assert!(matches!(decode(&good), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(
            dims in prop::collection::vec(1usize..5, 1..5),
            seed in any::<u64>(),
        ) {
            let len: usize = dims.iter().product();
            let data: Vec<f64> = (0..len)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let a = Array::new(dims, data).unwrap();
            let back = decode(&encode(&a).unwrap()).unwrap();
            prop_assert_eq!(back.dims, a.dims);
            let same = back.data.iter().zip(&a.data).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
        }
    }
}
