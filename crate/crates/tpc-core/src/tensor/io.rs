//! Little-endian binary tensor records: dtype tag (u8), rank (u32),
//! extents (u64 each), then raw scalar data. Used by the checkpoint format.

use std::io::{Read, Write};

use super::{DType, TensorError};

/// A tensor value detached from any tape, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        RawTensor { dtype, shape, data }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &RawTensor) -> Result<(), TensorError> {
    w.write_all(&[t.dtype.tag()])?;
    w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
    for &e in &t.shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    match t.dtype {
        DType::F32 => {
            for &v in &t.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<RawTensor, TensorError> {
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0])
        .ok_or_else(|| TensorError::BadRecord(format!("unknown dtype tag {}", tag[0])))?;
    let mut rank = [0u8; 4];
    r.read_exact(&mut rank)?;
    let rank = u32::from_le_bytes(rank) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e)?;
        shape.push(u64::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        DType::F32 => {
            for _ in 0..n {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
        DType::F64 => {
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
        }
    }
    Ok(RawTensor { dtype, shape, data })
}
