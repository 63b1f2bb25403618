use std::path::Path;

use super::{read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::grid::ProbMap;

pub const TNS_MAGIC: &[u8; 4] = b"TNS1";
/// 32-bit little-endian IEEE-754 float.
pub const DTYPE_F32: u8 = 1;

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&dims).ok_or_else(|| Error::invalid(format!("tensor dims {dims:?} overflow")))?;
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::invalid(format!("tensor dims {dims:?} not encodable")));
        }
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

impl From<&ProbMap> for Tensor {
    fn from(map: &ProbMap) -> Self {
        Self {
            dims: vec![map.channels(), map.height(), map.width()],
            data: map.data().to_vec(),
        }
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode_tns(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.dims.len() + 4 * t.data.len());
    encode_into(t, &mut out);
    out
}

pub(crate) fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TNS_MAGIC);
    out.push(DTYPE_F32);
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes a complete `.tns` buffer; trailing bytes are an error.
pub fn decode_tns(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tns");
    let t = read_record(&mut r)?;
    r.finish()?;
    Ok(t)
}

/// Reads one record from the cursor, leaving any following bytes.
pub(crate) fn read_record(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(TNS_MAGIC)?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::corrupt(format!("tns: unsupported dtype code {dtype}")));
    }
    let rank = r.u8()? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let n = element_count(&dims)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::corrupt(format!("tns: dims {dims:?} overflow")))?;
    if r.remaining() < n * 4 {
        return Err(Error::corrupt(format!(
            "tns: payload for dims {dims:?} needs {} bytes, {} remain",
            n * 4,
            r.remaining()
        )));
    }
    let data = r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

/// Interprets a rank-3 `[C][H][W]` tensor as a probability map and checks its invariants.
pub fn probmap_from_tensor(t: Tensor) -> Result<ProbMap> {
    let [c, h, w] = t.dims[..] else {
        return Err(Error::corrupt(format!(
            "probability map must be rank 3, got dims {:?}",
            t.dims
        )));
    };
    let map = ProbMap::new(c, h, w, t.data).map_err(|e| Error::corrupt(e.to_string()))?;
    map.validate().map_err(|e| Error::corrupt(e.to_string()))?;
    Ok(map)
}

pub fn read_tns(path: &Path) -> Result<Tensor> {
    decode_tns(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_tns(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_tns(t))
}

pub fn read_probmap(path: &Path) -> Result<ProbMap> {
    read_tns(path).and_then(|t| probmap_from_tensor(t).map_err(|e| e.in_file(path)))
}

pub fn write_probmap(path: &Path, map: &ProbMap) -> Result<()> {
    write_tns(path, &Tensor::from(map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_magic_dtype_rank_dims_payload() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_tns(&t);
        assert_eq!(&b[..4], b"TNS1");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&b[18..22], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 22);
        assert_eq!(decode_tns(&b).unwrap(), t);
    }

    #[test]
    fn rank_zero_is_a_scalar() {
        let t = Tensor::new(vec![], vec![7.0]).unwrap();
        assert_eq!(decode_tns(&encode_tns(&t)).unwrap(), t);
    }

    #[test]
    fn rejects_bad_headers_and_lengths() {
        let good = encode_tns(&Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tns(&bad), Err(Error::CorruptInput(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_tns(&bad).is_err());
        assert!(decode_tns(&good[..good.len() - 1]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_tns(&long).is_err());
        let mut huge = b"TNS1\x01\x02".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_tns(&huge).is_err());
    }

    #[test]
    fn probmap_requires_rank3_and_invariants() {
        let t = Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap();
        assert!(probmap_from_tensor(t).is_ok());
        let t = Tensor::new(vec![2, 1, 1], vec![0.9, 0.5]).unwrap();
        assert!(matches!(probmap_from_tensor(t), Err(Error::CorruptInput(_))));
        let t = Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap();
        assert!(probmap_from_tensor(t).is_err());
    }
}
