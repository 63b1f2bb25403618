use std::path::Path;

use super::tns::{encode_into, read_record, Tensor};
use super::{read_file, write_file, Reader};
use crate::ecm::{EcnArch, EcnWeights};
use crate::error::{Error, Result};

pub const ECW_MAGIC: &[u8; 4] = b"ECW1";

// Caps keep hostile headers from requesting absurd architectures.
const MAX_WIDTH: u32 = 1 << 14;
const MAX_BLOCKS: u32 = 256;
const MAX_KERNEL: u32 = 63;

/// Header (`C`, width, blocks, stem kernel, depthwise kernel as `u32` LE),
/// then every parameter tensor in serialization order as a `.tns` record.
pub fn encode_ecw(w: &EcnWeights) -> Vec<u8> {
    let arch = w.arch();
    let mut out = Vec::with_capacity(24 + 4 * arch.param_count() + 64 * arch.tensor_shapes().len());
    out.extend_from_slice(ECW_MAGIC);
    for v in [arch.classes, arch.width, arch.blocks, arch.stem_kernel, arch.dw_kernel] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (t, dims) in w.tensors().into_iter().zip(arch.tensor_shapes()) {
        let t = Tensor { dims, data: t.to_vec() };
        encode_into(&t, &mut out);
    }
    out
}

pub fn decode_ecw(bytes: &[u8]) -> Result<EcnWeights> {
    let mut r = Reader::new(bytes, "ecw");
    r.magic(ECW_MAGIC)?;
    let mut header = [0u32; 5];
    for h in header.iter_mut() {
        *h = r.u32()?;
    }
    let [classes, width, blocks, stem_kernel, dw_kernel] = header;
    if width > MAX_WIDTH || blocks > MAX_BLOCKS || stem_kernel > MAX_KERNEL || dw_kernel > MAX_KERNEL {
        return Err(Error::corrupt(format!("ecw: implausible header {header:?}")));
    }
    let arch = EcnArch {
        classes: classes as usize,
        width: width as usize,
        blocks: blocks as usize,
        stem_kernel: stem_kernel as usize,
        dw_kernel: dw_kernel as usize,
    };
    arch.validate().map_err(|e| Error::corrupt(format!("ecw: {e}")))?;
    let shapes = arch.tensor_shapes();
    let mut tensors = Vec::with_capacity(shapes.len());
    for (i, dims) in shapes.into_iter().enumerate() {
        let t = read_record(&mut r).map_err(|e| Error::corrupt(format!("ecw tensor {i}: {e}")))?;
        if t.dims != dims {
            return Err(Error::corrupt(format!(
                "ecw tensor {i}: dims {:?}, header implies {dims:?}",
                t.dims
            )));
        }
        tensors.push(t.data);
    }
    r.finish()?;
    EcnWeights::from_tensors(arch, tensors).map_err(|e| Error::corrupt(format!("ecw: {e}")))
}

pub fn read_ecw(path: &Path) -> Result<EcnWeights> {
    decode_ecw(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_ecw(path: &Path, w: &EcnWeights) -> Result<()> {
    write_file(path, &encode_ecw(w))
}
