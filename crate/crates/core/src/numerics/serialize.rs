//! Flat little-endian tensor format.
//!
//! Tensor record: magic `CSTN`, version `u32`, rank `u32`, dims `u64[rank]`,
//! dtype tag `u8`, raw values. A parameter set is magic `CSPS`, version
//! `u32`, count `u32`, then per entry a `u32` name length, UTF-8 name and one
//! tensor record, in sorted name order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParamSet, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"CSTN";
pub const PARAMS_MAGIC: &[u8; 4] = b"CSPS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_tensor_as(w, t, DType::F64)
}

pub fn write_tensor_as(w: &mut impl Write, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype as u8])?;
    let mut buf = Vec::with_capacity(t.len() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
    }
    let dtype = DType::from_tag(read_exact::<1>(r)?[0])?;
    let n: usize = shape.iter().product();
    let width = match dtype {
        DType::F64 => 8,
        DType::F32 => 4,
    };
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw)?;
    let data = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_params(w: &mut impl Write, params: &ParamSet) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<ParamSet> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::Format(format!("bad parameter-set magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter-set version {version}"
        )));
    }
    let count = read_u32(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("parameter name not UTF-8: {e}")))?;
        params.insert(name, read_tensor(r)?)?;
    }
    Ok(params)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn tensor_from_bytes(mut bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[0..4], b"CSTN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 1);
        assert_eq!(b[28], 0);
        assert_eq!(f64::from_le_bytes(b[29..37].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 29 + 16);
    }

    #[test]
    fn f32_payload_is_widened() {
        let t = Tensor::from_vec(vec![0.5, 3.25]);
        let mut buf = Vec::new();
        write_tensor_as(&mut buf, &t, DType::F32).unwrap();
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut b = tensor_to_bytes(&Tensor::scalar(1.0));
        b[0] = b'X';
        assert!(matches!(tensor_from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn param_set_bytes_are_stable() {
        let mut p = ParamSet::new();
        p.insert("z.w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        p.insert("a.b", Tensor::scalar(-0.5)).unwrap();
        let mut first = Vec::new();
        write_params(&mut first, &p).unwrap();
        let back = read_params(&mut first.as_slice()).unwrap();
        let mut second = Vec::new();
        write_params(&mut second, &back).unwrap();
        assert_eq!(first, second);
    }

    proptest! {
        #[test]
        fn tensor_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
            let t = Tensor::new(shape, data).unwrap();
            prop_assert_eq!(tensor_from_bytes(&tensor_to_bytes(&t)).unwrap(), t);
        }
    }
}
