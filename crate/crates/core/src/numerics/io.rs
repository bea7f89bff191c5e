//! Binary tensor files.
//!
//! A tensor record is `b"FDM1"`, a `u8` rank, `rank` little-endian `u32`
//! extents, then the row-major little-endian `f32` payload. A container
//! holds named records: `b"FDMC"`, a `u32` section count, then per section a
//! `u16` name length, the UTF-8 name, and one tensor record.

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"FDM1";
pub const CONTAINER_MAGIC: &[u8; 4] = b"FDMC";

/// Serialized size of a tensor with the given extents.
pub fn encoded_len(dims: &[usize]) -> usize {
    4 + 1 + 4 * dims.len() + 4 * dims.iter().product::<usize>()
}

pub fn encode_tensor(t: &Tensor<f32>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn tensor_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(t.dims()));
    encode_tensor(t, &mut out);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated input: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        if self.take(4)? != TENSOR_MAGIC {
            return Err(Error::Format("bad tensor magic".into()));
        }
        let rank = self.take(1)?[0] as usize;
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let payload = self.take(4 * len)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { buf, pos: 0 };
    let t = r.tensor()?;
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after tensor record".into()));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&buf)
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.sections.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing section `{name}`")))
    }

    pub fn sections(&self) -> &[(String, Tensor<f32>)] {
        &self.sections
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, t) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CONTAINER_MAGIC {
            return Err(Error::Format("bad container magic".into()));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let n = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?
                .to_string();
            sections.push((name, r.tensor()?));
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after container".into()));
        }
        Ok(Self { sections })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0f32, -0.5]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..4], b"FDM1");
        assert_eq!(b[4], 2);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..17], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), encoded_len(&[2, 1]));
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut b = tensor_to_bytes(&t);
        assert!(tensor_from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(tensor_from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn tensor_and_container_round_trip(
            dims in prop::collection::vec(1usize..5, 1..=4),
            seed in any::<u32>(),
        ) {
            let t = Tensor::from_fn(&dims, |i| (i as f32 * 0.37 + seed as f32).sin());
            let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
            prop_assert_eq!(&back, &t);
            let mut c = Container::new();
            c.push("a", t.clone());
            c.push("second", back);
            let c2 = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(c2, c);
        }
    }
}
