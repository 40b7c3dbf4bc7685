//! `DPX1` arrays: a tiny little-endian container for f64 tensors.
//!
//! Layout: magic `DPX1`, dtype byte (0 = f64), rank byte, `rank` u32 extents,
//! then the row-major payload.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

const MAGIC: &[u8; 4] = b"DPX1";
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ArrayFile {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(!shape.is_empty() && shape.len() <= u8::MAX as usize, "rank must be 1..=255, got {}", shape.len());
        let n: usize = shape.iter().product();
        ensure!(n == data.len(), "shape {shape:?} holds {n} values but {} were given", data.len());
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DTYPE_F64);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).context("extent does not fit in u32")?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 6, "truncated header");
        ensure!(&bytes[..4] == MAGIC, "bad magic {:?}", &bytes[..4]);
        if bytes[4] != DTYPE_F64 {
            bail!("unsupported dtype tag {}", bytes[4]);
        }
        let rank = bytes[5] as usize;
        ensure!(rank > 0, "rank 0 arrays are not supported");
        let head = 6 + 4 * rank;
        ensure!(bytes.len() >= head, "truncated shape");
        let shape: Vec<usize> = bytes[6..head]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        ensure!(
            bytes.len() == head + 8 * n,
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - head,
            8 * n
        );
        let data = bytes[head..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let a = ArrayFile::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = a.to_bytes().unwrap();
        assert_eq!(&b[..6], &[b'D', b'P', b'X', b'1', 0, 2]);
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(b.len(), 14 + 16);
        assert_eq!(ArrayFile::from_bytes(&b).unwrap(), a);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(ArrayFile::new(vec![3], vec![1.0]).is_err());
        let mut b = ArrayFile::vector(vec![1.0, 2.0]).to_bytes().unwrap();
        assert!(ArrayFile::from_bytes(&b[..b.len() - 1]).is_err());
        b[4] = 1;
        assert!(ArrayFile::from_bytes(&b).is_err());
        assert!(ArrayFile::from_bytes(b"DPX2\0\x01").is_err());
    }
}
