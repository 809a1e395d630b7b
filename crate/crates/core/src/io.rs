use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Little-endian binary writer for the on-disk formats.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Tensor as rank, dims, then raw f64 data in row-major order.
    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over an in-memory file image; every failure reports the byte
/// offset at which parsing stopped.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

const MAX_TENSOR_RANK: u32 = 8;

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: impl Into<String>) -> Self {
        ByteReader {
            buf,
            pos: 0,
            path: path.into(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "unexpected end of file: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(self.error(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let got = self.u32()?;
        if got != expected {
            return Err(self.error(format!("unsupported version {got}, expected {expected}")));
        }
        Ok(())
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        if rank > MAX_TENSOR_RANK {
            return Err(self.error(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| self.error("tensor dimensions overflow"))?;
            shape.push(d);
        }
        let need = numel
            .checked_mul(8)
            .ok_or_else(|| self.error("tensor byte size overflows"))?;
        if self.buf.len() - self.pos < need {
            return Err(self.error(format!(
                "truncated tensor data: need {need} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data).map_err(|e| self.error(e.to_string()))
    }

    /// Tensor that must match an expected shape exactly.
    pub fn tensor_shaped(&mut self, shape: &[usize]) -> Result<Tensor> {
        let start = self.pos;
        let t = self.tensor()?;
        if t.shape() != shape {
            self.pos = start;
            return Err(self.error(format!(
                "tensor shape mismatch: expected {shape:?}, got {:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!(
                "{} trailing bytes after end of structure",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_bitexact() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300, -7.25, 0.1])
            .unwrap();
        let mut w = ByteWriter::new();
        w.tensor(&t);
        let bytes = w.into_vec();
        let mut r = ByteReader::new(&bytes, "mem");
        let back = r.tensor().unwrap();
        r.finish().unwrap();
        assert!(crate::tensor::bits_equal(&t, &back));
    }

    #[test]
    fn truncated_tensor_reports_offset() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut w = ByteWriter::new();
        w.tensor(&t);
        let mut bytes = w.into_vec();
        bytes.truncate(bytes.len() - 5);
        let mut r = ByteReader::new(&bytes, "mem");
        let err = r.tensor().unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 8), // rank + one dim read
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn implausible_rank_is_rejected() {
        let mut w = ByteWriter::new();
        w.u32(4_000_000);
        let bytes = w.into_vec();
        let mut r = ByteReader::new(&bytes, "mem");
        assert!(r.tensor().is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut r = ByteReader::new(b"NOPE rest", "mem");
        assert!(r.magic(b"CPBB").is_err());
        let mut r2 = ByteReader::new(b"CPBBrest", "mem");
        assert!(r2.magic(b"CPBB").is_ok());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut w = ByteWriter::new();
        w.u32(7);
        let mut bytes = w.into_vec();
        bytes.push(0);
        let mut r = ByteReader::new(&bytes, "mem");
        r.u32().unwrap();
        assert!(r.finish().is_err());
    }
}
