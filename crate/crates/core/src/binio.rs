//! Little-endian primitives shared by the binary file formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) struct LeReader<R> {
    inner: R,
    what: &'static str,
}

impl<R: Read> LeReader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    fn fill(&mut self, buf: &mut [u8], field: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::format(format!("{}: truncated while reading {}", self.what, field))
            } else {
                Error::Io(e)
            }
        })
    }

    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf, "magic")?;
        if &buf != expected {
            return Err(Error::format(format!("{}: bad magic", self.what)));
        }
        Ok(())
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf, field)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf, field)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn f64(&mut self, field: &str) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf, field)?;
        Ok(f64::from_le_bytes(buf))
    }

    pub fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(field)).collect()
    }

    /// Fails unless the stream is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf)? {
            0 => Ok(()),
            _ => Err(Error::format(format!("{}: trailing bytes after payload", self.what))),
        }
    }
}

pub(crate) fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn put_f64s<W: Write>(w: &mut W, vs: impl IntoIterator<Item = f64>) -> io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn to_u32(v: usize, field: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{field} = {v} exceeds u32 range")))
}
